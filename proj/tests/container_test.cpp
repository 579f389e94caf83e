#include "lbq/container.hpp"

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "lbq/quant.hpp"
#include "lbq/tensor.hpp"

using namespace lbq;

namespace {

// Assembles a container blob from a raw header string plus data bytes,
// for crafting headers the writer would refuse to produce.
std::vector<std::uint8_t> craft_blob(const std::string& header,
                                     const std::vector<std::uint8_t>& data,
                                     std::uint32_t version = kContainerVersion) {
  std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(version >> (8 * i)));
  const std::uint64_t hlen = header.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(hlen >> (8 * i)));
  out.insert(out.end(), header.begin(), header.end());
  while (out.size() % 8 != 0) out.push_back(0);
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

std::string entry_json(const char* dtype, const std::string& shape,
                       std::size_t offset, std::size_t length) {
  return std::string("{\"dtype\":\"") + dtype + "\",\"shape\":" + shape +
         ",\"granularity\":\"none\",\"group_size\":0,\"offset\":" +
         std::to_string(offset) + ",\"length\":" + std::to_string(length) + "}";
}

}  // namespace

TEST(Container, F32RoundTripWithMeta) {
  Container c;
  c.put_tensor("w", rand_tensor({3, 4}, 1));
  c.meta["note"] = "hello";
  std::vector<std::uint8_t> blob = c.serialize();

  Container back = Container::deserialize(blob);
  Tensor w = back.get_tensor("w");
  Tensor orig = rand_tensor({3, 4}, 1);
  EXPECT_EQ(w.shape(), orig.shape());
  EXPECT_EQ(std::memcmp(w.data(), orig.data(), w.elems() * sizeof(float)), 0);
  EXPECT_EQ(back.meta["note"], "hello");
}

TEST(Container, QuantizedRoundTripKeepsPayloadAndScales) {
  Tensor x = rand_tensor({8, 4}, 2, Dist::Normal);
  QuantizedTensor q = quantize(x, QuantScheme(4, Granularity::PerGroup, 2));

  Container c;
  c.put_quantized("w", q);
  EXPECT_TRUE(c.has("w.scale"));
  Container back = Container::deserialize(c.serialize());
  QuantizedTensor rq = back.get_quantized("w");

  EXPECT_EQ(rq.scheme.bits, 4);
  EXPECT_EQ(rq.scheme.granularity, Granularity::PerGroup);
  EXPECT_EQ(rq.scheme.group_size, 2u);
  EXPECT_EQ(rq.payload, q.payload);
  EXPECT_EQ(rq.scales.scales, q.scales.scales);
  for (std::size_t i = 0; i < q.elems(); ++i) {
    EXPECT_EQ(rq.value_at(i), q.value_at(i));
  }
}

TEST(Container, SerializationIsInsertionOrderIndependent) {
  Tensor a = rand_tensor({2, 2}, 3), b = rand_tensor({4}, 4);
  Container c1, c2;
  c1.put_tensor("alpha", a);
  c1.put_tensor("beta", b);
  c2.put_tensor("beta", b);
  c2.put_tensor("alpha", a);
  EXPECT_EQ(c1.serialize(), c2.serialize());
}

TEST(Container, EnvelopeLayout) {
  Container c;
  c.put_tensor("t", Tensor({2}, {1.0f, 2.0f}));
  std::vector<std::uint8_t> blob = c.serialize();

  ASSERT_GE(blob.size(), 16u);
  EXPECT_EQ(std::memcmp(blob.data(), "LBQ1", 4), 0);
  std::uint32_t version = 0;
  std::memcpy(&version, blob.data() + 4, 4);
  EXPECT_EQ(version, kContainerVersion);
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, blob.data() + 8, 8);
  EXPECT_LT(16 + hlen, blob.size());
  // Data section starts 8-byte aligned.
  EXPECT_EQ(((16 + hlen + 7) / 8) * 8 + 8, blob.size());
}

TEST(Container, PayloadBytesMatchFormatArithmetic) {
  const std::size_t elems = 1024 * 1024;
  EXPECT_EQ(payload_bytes(DType::F32, elems), 4194304u);
  EXPECT_EQ(payload_bytes(DType::I8, elems), 1048576u);
  EXPECT_EQ(payload_bytes(DType::I4P, elems), 524288u);
  EXPECT_EQ(payload_bytes(DType::I4P, 5), 3u);
}

TEST(Container, RejectsBadMagic) {
  Container c;
  c.put_tensor("t", Tensor({1}, {1.0f}));
  std::vector<std::uint8_t> blob = c.serialize();
  blob[0] = 'X';
  EXPECT_THROW(Container::deserialize(blob), FormatError);
  EXPECT_THROW(Container::deserialize({1, 2, 3}), FormatError);
}

TEST(Container, RejectsUnsupportedVersion) {
  std::vector<std::uint8_t> blob =
      craft_blob(R"({"version":9,"entries":{},"meta":{}})", {}, 9);
  EXPECT_THROW(Container::deserialize(blob), FormatError);
}

TEST(Container, RejectsTruncatedHeaderAndPayload) {
  Container c;
  c.put_tensor("t", rand_tensor({16}, 5));
  std::vector<std::uint8_t> blob = c.serialize();

  std::vector<std::uint8_t> cut_header(blob.begin(), blob.begin() + 20);
  EXPECT_THROW(Container::deserialize(cut_header), FormatError);

  std::vector<std::uint8_t> cut_payload(blob.begin(), blob.end() - 8);
  EXPECT_THROW(Container::deserialize(cut_payload), FormatError);
}

TEST(Container, RejectsNonJsonHeader) {
  std::vector<std::uint8_t> blob = craft_blob("this is not json", {});
  EXPECT_THROW(Container::deserialize(blob), FormatError);
}

TEST(Container, RejectsMisalignedOffset) {
  std::vector<std::uint8_t> data(12, 0);
  const std::string header = std::string("{\"version\":1,\"entries\":{\"t\":") +
                             entry_json("f32", "[1]", 4, 4) + "},\"meta\":{}}";
  EXPECT_THROW(Container::deserialize(craft_blob(header, data)), FormatError);
}

TEST(Container, RejectsOverlappingPayloads) {
  std::vector<std::uint8_t> data(16, 0);
  const std::string header = std::string("{\"version\":1,\"entries\":{\"a\":") +
                             entry_json("f32", "[2]", 0, 8) + ",\"b\":" +
                             entry_json("f32", "[2]", 0, 8) + "},\"meta\":{}}";
  EXPECT_THROW(Container::deserialize(craft_blob(header, data)), FormatError);
}

TEST(Container, RejectsLengthDtypeMismatch) {
  std::vector<std::uint8_t> data(16, 0);
  const std::string header = std::string("{\"version\":1,\"entries\":{\"t\":") +
                             entry_json("f32", "[3]", 0, 8) + "},\"meta\":{}}";
  EXPECT_THROW(Container::deserialize(craft_blob(header, data)), FormatError);
}

TEST(Container, RejectsQuantizedEntryWithoutScales) {
  std::vector<std::uint8_t> data(8, 0);
  const std::string header = std::string("{\"version\":1,\"entries\":{\"q\":") +
                             entry_json("i8", "[8]", 0, 8) + "},\"meta\":{}}";
  EXPECT_THROW(Container::deserialize(craft_blob(header, data)), FormatError);

  Container c;
  QuantizedTensor q = quantize(Tensor({2}, {1.0f, 2.0f}),
                               QuantScheme(8, Granularity::PerTensor));
  c.put_quantized("q", q);
  c.entries.erase("q.scale");
  EXPECT_THROW(c.serialize(), FormatError);
}

TEST(Container, GetQuantizedChecksScaleCount) {
  Container c;
  QuantizedTensor q = quantize(rand_tensor({4, 4}, 6),
                               QuantScheme(8, Granularity::PerChannel));
  c.put_quantized("w", q);
  // Shrink the scale entry behind the payload's back.
  ContainerEntry& s = c.entries.at("w.scale");
  s.shape = {2};
  s.bytes.resize(8);
  EXPECT_THROW(c.get_quantized("w"), FormatError);
}

TEST(Container, MissingAndMistypedEntries) {
  Container c;
  c.put_tensor("t", Tensor({1}, {1.0f}));
  QuantizedTensor q = quantize(Tensor({2}, {1.0f, 2.0f}),
                               QuantScheme(8, Granularity::PerTensor));
  c.put_quantized("q", q);

  EXPECT_THROW(c.get_tensor("nope"), FormatError);
  EXPECT_THROW(c.get_tensor("q"), FormatError);
  EXPECT_THROW(c.get_quantized("t"), FormatError);
}

TEST(Container, FileRoundTrip) {
  Container c;
  c.put_tensor("t", rand_tensor({5, 5}, 7));
  const std::string path = ::testing::TempDir() + "container_round_trip.lbq";
  c.write(path);
  Container back = Container::read(path);
  EXPECT_EQ(back.serialize(), c.serialize());
  EXPECT_THROW(Container::read(path + ".does-not-exist"), FormatError);
}

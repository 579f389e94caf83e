// container.hpp - Binary checkpoint container.
//
// File layout:
//   bytes 0..3    magic "LBQ1"
//   bytes 4..7    u32 format version, little-endian
//   bytes 8..15   u64 header length in bytes, little-endian
//   ...           UTF-8 JSON header, then zero padding to an 8-byte boundary
//   ...           raw payloads, little-endian, in header-declared order
//
// The JSON header carries {"version", "entries", "meta"}. Each entry
// records dtype (f32 | i8 | i4p), shape, granularity tag, group_size,
// and its payload offset/length relative to the start of the data
// section. Offsets are 8-byte aligned and non-overlapping. Every i8/i4p
// entry is accompanied by a "<name>.scale" f32 entry.

#ifndef LBQ_CONTAINER_HPP
#define LBQ_CONTAINER_HPP

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "lbq/error.hpp"
#include "lbq/quant.hpp"
#include "lbq/tensor.hpp"

namespace lbq {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'L', 'B', 'Q', '1'};

enum class DType { F32, I8, I4P };

inline const char* dtype_name(DType d) {
  switch (d) {
    case DType::F32: return "f32";
    case DType::I8: return "i8";
    case DType::I4P: return "i4p";
  }
  return "?";
}

inline DType dtype_from_name(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "i8") return DType::I8;
  if (s == "i4p") return DType::I4P;
  throw FormatError("unknown dtype tag '" + s + "'");
}

inline std::size_t payload_bytes(DType d, std::size_t elems) {
  switch (d) {
    case DType::F32: return elems * 4;
    case DType::I8: return elems;
    case DType::I4P: return (elems + 1) / 2;
  }
  return 0;
}

struct ContainerEntry {
  DType dtype = DType::F32;
  std::vector<std::size_t> shape;
  std::optional<Granularity> granularity;  // quantized payloads only
  std::size_t group_size = 0;
  std::vector<std::uint8_t> bytes;

  std::size_t elems() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }
};

namespace detail {

inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32le(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::vector<std::uint8_t> floats_to_le(const float* data, std::size_t n) {
  std::vector<std::uint8_t> out;
  out.reserve(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    put_u32le(out, bits);
  }
  return out;
}

inline std::vector<float> le_to_floats(const std::uint8_t* p, std::size_t n) {
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = get_u32le(p + 4 * i);
    std::memcpy(&out[i], &bits, 4);
  }
  return out;
}

inline std::size_t align8(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

}  // namespace detail

// In-memory checkpoint: named entries plus free-form metadata. Entries
// are kept in a sorted map so serialization is deterministic.
class Container {
 public:
  std::uint32_t version = kContainerVersion;
  std::map<std::string, ContainerEntry> entries;
  nlohmann::json meta = nlohmann::json::object();

  bool has(const std::string& name) const { return entries.count(name) != 0; }

  void put_tensor(const std::string& name, const Tensor& t) {
    ContainerEntry e;
    e.dtype = DType::F32;
    e.shape = t.shape();
    e.bytes = detail::floats_to_le(t.data(), t.elems());
    entries[name] = std::move(e);
  }

  Tensor get_tensor(const std::string& name) const {
    const ContainerEntry& e = require(name);
    if (e.dtype != DType::F32) {
      throw FormatError("entry '" + name + "' is not f32");
    }
    return Tensor(e.shape, detail::le_to_floats(e.bytes.data(), e.elems()));
  }

  // Stores payload under `name` and scales under "<name>.scale".
  void put_quantized(const std::string& name, const QuantizedTensor& q) {
    ContainerEntry e;
    e.dtype = q.scheme.bits == 8 ? DType::I8 : DType::I4P;
    e.shape = q.shape;
    e.granularity = q.scheme.granularity;
    e.group_size = q.scheme.group_size;
    e.bytes = q.payload;
    entries[name] = std::move(e);

    ContainerEntry s;
    s.dtype = DType::F32;
    s.shape = scale_shape(q);
    s.bytes = detail::floats_to_le(q.scales.scales.data(), q.scales.scales.size());
    entries[name + ".scale"] = std::move(s);
  }

  QuantizedTensor get_quantized(const std::string& name) const {
    const ContainerEntry& e = require(name);
    if (e.dtype == DType::F32) {
      throw FormatError("entry '" + name + "' is not a quantized payload");
    }
    const ContainerEntry& s = require(name + ".scale");
    QuantizedTensor q;
    q.scheme = QuantScheme(e.dtype == DType::I8 ? 8 : 4,
                           e.granularity.value_or(Granularity::PerTensor),
                           e.group_size);
    q.shape = e.shape;
    q.payload = e.bytes;
    q.scales.granularity = q.scheme.granularity;
    q.scales.group_size = e.group_size;
    q.scales.scales = detail::le_to_floats(s.bytes.data(), s.elems());
    const std::size_t want =
        scale_count(q.scheme.granularity, q.rows(), q.cols(), q.scheme.group_size);
    if (q.scales.scales.size() != want) {
      throw FormatError("entry '" + name + "': scale count " +
                        std::to_string(q.scales.scales.size()) +
                        " does not match granularity (want " +
                        std::to_string(want) + ")");
    }
    return q;
  }

  void write(const std::string& path) const {
    std::vector<std::uint8_t> blob = serialize();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size()));
    if (!f) throw FormatError("short write to '" + path + "'");
  }

  static Container read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path + "'");
    std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    return deserialize(blob);
  }

  std::vector<std::uint8_t> serialize() const {
    // Lay out payloads in sorted-name order, each at an 8-byte boundary.
    nlohmann::json jentries = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto& [name, e] : entries) {
      if (e.bytes.size() != payload_bytes(e.dtype, e.elems())) {
        throw FormatError("entry '" + name + "': payload is " +
                          std::to_string(e.bytes.size()) + " bytes, dtype/shape say " +
                          std::to_string(payload_bytes(e.dtype, e.elems())));
      }
      if ((e.dtype == DType::I8 || e.dtype == DType::I4P) &&
          entries.count(name + ".scale") == 0) {
        throw FormatError("entry '" + name + "' lacks a companion scale entry");
      }
      offset = detail::align8(offset);
      nlohmann::json je;
      je["dtype"] = dtype_name(e.dtype);
      je["shape"] = e.shape;
      je["granularity"] =
          e.granularity ? granularity_name(*e.granularity) : "none";
      je["group_size"] = e.group_size;
      je["offset"] = offset;
      je["length"] = e.bytes.size();
      jentries[name] = std::move(je);
      offset += e.bytes.size();
    }

    nlohmann::json header;
    header["version"] = version;
    header["entries"] = std::move(jentries);
    header["meta"] = meta;
    const std::string htext = header.dump();

    std::vector<std::uint8_t> out;
    out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
    detail::put_u32le(out, version);
    detail::put_u64le(out, htext.size());
    out.insert(out.end(), htext.begin(), htext.end());
    while (out.size() % 8 != 0) out.push_back(0);

    const std::size_t data_start = out.size();
    out.resize(data_start + detail::align8(offset), 0);
    std::size_t pos = 0;
    for (const auto& [name, e] : entries) {
      (void)name;
      pos = detail::align8(pos);
      std::memcpy(out.data() + data_start + pos, e.bytes.data(), e.bytes.size());
      pos += e.bytes.size();
    }
    return out;
  }

  static Container deserialize(const std::vector<std::uint8_t>& blob) {
    if (blob.size() < 16 || std::memcmp(blob.data(), kContainerMagic, 4) != 0) {
      throw FormatError("bad magic: not an LBQ1 container");
    }
    Container c;
    c.version = detail::get_u32le(blob.data() + 4);
    if (c.version != kContainerVersion) {
      throw FormatError("unsupported container version " +
                        std::to_string(c.version));
    }
    const std::uint64_t hlen = detail::get_u64le(blob.data() + 8);
    if (16 + hlen > blob.size()) throw FormatError("truncated header");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(blob.begin() + 16,
                                     blob.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.contains("entries") || !header["entries"].is_object()) {
      throw FormatError("header lacks an entries object");
    }
    if (header.contains("meta")) c.meta = header["meta"];

    const std::size_t data_start = detail::align8(16 + hlen);
    const std::size_t data_len = blob.size() - data_start;

    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& [name, je] : header["entries"].items()) {
      ContainerEntry e;
      try {
        e.dtype = dtype_from_name(je.at("dtype").get<std::string>());
        e.shape = je.at("shape").get<std::vector<std::size_t>>();
        const std::string g = je.at("granularity").get<std::string>();
        if (g != "none") e.granularity = granularity_from_name(g);
        e.group_size = je.at("group_size").get<std::size_t>();
        const std::size_t offset = je.at("offset").get<std::size_t>();
        const std::size_t length = je.at("length").get<std::size_t>();
        if (offset % 8 != 0) {
          throw FormatError("entry '" + name + "': offset not 8-byte aligned");
        }
        if (offset + length > data_len) {
          throw FormatError("entry '" + name + "': payload extends past end of file");
        }
        if (length != payload_bytes(e.dtype, e.elems())) {
          throw FormatError("entry '" + name + "': length does not match dtype/shape");
        }
        spans.emplace_back(offset, length);
        e.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(data_start + offset),
                       blob.begin() + static_cast<std::ptrdiff_t>(data_start + offset + length));
      } catch (const nlohmann::json::exception& ex) {
        throw FormatError("entry '" + name + "': malformed header record: " + ex.what());
      }
      c.entries[name] = std::move(e);
    }

    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
      if (spans[i].first < spans[i - 1].first + spans[i - 1].second) {
        throw FormatError("overlapping payload offsets in header");
      }
    }
    for (const auto& [name, e] : c.entries) {
      if ((e.dtype == DType::I8 || e.dtype == DType::I4P) &&
          c.entries.count(name + ".scale") == 0) {
        throw FormatError("entry '" + name + "' lacks a companion scale entry");
      }
    }
    return c;
  }

 private:
  static Granularity granularity_from_name(const std::string& s) {
    if (s == "per_tensor") return Granularity::PerTensor;
    if (s == "per_channel") return Granularity::PerChannel;
    if (s == "per_token") return Granularity::PerToken;
    if (s == "per_group") return Granularity::PerGroup;
    throw FormatError("unknown granularity tag '" + s + "'");
  }

  static std::vector<std::size_t> scale_shape(const QuantizedTensor& q) {
    switch (q.scheme.granularity) {
      case Granularity::PerTensor: return {1};
      case Granularity::PerChannel: return {q.cols()};
      case Granularity::PerToken: return {q.rows()};
      case Granularity::PerGroup:
        return {q.rows() / q.scheme.group_size, q.cols()};
    }
    return {q.scales.scales.size()};
  }

  const ContainerEntry& require(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw FormatError("container has no entry '" + name + "'");
    }
    return it->second;
  }
};

}  // namespace lbq

#endif  // LBQ_CONTAINER_HPP

#include "lbq/qgemm.hpp"

#include <cstdint>
#include <cstring>
#include <vector>

#include <gtest/gtest.h>

#include "lbq/instrumentation.hpp"
#include "lbq/quant.hpp"
#include "lbq/tensor.hpp"
#include "lbq/transforms.hpp"

using namespace lbq;

namespace {

QuantizedTensor make_i8(std::vector<std::size_t> shape,
                        const std::vector<std::int8_t>& vals, Granularity g,
                        std::vector<float> scales) {
  QuantizedTensor q;
  q.scheme = QuantScheme(8, g);
  q.shape = std::move(shape);
  q.payload.assign(vals.begin(), vals.end());
  q.scales.granularity = g;
  q.scales.scales = std::move(scales);
  return q;
}

QuantizedTensor make_i4(std::vector<std::size_t> shape,
                        const std::vector<std::int8_t>& vals, Granularity g,
                        std::vector<float> scales, std::size_t group = 0) {
  QuantizedTensor q;
  q.scheme = QuantScheme(4, g, group);
  q.shape = std::move(shape);
  q.payload = pack_int4(vals);
  q.scales.granularity = g;
  q.scales.group_size = group;
  q.scales.scales = std::move(scales);
  return q;
}

void expect_bit_equal(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape(), b.shape());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.elems() * sizeof(float)), 0);
}

}  // namespace

TEST(GemmW8A8, HandValue) {
  QuantizedTensor a = make_i8({1, 2}, {1, 2}, Granularity::PerToken, {0.5f});
  QuantizedTensor w = make_i8({2, 1}, {3, 4}, Granularity::PerChannel, {0.25f});
  Tensor y = gemm_w8a8_ref(a, w);
  ASSERT_EQ(y.rows(), 1u);
  ASSERT_EQ(y.cols(), 1u);
  EXPECT_FLOAT_EQ(y.at(0, 0), 11.0f * 0.5f * 0.25f);
  expect_bit_equal(gemm_w8a8_opt(a, w), y);
}

TEST(GemmW4A8, HandValuePackedNibbles) {
  QuantizedTensor a = make_i8({1, 2}, {1, 1}, Granularity::PerToken, {1.0f});
  QuantizedTensor w =
      make_i4({2, 1}, {-8, 7}, Granularity::PerChannel, {1.0f});
  ASSERT_EQ(w.payload.size(), 1u);
  ASSERT_EQ(w.payload[0], 0x78);
  Tensor y = gemm_w4a8_ref(a, w);
  EXPECT_FLOAT_EQ(y.at(0, 0), -1.0f);
}

TEST(GemmW4A8, HandValuePerGroupSegments) {
  QuantizedTensor a =
      make_i8({1, 4}, {1, 2, 3, 4}, Granularity::PerToken, {0.5f});
  QuantizedTensor w = make_i4({4, 1}, {1, 1, 1, 1}, Granularity::PerGroup,
                              {1.0f, 2.0f}, 2);
  Tensor y = gemm_w4a8_ref(a, w);
  // Segments dequantize separately: (1+2)*1 + (3+4)*2 = 17, then * 0.5.
  EXPECT_FLOAT_EQ(y.at(0, 0), 8.5f);
}

TEST(GemmKernels, MatchDequantizedOracle) {
  struct Shape { std::size_t m, n, k; };
  for (Shape s : {Shape{8, 8, 8}, Shape{64, 64, 64}, Shape{33, 17, 65}}) {
    Tensor x = rand_tensor({s.m, s.k}, s.m * 100 + s.k, Dist::Normal);
    Tensor w = rand_tensor({s.k, s.n}, s.n * 100 + s.k, Dist::Normal);
    QuantizedTensor aq = quantize(x, QuantScheme(8, Granularity::PerToken));
    QuantizedTensor w8 = quantize(w, QuantScheme(8, Granularity::PerChannel));
    QuantizedTensor w4 = quantize(w, QuantScheme(4, Granularity::PerChannel));

    Tensor oracle8 = matmul_ref(dequantize(aq), dequantize(w8));
    Tensor oracle4 = matmul_ref(dequantize(aq), dequantize(w4));
    EXPECT_LE(rel_frobenius_error(gemm_w8a8_ref(aq, w8), oracle8), 1e-6)
        << s.m << "x" << s.n << "x" << s.k;
    EXPECT_LE(rel_frobenius_error(gemm_w4a8_ref(aq, w4), oracle4), 1e-6)
        << s.m << "x" << s.n << "x" << s.k;
  }
}

TEST(GemmKernels, PerGroupMatchesDequantizedOracle) {
  Tensor x = rand_tensor({12, 64}, 51, Dist::Normal);
  Tensor w = rand_tensor({64, 24}, 52, Dist::Normal);
  QuantizedTensor aq = quantize(x, QuantScheme(8, Granularity::PerToken));
  QuantizedTensor wq = quantize(w, QuantScheme(4, Granularity::PerGroup, 16));
  Tensor oracle = matmul_ref(dequantize(aq), dequantize(wq));
  EXPECT_LE(rel_frobenius_error(gemm_w4a8_ref(aq, wq), oracle), 1e-5);
}

TEST(GemmKernels, OptimizedKernelIsBitIdentical) {
  struct Shape { std::size_t m, n, k; };
  for (Shape s : {Shape{8, 8, 8}, Shape{33, 17, 65}, Shape{256, 256, 256}}) {
    Tensor x = rand_tensor({s.m, s.k}, s.k + 1, Dist::Normal);
    Tensor w = rand_tensor({s.k, s.n}, s.k + 2, Dist::Normal);
    QuantizedTensor aq = quantize(x, QuantScheme(8, Granularity::PerToken));
    QuantizedTensor wq = quantize(w, QuantScheme(8, Granularity::PerChannel));
    expect_bit_equal(gemm_w8a8_opt(aq, wq), gemm_w8a8_ref(aq, wq));
  }
}

TEST(GemmKernels, AccumulationBoundIsEnforcedAndSufficient) {
  // Worst case at the bound: every product is (-128)*(-128) = 16384.
  const std::size_t k = kMaxAccumK;
  QuantizedTensor a = make_i8({1, k}, std::vector<std::int8_t>(k, -128),
                              Granularity::PerToken, {1.0f});
  QuantizedTensor w = make_i8({k, 1}, std::vector<std::int8_t>(k, -128),
                              Granularity::PerChannel, {1.0f});
  Tensor y = gemm_w8a8_opt(a, w);
  EXPECT_EQ(y.at(0, 0), 2147467264.0f);  // 16384 * 131071, exact in FP32

  QuantizedTensor a2 = make_i8({1, k + 1}, std::vector<std::int8_t>(k + 1, 0),
                               Granularity::PerToken, {1.0f});
  QuantizedTensor w2 = make_i8({k + 1, 1}, std::vector<std::int8_t>(k + 1, 0),
                               Granularity::PerChannel, {1.0f});
  EXPECT_THROW(gemm_w8a8_ref(a2, w2), ConfigError);
  EXPECT_THROW(gemm_w8a8_opt(a2, w2), ConfigError);
}

TEST(GemmKernels, RejectsMalformedOperands) {
  QuantizedTensor a = make_i8({2, 4}, std::vector<std::int8_t>(8, 1),
                              Granularity::PerToken, {1.0f, 1.0f});
  QuantizedTensor w = make_i8({4, 3}, std::vector<std::int8_t>(12, 1),
                              Granularity::PerChannel, {1.0f, 1.0f, 1.0f});

  QuantizedTensor w_short = make_i8({3, 3}, std::vector<std::int8_t>(9, 1),
                                    Granularity::PerChannel,
                                    {1.0f, 1.0f, 1.0f});
  EXPECT_THROW(gemm_w8a8_ref(a, w_short), DimError);

  QuantizedTensor a_1d =
      make_i8({4}, std::vector<std::int8_t>(4, 1), Granularity::PerToken, {1.0f});
  EXPECT_THROW(gemm_w8a8_ref(a_1d, w), DimError);

  QuantizedTensor a_pt = make_i8({2, 4}, std::vector<std::int8_t>(8, 1),
                                 Granularity::PerTensor, {1.0f});
  EXPECT_THROW(gemm_w8a8_ref(a_pt, w), ConfigError);

  QuantizedTensor w4 = make_i4({4, 3}, std::vector<std::int8_t>(12, 1),
                               Granularity::PerChannel, {1.0f, 1.0f, 1.0f});
  EXPECT_THROW(gemm_w8a8_ref(a, w4), ConfigError);
  EXPECT_THROW(gemm_w4a8_ref(a, w), ConfigError);

  QuantizedTensor w_pt = make_i8({4, 3}, std::vector<std::int8_t>(12, 1),
                                 Granularity::PerTensor, {1.0f});
  EXPECT_THROW(gemm_w8a8_ref(a, w_pt), ConfigError);

  QuantizedTensor w4_bad_group =
      make_i4({4, 3}, std::vector<std::int8_t>(12, 1), Granularity::PerGroup,
              {1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f}, 3);
  EXPECT_THROW(gemm_w4a8_ref(a, w4_bad_group), ConfigError);
}

TEST(QLinear, TransformOnlyMatchesPlainMatmul) {
  Tensor x = rand_tensor({4, 16}, 61, Dist::Normal);
  Tensor w = rand_tensor({16, 8}, 62, Dist::Normal);
  QLinearLayer layer;
  layer.weight = w;
  expect_bit_equal(qlinear_forward(layer, x), matmul_ref(x, w));
}

TEST(QLinear, AppliesSmoothingAndRotationToActivations) {
  Tensor x = rand_tensor({4, 16}, 63, Dist::Normal);
  Tensor w = rand_tensor({16, 8}, 64, Dist::Normal);
  SmoothingVector sv;
  sv.s.assign(16, 1.0f);
  for (std::size_t j = 0; j < 16; ++j) sv.s[j] = 0.5f + 0.1f * j;

  QLinearLayer layer;
  layer.weight = w;
  layer.smoothing = sv;
  layer.hadamard = true;

  Tensor xs({4, 16});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 16; ++j) xs.at(i, j) = x.at(i, j) / sv.s[j];
  Tensor expected = matmul_ref(rotate_rows(xs, hadamard_matrix(16)), w);
  expect_bit_equal(qlinear_forward(layer, x), expected);
}

TEST(QLinear, QuantizedPathComposesQuantizeAndKernel) {
  Tensor x = rand_tensor({6, 32}, 65, Dist::Normal);
  Tensor w = rand_tensor({32, 12}, 66, Dist::Normal);

  QLinearLayer l8;
  l8.weight = quantize(w, QuantScheme(8, Granularity::PerChannel));
  Tensor expected8 = gemm_w8a8_opt(quantize(x, QuantScheme(8, Granularity::PerToken)),
                                   std::get<QuantizedTensor>(l8.weight));
  expect_bit_equal(qlinear_forward(l8, x), expected8);

  QLinearLayer l4;
  l4.weight = quantize(w, QuantScheme(4, Granularity::PerGroup, 8));
  Tensor expected4 = gemm_w4a8_ref(quantize(x, QuantScheme(8, Granularity::PerToken)),
                                   std::get<QuantizedTensor>(l4.weight));
  expect_bit_equal(qlinear_forward(l4, x), expected4);
}

TEST(QLinear, StaticActivationScale) {
  Tensor x = rand_tensor({3, 8}, 67, Dist::Normal);
  Tensor w = rand_tensor({8, 4}, 68, Dist::Normal);
  QLinearLayer layer;
  layer.weight = quantize(w, QuantScheme(8, Granularity::PerChannel));
  layer.act_quant = ActQuant::PerTensorStatic;
  EXPECT_THROW(qlinear_forward(layer, x), ConfigError);  // scale unset

  layer.act_scale = 0.05f;
  ScaleSet ss;
  ss.granularity = Granularity::PerToken;
  ss.scales.assign(3, 0.05f);
  Tensor expected = gemm_w8a8_opt(
      quantize(x, ss, QuantScheme(8, Granularity::PerToken)),
      std::get<QuantizedTensor>(layer.weight));
  expect_bit_equal(qlinear_forward(layer, x), expected);
}

TEST(QLinear, BiasIsAddedInFp32) {
  Tensor x = rand_tensor({3, 8}, 69, Dist::Normal);
  Tensor w = rand_tensor({8, 4}, 70, Dist::Normal);
  Tensor b({4}, {0.5f, -1.0f, 2.0f, 0.0f});

  QLinearLayer layer;
  layer.weight = quantize(w, QuantScheme(8, Granularity::PerChannel));
  Tensor base = qlinear_forward(layer, x);
  layer.bias = b;
  Tensor y = qlinear_forward(layer, x);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j)
      EXPECT_FLOAT_EQ(y.at(i, j), base.at(i, j) + b[j]);
}

TEST(QLinear, RejectsInconsistentConfigs) {
  Tensor x = rand_tensor({3, 8}, 71, Dist::Normal);
  QLinearLayer layer;
  layer.weight = quantize(rand_tensor({8, 4}, 72),
                          QuantScheme(8, Granularity::PerChannel));

  EXPECT_THROW(qlinear_forward(layer, rand_tensor({3, 7}, 73)), DimError);

  layer.smoothing = SmoothingVector{0.5f, {1.0f, 1.0f}};
  EXPECT_THROW(qlinear_forward(layer, x), ConfigError);
  layer.smoothing.reset();

  layer.bias = Tensor({3}, {1.0f, 2.0f, 3.0f});
  EXPECT_THROW(qlinear_forward(layer, x), ConfigError);
}

TEST(QLinear, QuantizedForwardNeverDequantizesAndBoundsScratch) {
  const std::size_t m = 16, k = 64, n = 48;
  Tensor x = rand_tensor({m, k}, 74, Dist::Normal);
  Tensor w = rand_tensor({k, n}, 75, Dist::Normal);

  QLinearLayer layer;
  layer.weight = quantize(w, QuantScheme(4, Granularity::PerGroup, 16));
  SmoothingVector sv;
  sv.s.assign(k, 1.25f);
  layer.smoothing = sv;
  layer.hadamard = true;

  instr::reset();
  Tensor y = qlinear_forward(layer, x);
  EXPECT_EQ(instr::dequant_calls, 0);
  EXPECT_GE(instr::fp32_scratch_peak, static_cast<std::int64_t>(m * k));
  EXPECT_LE(instr::fp32_scratch_peak, static_cast<std::int64_t>(m * k + m * n + m));
  EXPECT_EQ(instr::fp32_scratch_current, 0);
  EXPECT_EQ(y.rows(), m);
  EXPECT_EQ(y.cols(), n);
}

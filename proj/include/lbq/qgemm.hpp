// qgemm.hpp - Quantized GEMM kernels and the quantized linear layer.
//
// Kernels take activations quantized to i8 with per-token (row) scales
// and weights in their packed storage format: i8 with per-channel
// (column) scales, or packed i4 with per-channel or per-group scales.
// Accumulation is exact 32-bit integer arithmetic; the dequant epilogue
// multiplies (i32 -> FP32) * sa[row] * sw[col] in FP32. Weights are
// never expanded to an FP32 matrix anywhere in this path.

#ifndef LBQ_QGEMM_HPP
#define LBQ_QGEMM_HPP

#include <cstdint>
#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "lbq/error.hpp"
#include "lbq/instrumentation.hpp"
#include "lbq/quant.hpp"
#include "lbq/tensor.hpp"
#include "lbq/transforms.hpp"

namespace lbq {

// Largest K for which i8 x i8 products summed in i32 cannot overflow:
// |product| <= 128*128 = 16384 and 16384 * 131071 < 2^31.
inline constexpr std::size_t kMaxAccumK = 131071;

namespace detail {

inline void check_gemm_operands(const QuantizedTensor& aq,
                                const QuantizedTensor& wq, int weight_bits) {
  if (aq.shape.size() != 2 || wq.shape.size() != 2) {
    throw DimError("quantized gemm requires 2-D operands");
  }
  if (aq.cols() != wq.rows()) {
    throw DimError("quantized gemm inner dims disagree: " +
                   std::to_string(aq.cols()) + " vs " +
                   std::to_string(wq.rows()));
  }
  if (aq.cols() > kMaxAccumK) {
    throw ConfigError("K = " + std::to_string(aq.cols()) +
                      " exceeds the i32 overflow-free bound " +
                      std::to_string(kMaxAccumK));
  }
  if (aq.scheme.bits != 8 || aq.scheme.granularity != Granularity::PerToken) {
    throw ConfigError("activations must be i8 with per-token scales");
  }
  if (wq.scheme.bits != weight_bits) {
    throw ConfigError("weight bit-width mismatch: expected " +
                      std::to_string(weight_bits) + ", got " +
                      std::to_string(wq.scheme.bits));
  }
  if (weight_bits == 8 && wq.scheme.granularity != Granularity::PerChannel) {
    throw ConfigError("w8a8 weights must carry per-channel scales");
  }
  if (weight_bits == 4 && wq.scheme.granularity != Granularity::PerChannel &&
      wq.scheme.granularity != Granularity::PerGroup) {
    throw ConfigError("w4a8 weights must carry per-channel or per-group scales");
  }
  if (wq.scheme.granularity == Granularity::PerGroup &&
      (wq.scheme.group_size == 0 || wq.rows() % wq.scheme.group_size != 0)) {
    throw ConfigError("w4a8 group_size " + std::to_string(wq.scheme.group_size) +
                      " does not divide K = " + std::to_string(wq.rows()));
  }
}

}  // namespace detail

// Reference W8A8 kernel: plain loops, exact i32 accumulation, FP32
// epilogue y = float(acc) * sa[i] * sw[j].
inline Tensor gemm_w8a8_ref(const QuantizedTensor& aq,
                            const QuantizedTensor& wq) {
  detail::check_gemm_operands(aq, wq, 8);
  const std::size_t m = aq.rows(), k = aq.cols(), n = wq.cols();
  const std::int8_t* a = aq.i8_data();
  const std::int8_t* w = wq.i8_data();
  const float* sa = aq.scales.scales.data();
  const float* sw = wq.scales.scales.data();

  instr::ScratchGuard out_guard(static_cast<std::int64_t>(m * n));
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      std::int32_t acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += static_cast<std::int32_t>(a[i * k + p]) *
               static_cast<std::int32_t>(w[p * n + j]);
      }
      y.at(i, j) = static_cast<float>(acc) * sa[i] * sw[j];
    }
  }
  return y;
}

// Optimized W8A8 kernel: i-k-j loop order with a row of i32 accumulators
// so the inner loop streams both operands contiguously. Integer addition
// is associative, so the accumulators are bit-identical to the reference;
// the epilogue is the same expression, hence bit-identical output.
inline Tensor gemm_w8a8_opt(const QuantizedTensor& aq,
                            const QuantizedTensor& wq) {
  detail::check_gemm_operands(aq, wq, 8);
  const std::size_t m = aq.rows(), k = aq.cols(), n = wq.cols();
  const std::int8_t* a = aq.i8_data();
  const std::int8_t* w = wq.i8_data();
  const float* sa = aq.scales.scales.data();
  const float* sw = wq.scales.scales.data();

  instr::ScratchGuard out_guard(static_cast<std::int64_t>(m * n));
  Tensor y({m, n});
  std::vector<std::int32_t> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0);
    for (std::size_t p = 0; p < k; ++p) {
      const std::int32_t av = a[i * k + p];
      if (av == 0) continue;
      const std::int8_t* wrow = w + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        acc[j] += av * static_cast<std::int32_t>(wrow[j]);
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      y.at(i, j) = static_cast<float>(acc[j]) * sa[i] * sw[j];
    }
  }
  return y;
}

// W4A8 kernel: nibbles are sign-extended on the fly; accumulation runs
// per group segment in i32 and segments are dequantized and summed in
// FP32 in ascending group order. Per-channel weights are the one-segment
// case.
inline Tensor gemm_w4a8_ref(const QuantizedTensor& aq,
                            const QuantizedTensor& wq) {
  detail::check_gemm_operands(aq, wq, 4);
  const std::size_t m = aq.rows(), k = aq.cols(), n = wq.cols();
  const std::int8_t* a = aq.i8_data();
  const std::uint8_t* wp = wq.packed_data();
  const float* sa = aq.scales.scales.data();
  const float* sw = wq.scales.scales.data();
  const std::size_t group =
      wq.scheme.granularity == Granularity::PerGroup ? wq.scheme.group_size : k;
  const std::size_t n_groups = k / group;

  instr::ScratchGuard out_guard(static_cast<std::int64_t>(m * n));
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float sum = 0.0f;
      for (std::size_t t = 0; t < n_groups; ++t) {
        std::int32_t acc = 0;
        for (std::size_t p = t * group; p < (t + 1) * group; ++p) {
          const std::size_t flat = p * n + j;
          const int nib = (flat & 1) ? (wp[flat >> 1] >> 4) : (wp[flat >> 1] & 0x0F);
          const std::int32_t wv = nib >= 8 ? nib - 16 : nib;
          acc += static_cast<std::int32_t>(a[i * k + p]) * wv;
        }
        const float sc = wq.scheme.granularity == Granularity::PerGroup
                             ? sw[t * n + j]
                             : sw[j];
        sum += static_cast<float>(acc) * sc;
      }
      y.at(i, j) = sum * sa[i];
    }
  }
  return y;
}

// How activations are quantized inside qlinear_forward.
enum class ActQuant { PerTokenDynamic, PerTensorStatic };

// A linear layer whose weight stays in packed low-bit storage from load
// to kernel. The FP32 Tensor alternative is the transform-only mode used
// to validate that smoothing/rotation replayed at forward time match the
// full-precision path.
struct QLinearLayer {
  std::variant<QuantizedTensor, Tensor> weight;
  std::optional<SmoothingVector> smoothing;  // activation-side division
  bool hadamard = false;                     // activation-side rotation tag
  ActQuant act_quant = ActQuant::PerTokenDynamic;
  float act_scale = 0.0f;  // PerTensorStatic only
  std::optional<Tensor> bias;

  std::size_t in_features() const {
    if (const auto* q = std::get_if<QuantizedTensor>(&weight)) return q->rows();
    return std::get<Tensor>(weight).rows();
  }
  std::size_t out_features() const {
    if (const auto* q = std::get_if<QuantizedTensor>(&weight)) return q->cols();
    return std::get<Tensor>(weight).cols();
  }
  bool is_quantized() const {
    return std::holds_alternative<QuantizedTensor>(weight);
  }
};

namespace detail {

// In-place rowwise x -> x H over the block structure for dim = cols.
inline void hadamard_rows_inplace(Tensor& x) {
  const std::size_t dim = x.cols();
  const std::size_t bs = largest_pow2_divisor(dim);
  if (bs == 1) return;
  const double norm = 1.0 / std::sqrt(static_cast<double>(bs));
  std::vector<double> buf(bs);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t b = 0; b < dim / bs; ++b) {
      for (std::size_t i = 0; i < bs; ++i)
        buf[i] = static_cast<double>(x.at(r, b * bs + i));
      fwht_pow2(buf.data(), bs);
      for (std::size_t i = 0; i < bs; ++i)
        x.at(r, b * bs + i) = static_cast<float>(buf[i] * norm);
    }
  }
}

}  // namespace detail

// Full quantized linear forward: activation-side smoothing division,
// activation-side rotation, dynamic per-token (or static per-tensor)
// activation quantization, the matching kernel, FP32 bias.
inline Tensor qlinear_forward(const QLinearLayer& layer, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != layer.in_features()) {
    throw DimError("qlinear_forward: input cols " + std::to_string(x.cols()) +
                   " != layer in_features " +
                   std::to_string(layer.in_features()));
  }
  if (layer.smoothing && layer.smoothing->s.size() != layer.in_features()) {
    throw ConfigError("qlinear_forward: smoothing vector length mismatch");
  }
  if (layer.bias && layer.bias->elems() != layer.out_features()) {
    throw ConfigError("qlinear_forward: bias length mismatch");
  }
  const std::size_t m = x.rows(), k = x.cols(), n = layer.out_features();

  // One transient activation block; transforms run in place.
  instr::ScratchGuard act_guard(static_cast<std::int64_t>(m * k));
  Tensor xw = x;
  if (layer.smoothing) {
    const std::vector<float>& s = layer.smoothing->s;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) xw.at(i, j) /= s[j];
  }
  if (layer.hadamard) {
    detail::hadamard_rows_inplace(xw);
  }

  Tensor y;
  if (layer.is_quantized()) {
    const QuantizedTensor& wq = std::get<QuantizedTensor>(layer.weight);
    instr::ScratchGuard scale_guard(static_cast<std::int64_t>(m));
    QuantizedTensor aq;
    if (layer.act_quant == ActQuant::PerTokenDynamic) {
      QuantScheme ascheme(8, Granularity::PerToken);
      aq = quantize(xw, ascheme);
    } else {
      if (!(layer.act_scale > 0.0f)) {
        throw ConfigError("qlinear_forward: static activation scale not set");
      }
      QuantScheme ascheme(8, Granularity::PerToken);
      ScaleSet ss;
      ss.granularity = Granularity::PerToken;
      ss.scales.assign(m, layer.act_scale);
      aq = quantize(xw, ss, ascheme);
    }
    y = wq.scheme.bits == 8 ? gemm_w8a8_opt(aq, wq) : gemm_w4a8_ref(aq, wq);
  } else {
    instr::ScratchGuard out_guard(static_cast<std::int64_t>(m * n));
    y = matmul_ref(xw, std::get<Tensor>(layer.weight));
  }

  if (layer.bias) {
    const float* b = layer.bias->data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y.at(i, j) += b[j];
  }
  return y;
}

}  // namespace lbq

#endif  // LBQ_QGEMM_HPP

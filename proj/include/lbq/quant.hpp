// quant.hpp - Symmetric low-bit quantization.
//
// Scale rule: s = 2*max(|x|) / (2^n - 1) per granularity region, then
// x_bar = clamp(round(x/s), -2^(n-1), 2^(n-1)-1). Rounding is
// half-away-from-zero. Note the scale rule maps +max to (2^n-1)/2, which
// rounds up and clamps, costing up to s/2 on the single largest positive
// element; see README for the alternative convention and why this one is
// kept.
//
// Granularity regions over a row-major [R x C] tensor:
//   per-tensor   one scale for everything
//   per-channel  one scale per column (weight output channel)
//   per-token    one scale per row (activation token)
//   per-group    one scale per contiguous run of group_size rows within a
//                column; scales laid out row-major as [R/group_size, C]
// 1-D tensors are treated as a single row [1 x C].

#ifndef LBQ_QUANT_HPP
#define LBQ_QUANT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lbq/error.hpp"
#include "lbq/instrumentation.hpp"
#include "lbq/tensor.hpp"

namespace lbq {

enum class Granularity { PerTensor, PerChannel, PerToken, PerGroup };

inline const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::PerTensor: return "per_tensor";
    case Granularity::PerChannel: return "per_channel";
    case Granularity::PerToken: return "per_token";
    case Granularity::PerGroup: return "per_group";
  }
  return "?";
}

// Smallest admissible scale; all-zero regions get this so division is
// always defined while the region still quantizes to exact zeros.
inline constexpr float kScaleFloor = 1e-10f;

struct QuantScheme {
  int bits = 8;  // 4 or 8
  Granularity granularity = Granularity::PerTensor;
  std::size_t group_size = 0;  // PerGroup only

  QuantScheme() = default;
  QuantScheme(int n, Granularity g, std::size_t group = 0)
      : bits(n), granularity(g), group_size(group) {
    if (n != 4 && n != 8) {
      throw ConfigError("bit-width must be 4 or 8, got " + std::to_string(n));
    }
    if (g == Granularity::PerGroup && group == 0) {
      throw ConfigError("per-group scheme requires a positive group_size");
    }
    if (g != Granularity::PerGroup && group != 0) {
      throw ConfigError("group_size is only meaningful for per-group schemes");
    }
  }

  int qmin() const { return -(1 << (bits - 1)); }      // -8 or -128
  int qmax() const { return (1 << (bits - 1)) - 1; }   //  7 or  127
  int levels() const { return (1 << bits) - 1; }       // 15 or 255
};

namespace detail {

inline std::size_t group_count(std::size_t rows, std::size_t group,
                               const char* what) {
  if (group == 0 || rows % group != 0) {
    throw ConfigError(std::string(what) + ": group_size " +
                      std::to_string(group) + " does not divide axis length " +
                      std::to_string(rows));
  }
  return rows / group;
}

}  // namespace detail

inline std::size_t scale_count(Granularity g, std::size_t rows,
                               std::size_t cols, std::size_t group = 0) {
  switch (g) {
    case Granularity::PerTensor: return 1;
    case Granularity::PerChannel: return cols;
    case Granularity::PerToken: return rows;
    case Granularity::PerGroup:
      return detail::group_count(rows, group, "scale_count") * cols;
  }
  return 0;
}

inline std::size_t scale_index(Granularity g, std::size_t cols,
                               std::size_t group, std::size_t r,
                               std::size_t c) {
  switch (g) {
    case Granularity::PerTensor: return 0;
    case Granularity::PerChannel: return c;
    case Granularity::PerToken: return r;
    case Granularity::PerGroup: return (r / group) * cols + c;
  }
  return 0;
}

// Per-region scale factors. Every scale is strictly positive.
struct ScaleSet {
  Granularity granularity = Granularity::PerTensor;
  std::size_t group_size = 0;
  std::vector<float> scales;

  float scale_at(std::size_t cols, std::size_t r, std::size_t c) const {
    return scales[scale_index(granularity, cols, group_size, r, c)];
  }
};

// Integer payload plus the scales needed to reconstruct it. For bits=4
// the payload packs two values per byte, element 2k in the low nibble,
// 2k+1 in the high nibble, two's complement within each nibble.
struct QuantizedTensor {
  QuantScheme scheme;
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> payload;
  ScaleSet scales;

  std::size_t elems() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const {
    return shape.size() == 2 ? shape[1] : (shape.empty() ? 0 : shape[0]);
  }

  const std::int8_t* i8_data() const {
    return reinterpret_cast<const std::int8_t*>(payload.data());
  }
  const std::uint8_t* packed_data() const { return payload.data(); }

  // Sign-extended value of flat element i, either width.
  int value_at(std::size_t i) const {
    if (scheme.bits == 8) return i8_data()[i];
    std::uint8_t byte = payload[i >> 1];
    int nib = (i & 1) ? (byte >> 4) : (byte & 0x0F);
    return nib >= 8 ? nib - 16 : nib;
  }
};

// --- int4 nibble packing -------------------------------------------------

inline std::vector<std::uint8_t> pack_int4(const std::vector<std::int8_t>& values) {
  for (std::int8_t v : values) {
    if (v < -8 || v > 7) {
      throw RangeError("pack_int4 value " + std::to_string(int(v)) +
                       " outside [-8, 7]");
    }
  }
  std::vector<std::uint8_t> out((values.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint8_t nib = static_cast<std::uint8_t>(values[i]) & 0x0F;
    if (i & 1) {
      out[i >> 1] |= static_cast<std::uint8_t>(nib << 4);
    } else {
      out[i >> 1] |= nib;  // odd tail leaves the high nibble zero
    }
  }
  return out;
}

inline std::vector<std::int8_t> unpack_int4(const std::vector<std::uint8_t>& bytes,
                                            std::size_t count) {
  if (bytes.size() < (count + 1) / 2) {
    throw RangeError("unpack_int4: " + std::to_string(bytes.size()) +
                     " bytes cannot hold " + std::to_string(count) + " values");
  }
  std::vector<std::int8_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    int nib = (i & 1) ? (bytes[i >> 1] >> 4) : (bytes[i >> 1] & 0x0F);
    out[i] = static_cast<std::int8_t>(nib >= 8 ? nib - 16 : nib);
  }
  return out;
}

// --- scale computation and (de)quantization ------------------------------

inline ScaleSet compute_scale(const Tensor& x, const QuantScheme& scheme) {
  const std::size_t rows = x.rows(), cols = x.cols();
  ScaleSet out;
  out.granularity = scheme.granularity;
  out.group_size = scheme.group_size;
  out.scales.assign(
      scale_count(scheme.granularity, rows, cols, scheme.group_size), 0.0f);

  std::vector<double> absmax(out.scales.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t idx =
          scale_index(scheme.granularity, cols, scheme.group_size, r, c);
      double a = std::fabs(static_cast<double>(x.data()[r * cols + c]));
      if (a > absmax[idx]) absmax[idx] = a;
    }
  }
  const double denom = static_cast<double>(scheme.levels());
  for (std::size_t i = 0; i < out.scales.size(); ++i) {
    double s = 2.0 * absmax[i] / denom;
    out.scales[i] = s > 0.0 ? static_cast<float>(s) : kScaleFloor;
  }
  return out;
}

inline QuantizedTensor quantize(const Tensor& x, const ScaleSet& scales,
                                const QuantScheme& scheme) {
  const std::size_t rows = x.rows(), cols = x.cols();
  const std::size_t want =
      scale_count(scheme.granularity, rows, cols, scheme.group_size);
  if (scales.scales.size() != want || scales.granularity != scheme.granularity) {
    throw ConfigError("quantize: scale set has " +
                      std::to_string(scales.scales.size()) +
                      " scales, scheme expects " + std::to_string(want));
  }

  QuantizedTensor q;
  q.scheme = scheme;
  q.shape = x.shape();
  q.scales = scales;

  const int lo = scheme.qmin(), hi = scheme.qmax();
  std::vector<std::int8_t> values(x.elems());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const float s = scales.scale_at(cols, r, c);
      double v = static_cast<double>(x.data()[r * cols + c]) /
                 static_cast<double>(s);
      int iv = static_cast<int>(std::round(v));  // half away from zero
      iv = std::clamp(iv, lo, hi);
      values[r * cols + c] = static_cast<std::int8_t>(iv);
    }
  }

  if (scheme.bits == 8) {
    q.payload.assign(reinterpret_cast<const std::uint8_t*>(values.data()),
                     reinterpret_cast<const std::uint8_t*>(values.data()) +
                         values.size());
  } else {
    q.payload = pack_int4(values);
  }
  return q;
}

inline QuantizedTensor quantize(const Tensor& x, const QuantScheme& scheme) {
  return quantize(x, compute_scale(x, scheme), scheme);
}

inline Tensor dequantize(const QuantizedTensor& q) {
  instr::dequant_calls += 1;
  instr::ScratchGuard guard(static_cast<std::int64_t>(q.elems()));
  const std::size_t rows = q.rows(), cols = q.cols();
  Tensor out(q.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const float s = q.scales.scale_at(cols, r, c);
      out.data()[r * cols + c] = static_cast<float>(
          static_cast<double>(q.value_at(r * cols + c)) *
          static_cast<double>(s));
    }
  }
  return out;
}

struct QuantError {
  double mse = 0.0;
  double max_abs_err = 0.0;
};

inline QuantError quant_error(const Tensor& x, const QuantizedTensor& q) {
  if (x.shape() != q.shape) {
    throw DimError("quant_error: shape mismatch");
  }
  Tensor deq = dequantize(q);
  QuantError e;
  for (std::size_t i = 0; i < x.elems(); ++i) {
    double d = static_cast<double>(x.data()[i]) - static_cast<double>(deq.data()[i]);
    e.mse += d * d;
    e.max_abs_err = std::max(e.max_abs_err, std::fabs(d));
  }
  e.mse /= static_cast<double>(x.elems());
  return e;
}

}  // namespace lbq

#endif  // LBQ_QUANT_HPP

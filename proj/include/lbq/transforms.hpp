// transforms.hpp - Calibration-aware preprocessing applied before
// quantization: diagonal smoothing that shifts activation outlier
// magnitude into the weights, and Hadamard rotation that flattens
// heavy-tailed channel distributions. Both preserve the full-precision
// product Y = XW.

#ifndef LBQ_TRANSFORMS_HPP
#define LBQ_TRANSFORMS_HPP

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lbq/error.hpp"
#include "lbq/tensor.hpp"

namespace lbq {

// Per-channel factors s_j for the rewrite Y = (X S^-1)(S W). With
// alpha = 0.5 each channel lands on the geometric mean of the activation
// and weight absmax.
struct SmoothingVector {
  float alpha = 0.5f;
  std::vector<float> s;  // one per contraction channel, all > 0
};

// s_j = max(|X_j|)^alpha / max(|W_j|)^(1-alpha). Channels where either
// side has zero absmax keep s_j = 1.
inline SmoothingVector compute_smoothing(const std::vector<float>& act_absmax,
                                         const Tensor& w, float alpha) {
  if (w.rank() != 2 || act_absmax.size() != w.rows()) {
    throw DimError("compute_smoothing: absmax length " +
                   std::to_string(act_absmax.size()) +
                   " does not match weight rows " + std::to_string(w.rows()));
  }
  if (!(alpha >= 0.0f && alpha <= 1.0f)) {
    throw InputError("compute_smoothing: alpha must lie in [0, 1]");
  }
  const std::size_t k = w.rows(), n = w.cols();
  SmoothingVector sv;
  sv.alpha = alpha;
  sv.s.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    if (act_absmax[j] < 0.0f) {
      throw InputError("compute_smoothing: negative activation absmax");
    }
    double wmax = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      double a = std::fabs(static_cast<double>(w.at(j, c)));
      if (a > wmax) wmax = a;
    }
    const double amax = static_cast<double>(act_absmax[j]);
    if (amax == 0.0 || wmax == 0.0) {
      sv.s[j] = 1.0f;
    } else {
      sv.s[j] = static_cast<float>(std::pow(amax, static_cast<double>(alpha)) /
                                   std::pow(wmax, 1.0 - static_cast<double>(alpha)));
    }
  }
  return sv;
}

// Returns (X S^-1, S W); the full-precision product is unchanged.
inline std::pair<Tensor, Tensor> apply_smoothing(const Tensor& x,
                                                 const Tensor& w,
                                                 const SmoothingVector& sv) {
  if (x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows() ||
      sv.s.size() != w.rows()) {
    throw DimError("apply_smoothing: inconsistent dimensions");
  }
  Tensor xs({x.rows(), x.cols()});
  Tensor ws({w.rows(), w.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j)
      xs.at(i, j) = x.at(i, j) / sv.s[j];
  for (std::size_t j = 0; j < w.rows(); ++j)
    for (std::size_t c = 0; c < w.cols(); ++c)
      ws.at(j, c) = sv.s[j] * w.at(j, c);
  return {std::move(xs), std::move(ws)};
}

// Scales only the weight side (S W); used when the matching activation
// division happens later, at forward time.
inline Tensor apply_smoothing_to_weight(const Tensor& w,
                                        const SmoothingVector& sv) {
  if (w.rank() != 2 || sv.s.size() != w.rows()) {
    throw DimError("apply_smoothing_to_weight: length mismatch");
  }
  Tensor ws({w.rows(), w.cols()});
  for (std::size_t j = 0; j < w.rows(); ++j)
    for (std::size_t c = 0; c < w.cols(); ++c)
      ws.at(j, c) = sv.s[j] * w.at(j, c);
  return ws;
}

// Block-diagonal normalized Hadamard matrix. block_size is the largest
// power of two dividing dim; odd dims degenerate to the identity and are
// flagged so callers can warn.
struct HadamardTransform {
  std::size_t dim = 0;
  std::size_t block_size = 1;
  Tensor matrix;  // dim x dim, block-diagonal of Sylvester blocks / sqrt(bs)
  bool degenerate = false;  // block_size == 1, transform is the identity
};

inline std::size_t largest_pow2_divisor(std::size_t n) {
  return n & (~n + 1);  // lowest set bit
}

inline HadamardTransform hadamard_matrix(std::size_t dim) {
  if (dim == 0) throw DimError("hadamard_matrix: dim must be positive");
  HadamardTransform h;
  h.dim = dim;
  h.block_size = largest_pow2_divisor(dim);
  h.degenerate = (h.block_size == 1);
  h.matrix = Tensor({dim, dim});

  // Sylvester construction by doubling, entries in {-1, +1}.
  const std::size_t bs = h.block_size;
  std::vector<int> block(bs * bs, 0);
  block[0] = 1;
  for (std::size_t sz = 1; sz < bs; sz *= 2) {
    for (std::size_t i = 0; i < sz; ++i) {
      for (std::size_t j = 0; j < sz; ++j) {
        const int v = block[i * bs + j];
        block[i * bs + (j + sz)] = v;
        block[(i + sz) * bs + j] = v;
        block[(i + sz) * bs + (j + sz)] = -v;
      }
    }
  }
  const float norm =
      static_cast<float>(1.0 / std::sqrt(static_cast<double>(bs)));
  for (std::size_t b = 0; b < dim / bs; ++b) {
    for (std::size_t i = 0; i < bs; ++i) {
      for (std::size_t j = 0; j < bs; ++j) {
        h.matrix.at(b * bs + i, b * bs + j) =
            norm * static_cast<float>(block[i * bs + j]);
      }
    }
  }
  return h;
}

namespace detail {

// In-place unnormalized Walsh-Hadamard butterfly over buf[0..n).
inline void fwht_pow2(double* buf, std::size_t n) {
  for (std::size_t half = 1; half < n; half *= 2) {
    for (std::size_t start = 0; start < n; start += 2 * half) {
      for (std::size_t i = start; i < start + half; ++i) {
        const double a = buf[i], b = buf[i + half];
        buf[i] = a + b;
        buf[i + half] = a - b;
      }
    }
  }
}

}  // namespace detail

// x -> x H, applied rowwise with the fast transform per power-of-two
// block. The Sylvester blocks are symmetric, so the same routine serves
// both x H and H^T w (columnwise). Matches the dense product to 1e-6.
inline Tensor rotate_rows(const Tensor& x, const HadamardTransform& h) {
  if (x.rank() != 2 || x.cols() != h.dim) {
    throw DimError("rotate_rows: tensor cols " + std::to_string(x.cols()) +
                   " != transform dim " + std::to_string(h.dim));
  }
  const std::size_t bs = h.block_size;
  Tensor out({x.rows(), x.cols()});
  const double norm = 1.0 / std::sqrt(static_cast<double>(bs));
  std::vector<double> buf(bs);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t b = 0; b < h.dim / bs; ++b) {
      for (std::size_t i = 0; i < bs; ++i)
        buf[i] = static_cast<double>(x.at(r, b * bs + i));
      detail::fwht_pow2(buf.data(), bs);
      for (std::size_t i = 0; i < bs; ++i)
        out.at(r, b * bs + i) = static_cast<float>(buf[i] * norm);
    }
  }
  return out;
}

// w -> H^T w, applied columnwise per block.
inline Tensor rotate_cols(const Tensor& w, const HadamardTransform& h) {
  if (w.rank() != 2 || w.rows() != h.dim) {
    throw DimError("rotate_cols: tensor rows " + std::to_string(w.rows()) +
                   " != transform dim " + std::to_string(h.dim));
  }
  const std::size_t bs = h.block_size;
  Tensor out({w.rows(), w.cols()});
  const double norm = 1.0 / std::sqrt(static_cast<double>(bs));
  std::vector<double> buf(bs);
  for (std::size_t c = 0; c < w.cols(); ++c) {
    for (std::size_t b = 0; b < h.dim / bs; ++b) {
      for (std::size_t i = 0; i < bs; ++i)
        buf[i] = static_cast<double>(w.at(b * bs + i, c));
      detail::fwht_pow2(buf.data(), bs);
      for (std::size_t i = 0; i < bs; ++i)
        out.at(b * bs + i, c) = static_cast<float>(buf[i] * norm);
    }
  }
  return out;
}

// Returns (X H, H^T W); the full-precision product is unchanged.
inline std::pair<Tensor, Tensor> rotate(const Tensor& x, const Tensor& w,
                                        const HadamardTransform& h) {
  if (x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows() ||
      x.cols() != h.dim) {
    throw DimError("rotate: inconsistent dimensions");
  }
  return {rotate_rows(x, h), rotate_cols(w, h)};
}

}  // namespace lbq

#endif  // LBQ_TRANSFORMS_HPP

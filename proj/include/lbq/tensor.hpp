// tensor.hpp - Dense row-major FP32 tensors, reference matmul, seeded fill.

#ifndef LBQ_TENSOR_HPP
#define LBQ_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "lbq/error.hpp"
#include "lbq/rng.hpp"

namespace lbq {

// Dense FP32 tensor, row-major. Construction validates that the payload
// length matches the shape and that every element is finite. Treat
// instances as immutable once filled; all operations below are pure.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_elem_count(shape_), 0.0f) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_elem_count(shape_)) {
      throw DimError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape product " +
                     std::to_string(checked_elem_count(shape_)));
    }
    for (float v : data_) {
      if (!std::isfinite(v)) {
        throw InputError("tensor construction rejects non-finite elements");
      }
    }
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t elems() const { return data_.size(); }

  // Row/column accessors for the 2-D case used throughout the kernels.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? 1 : bad_rank()); }
  std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : bad_rank()); }

  const float* data() const { return data_.data(); }
  float* data() { return data_.data(); }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  static std::size_t checked_elem_count(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw DimError("tensor shape must be non-empty");
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw DimError("tensor dims must be positive");
      n *= d;
    }
    return n;
  }

  [[noreturn]] std::size_t bad_rank() const {
    throw DimError("operation requires a 1-D or 2-D tensor, got rank " +
                   std::to_string(rank()));
  }

  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

// C = A x B with double-precision accumulation, narrowed to FP32.
// This is the full-precision oracle the quantized kernels are checked
// against; keep it a plain triple loop.
inline Tensor matmul_ref(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimError("matmul_ref requires 2-D operands");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimError("matmul_ref inner dims disagree: " + std::to_string(k) +
                   " vs " + std::to_string(b.rows()));
  }
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += static_cast<double>(a.at(i, p)) * static_cast<double>(b.at(p, j));
      }
      c.at(i, j) = static_cast<float>(acc);
    }
  }
  return c;
}

enum class Dist { Uniform, Normal };

// Deterministic tensor fill: uniform [-1,1) or standard normal, seeded.
// Same (shape, seed, dist) gives identical bytes on every platform.
inline Tensor rand_tensor(const std::vector<std::size_t>& shape,
                          std::uint64_t seed, Dist dist = Dist::Uniform) {
  Tensor t(shape);  // validates shape
  SplitMix64 rng(seed);
  float* p = t.data();
  const std::size_t n = t.elems();
  if (dist == Dist::Uniform) {
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<float>(rng.next_uniform());
  } else {
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<float>(rng.next_normal());
  }
  return t;
}

// ||approx - exact||_F / ||exact||_F. A zero reference maps to 0 when
// the operands agree exactly and +infinity otherwise.
inline double rel_frobenius_error(const Tensor& approx, const Tensor& exact) {
  if (!approx.same_shape(exact)) {
    throw DimError("rel_frobenius_error requires same-shape operands");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < exact.elems(); ++i) {
    const double d = static_cast<double>(approx[i]) - static_cast<double>(exact[i]);
    num += d * d;
    den += static_cast<double>(exact[i]) * static_cast<double>(exact[i]);
  }
  if (den == 0.0) {
    return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return std::sqrt(num / den);
}

inline Tensor transpose(const Tensor& t) {
  if (t.rank() != 2) throw DimError("transpose requires a 2-D tensor");
  Tensor out({t.cols(), t.rows()});
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j)
      out.at(j, i) = t.at(i, j);
  return out;
}

}  // namespace lbq

#endif  // LBQ_TENSOR_HPP

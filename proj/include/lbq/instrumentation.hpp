// instrumentation.hpp - Counters proving the no-conversion property.
//
// Quantized forwards must never expand a full weight matrix to FP32.
// Transient FP32 buffers in the quantized execution path register their
// element counts here, and dequantize() bumps a call counter, so tests
// can assert the peak transient footprint stays at activation-block +
// output-tile size.

#ifndef LBQ_INSTRUMENTATION_HPP
#define LBQ_INSTRUMENTATION_HPP

#include <algorithm>
#include <cstdint>

namespace lbq::instr {

inline thread_local std::int64_t fp32_scratch_current = 0;
inline thread_local std::int64_t fp32_scratch_peak = 0;
inline thread_local std::int64_t dequant_calls = 0;

inline void reset() {
  fp32_scratch_current = 0;
  fp32_scratch_peak = 0;
  dequant_calls = 0;
}

// Registers n FP32 elements as live for the guard's lifetime.
class ScratchGuard {
 public:
  explicit ScratchGuard(std::int64_t n) : n_(n) {
    fp32_scratch_current += n_;
    fp32_scratch_peak = std::max(fp32_scratch_peak, fp32_scratch_current);
  }
  ~ScratchGuard() { fp32_scratch_current -= n_; }
  ScratchGuard(const ScratchGuard&) = delete;
  ScratchGuard& operator=(const ScratchGuard&) = delete;

 private:
  std::int64_t n_;
};

}  // namespace lbq::instr

#endif  // LBQ_INSTRUMENTATION_HPP

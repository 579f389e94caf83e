// analysis.hpp - Diagnostics: channel outlier profiles, word-count
// statistics over text corpora, and terminal-repetition detection on
// token sequences.

#ifndef LBQ_ANALYSIS_HPP
#define LBQ_ANALYSIS_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "lbq/error.hpp"
#include "lbq/tensor.hpp"

namespace lbq {

namespace detail {

// Median of a sorted sequence; even lengths average the two middles.
template <typename T>
double sorted_median(const std::vector<T>& sorted) {
  const std::size_t n = sorted.size();
  if (n % 2 == 1) return static_cast<double>(sorted[n / 2]);
  return 0.5 * (static_cast<double>(sorted[n / 2 - 1]) +
                static_cast<double>(sorted[n / 2]));
}

}  // namespace detail

// Column-wise absolute-maximum profile of a matrix. Columns are the
// channels: output channels of a weight, feature channels of a
// row-major activation block. `ratio` is max over median; a zero
// median with a nonzero max reports +infinity.
struct ChannelProfile {
  std::vector<float> absmax;  // one per column
  float max_absmax = 0.0f;
  float median_absmax = 0.0f;
  float ratio = 0.0f;
  std::vector<std::pair<std::size_t, float>> top;  // largest channels, descending
};

inline ChannelProfile channel_profile(const Tensor& x, std::size_t top_k = 8) {
  if (x.rank() != 2) throw DimError("channel_profile requires a 2-D tensor");
  ChannelProfile prof;
  prof.absmax.assign(x.cols(), 0.0f);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const float a = std::fabs(x.at(i, j));
      if (a > prof.absmax[j]) prof.absmax[j] = a;
    }
  }
  std::vector<float> sorted = prof.absmax;
  std::sort(sorted.begin(), sorted.end());
  prof.max_absmax = sorted.back();
  prof.median_absmax = static_cast<float>(detail::sorted_median(sorted));
  if (prof.median_absmax > 0.0f) {
    prof.ratio = prof.max_absmax / prof.median_absmax;
  } else {
    prof.ratio = prof.max_absmax > 0.0f
                     ? std::numeric_limits<float>::infinity()
                     : 0.0f;
  }

  std::vector<std::size_t> order(prof.absmax.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&prof](std::size_t a, std::size_t b) {
    return prof.absmax[a] > prof.absmax[b];
  });
  const std::size_t k = std::min(top_k, order.size());
  for (std::size_t i = 0; i < k; ++i) {
    prof.top.emplace_back(order[i], prof.absmax[order[i]]);
  }
  return prof;
}

// Whitespace-delimited word counts per text, with mean, median, and
// p95 computed by the nearest-rank rule (smallest count with at least
// 95% of texts at or below it).
struct WordCountStats {
  std::vector<std::size_t> counts;
  double mean = 0.0;
  double median = 0.0;
  std::size_t p95 = 0;
};

inline std::size_t word_count(const std::string& text) {
  std::size_t n = 0;
  bool in_word = false;
  for (unsigned char ch : text) {
    const bool space = std::isspace(ch) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

inline WordCountStats word_count_stats(const std::vector<std::string>& texts) {
  if (texts.empty()) throw InputError("word_count_stats: empty corpus");
  WordCountStats st;
  st.counts.reserve(texts.size());
  double total = 0.0;
  for (const std::string& t : texts) {
    st.counts.push_back(word_count(t));
    total += static_cast<double>(st.counts.back());
  }
  st.mean = total / static_cast<double>(st.counts.size());
  std::vector<std::size_t> sorted = st.counts;
  std::sort(sorted.begin(), sorted.end());
  st.median = detail::sorted_median(sorted);
  const std::size_t rank = static_cast<std::size_t>(
      std::ceil(0.95 * static_cast<double>(sorted.size())));
  st.p95 = sorted[rank - 1];
  return st;
}

// A sequence "ends in a loop" when its final phrase_len * repeats
// tokens are `repeats` consecutive copies of the same phrase, with
// phrase_len in [min_phrase, max_phrase] and repeats >= min_repeats.
// must_reach_end = false also accepts a loop that is followed by
// trailing tokens (the block closest to the end is reported).
struct RepetitionConfig {
  std::size_t min_phrase = 1;
  std::size_t max_phrase = 32;
  std::size_t min_repeats = 3;
  bool must_reach_end = true;

  void validate() const {
    if (min_phrase < 1 || max_phrase < min_phrase) {
      throw ConfigError("repetition: need 1 <= min_phrase <= max_phrase");
    }
    if (min_repeats < 2) {
      throw ConfigError("repetition: min_repeats must be at least 2");
    }
  }
};

// When detected, the canonical description is the shortest phrase, with
// the largest repeat count that phrase supports. tail_start indexes the
// first token of the repeated block.
struct RepetitionReport {
  bool detected = false;
  std::size_t phrase_len = 0;
  std::size_t repeats = 0;
  std::size_t tail_start = 0;
};

namespace detail {

// Repetition check for the block ending at `end` (exclusive). For each
// phrase length p, the repeat count is 1 + q/p where q counts matching
// positions tokens[i] == tokens[i+p] scanning backward from end-p-1.
inline RepetitionReport repetition_at_end(const std::vector<int>& tokens,
                                          std::size_t end,
                                          const RepetitionConfig& cfg) {
  RepetitionReport rep;
  const std::size_t max_p = std::min(cfg.max_phrase, end / 2);
  for (std::size_t p = cfg.min_phrase; p <= max_p; ++p) {
    std::size_t q = 0;
    while (q < end - p && tokens[end - p - 1 - q] == tokens[end - 1 - q]) ++q;
    const std::size_t r = 1 + q / p;
    if (r >= cfg.min_repeats) {
      rep.detected = true;
      rep.phrase_len = p;
      rep.repeats = r;
      rep.tail_start = end - p * r;
      return rep;
    }
  }
  return rep;
}

}  // namespace detail

inline RepetitionReport detect_terminal_repetition(
    const std::vector<int>& tokens, const RepetitionConfig& cfg = {}) {
  cfg.validate();
  if (tokens.size() < cfg.min_phrase * cfg.min_repeats) return {};
  if (cfg.must_reach_end) {
    return detail::repetition_at_end(tokens, tokens.size(), cfg);
  }
  for (std::size_t end = tokens.size();
       end >= cfg.min_phrase * cfg.min_repeats; --end) {
    RepetitionReport rep = detail::repetition_at_end(tokens, end, cfg);
    if (rep.detected) return rep;
  }
  return {};
}

// Fraction of sequences in the corpus that end in a detected loop.
inline double repetition_ratio(const std::vector<std::vector<int>>& corpus,
                               const RepetitionConfig& cfg = {}) {
  if (corpus.empty()) throw InputError("repetition_ratio: empty corpus");
  std::size_t hits = 0;
  for (const std::vector<int>& seq : corpus) {
    if (detect_terminal_repetition(seq, cfg).detected) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(corpus.size());
}

}  // namespace lbq

#endif  // LBQ_ANALYSIS_HPP

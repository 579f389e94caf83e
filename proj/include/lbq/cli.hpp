// cli.hpp - Command implementations behind the lbq binary. Each command
// is a plain function over an options struct and an output stream, so
// tests drive them in-process; the binary only parses flags.
//
// Exit codes: 0 success, 1 usage/config, 2 data/format, 3 internal.
// Every command is deterministic given its options (timing columns in
// bench output excepted).

#ifndef LBQ_CLI_HPP
#define LBQ_CLI_HPP

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lbq/analysis.hpp"
#include "lbq/container.hpp"
#include "lbq/error.hpp"
#include "lbq/pipeline.hpp"
#include "lbq/qgemm.hpp"
#include "lbq/quant.hpp"
#include "lbq/tensor.hpp"
#include "lbq/transforms.hpp"

namespace lbq::cli {

inline std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("LBQ_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long parsed = std::strtoull(v, &end, 10);
  if (end == v || *end != '\0') {
    throw ConfigError("LBQ_SEED must be an unsigned integer, got '" +
                      std::string(v) + "'");
  }
  return static_cast<std::uint64_t>(parsed);
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) lines.push_back(line);
  return lines;
}

// Token files: one sequence per line, space-separated integer ids;
// blank lines are skipped.
inline std::vector<std::vector<int>> parse_token_lines(
    const std::vector<std::string>& lines, const std::string& path) {
  std::vector<std::vector<int>> seqs;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::istringstream ss(lines[i]);
    std::vector<int> seq;
    int tok;
    while (ss >> tok) seq.push_back(tok);
    if (!ss.eof()) {
      throw FormatError(path + ":" + std::to_string(i + 1) +
                        ": expected space-separated integer token ids");
    }
    if (!seq.empty()) seqs.push_back(std::move(seq));
  }
  return seqs;
}

inline QuantMode parse_scheme(const std::string& scheme) {
  if (scheme == "w8a8") return QuantMode::W8A8;
  if (scheme == "w4a8") return QuantMode::W4A8;
  throw ConfigError("unknown scheme '" + scheme + "' (expected w8a8 or w4a8)");
}

// Replays the model-side transforms recorded on a quantized layer, for
// reporting the error of the stored integers against what was quantized.
inline Tensor transformed_weight(const ToyModel& model, std::size_t l,
                                 const std::string& kind,
                                 const QLinearLayer& layer) {
  Tensor w = model.linear_weight(l, kind);
  if (layer.smoothing) w = apply_smoothing_to_weight(w, *layer.smoothing);
  if (layer.hadamard) w = rotate_cols(w, hadamard_matrix(w.rows()));
  return w;
}

// ---------------------------------------------------------------- init-toy

struct InitToyArgs {
  std::string out_path;
  std::uint64_t seed = 0;
  std::size_t outlier_channels = 2;
  float outlier_factor = 10.0f;
};

inline void cmd_init_toy(const InitToyArgs& args, std::ostream& out) {
  ToyModelConfig cfg;
  cfg.seed = args.seed;
  ToyModel model = ToyModel::random(cfg, args.outlier_channels, args.outlier_factor);
  Container c = to_container(model);
  c.write(args.out_path);
  out << "wrote " << args.out_path << " (" << c.serialize().size()
      << " bytes, seed " << args.seed << ", " << args.outlier_channels
      << " outlier channels per linear)\n";
}

// ---------------------------------------------------------------- quantize

struct QuantizeArgs {
  std::string in_path;
  std::string out_path;
  std::string scheme = "w8a8";
  std::optional<float> smooth_alpha;
  bool hadamard = false;
  std::size_t group_size = 0;
  std::string calib_path;  // empty: seeded random sequences
  std::size_t calib_count = 16;
  std::size_t calib_len = 128;
  std::uint64_t seed = 0;
};

inline void cmd_quantize(const QuantizeArgs& args, std::ostream& out) {
  Container in = Container::read(args.in_path);
  ToyModel model = toy_model_from_container(in);
  const QuantMode mode = parse_scheme(args.scheme);

  std::vector<std::vector<int>> calib;
  if (!args.calib_path.empty()) {
    calib = parse_token_lines(read_lines(args.calib_path), args.calib_path);
    if (calib.empty()) {
      throw FormatError("calibration file '" + args.calib_path +
                        "' holds no token sequences");
    }
  } else {
    calib = random_sequences(args.seed, args.calib_count,
                             std::min(args.calib_len, model.config.max_seq),
                             model.config.vocab);
  }
  CalibrationStats stats = calibrate(model, calib);

  QuantizeModelOptions opts;
  opts.smooth_alpha = args.smooth_alpha;
  opts.hadamard = args.hadamard;
  opts.group_size = args.group_size;
  QuantizedToyModel qm = quantize_model(model, mode, stats, opts);

  Container outc = to_container(qm);
  outc.write(args.out_path);

  out << "scheme=" << args.scheme
      << " smooth_alpha=" << (args.smooth_alpha ? fmt("%.6f", *args.smooth_alpha) : "none")
      << " hadamard=" << (args.hadamard ? 1 : 0)
      << " group_size=" << args.group_size << "\n";
  double worst_mse = 0.0;
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    for (const char* kind : kLinearKinds) {
      const std::string name = linear_name(l, kind);
      const QLinearLayer& layer = qm.linear(l, kind);
      const Tensor w = transformed_weight(model, l, kind, layer);
      const QuantError err =
          quant_error(w, std::get<QuantizedTensor>(layer.weight));
      worst_mse = std::max(worst_mse, err.mse);
      out << name << " mse=" << fmt("%.6e", err.mse)
          << " max_abs=" << fmt("%.6e", err.max_abs_err) << "\n";
    }
  }
  out << "worst_layer_mse=" << fmt("%.6e", worst_mse) << "\n";
  out << "wrote " << args.out_path << " (" << outc.serialize().size()
      << " bytes)\n";
}

// -------------------------------------------------------------------- bench

struct BenchArgs {
  std::size_t m = 64;
  std::size_t n = 64;
  std::size_t k = 64;
  std::size_t iters = 5;
  std::vector<std::string> kernels;  // empty: all four
  std::uint64_t seed = 0;
};

namespace detail {

struct BenchPayload {
  std::size_t weight_bytes = 0;
  std::size_t scale_bytes = 0;
  std::size_t act_bytes = 0;
};

inline BenchPayload bench_payload(const std::string& kernel, std::size_t m,
                                  std::size_t n, std::size_t k) {
  BenchPayload p;
  if (kernel == "f32") {
    p.weight_bytes = k * n * 4;
    p.act_bytes = m * k * 4;
  } else if (kernel == "w8a8_ref" || kernel == "w8a8_opt") {
    p.weight_bytes = k * n;
    p.act_bytes = m * k;
    p.scale_bytes = (n + m) * 4;  // per-channel weight + per-token act scales
  } else if (kernel == "w4a8_ref") {
    p.weight_bytes = (k * n + 1) / 2;
    p.act_bytes = m * k;
    p.scale_bytes = (n + m) * 4;
  } else {
    throw ConfigError("unknown kernel '" + kernel +
                      "' (expected f32, w8a8_ref, w8a8_opt, or w4a8_ref)");
  }
  return p;
}

}  // namespace detail

inline void cmd_bench(const BenchArgs& args, std::ostream& out) {
  if (args.m == 0 || args.n == 0 || args.k == 0 || args.iters == 0) {
    throw ConfigError("bench: m, n, k, iters must all be positive");
  }
  if (args.k > kMaxAccumK) {
    throw ConfigError("bench: k=" + std::to_string(args.k) +
                      " risks i32 accumulator overflow (limit " +
                      std::to_string(kMaxAccumK) + ")");
  }
  std::vector<std::string> kernels = args.kernels;
  if (kernels.empty()) kernels = {"f32", "w8a8_ref", "w8a8_opt", "w4a8_ref"};
  for (const std::string& kn : kernels) (void)detail::bench_payload(kn, 1, 1, 1);

  const Tensor x = rand_tensor({args.m, args.k}, args.seed ^ 0x61637473ULL,
                               Dist::Normal);
  const Tensor w = rand_tensor({args.k, args.n}, args.seed ^ 0x77677473ULL,
                               Dist::Normal);
  const QuantizedTensor aq = quantize(x, QuantScheme(8, Granularity::PerToken));
  const QuantizedTensor wq8 = quantize(w, QuantScheme(8, Granularity::PerChannel));
  const QuantizedTensor wq4 = quantize(w, QuantScheme(4, Granularity::PerChannel));

  // Quantization error between the integer operands and the FP32 inputs
  // is expected; the cross-check below compares each kernel against
  // matmul_ref on the *dequantized* operands, where only rounding-order
  // differences remain.
  const Tensor adeq = dequantize(aq);
  const Tensor w8deq = dequantize(wq8);
  const Tensor w4deq = dequantize(wq4);
  const double tol =
      1e-6 * std::max(1.0, std::sqrt(static_cast<double>(args.k)));

  out << "kernel,m,n,k,iters,wall_ns,weight_bytes,scale_bytes,act_bytes,total_bytes\n";
  for (const std::string& kn : kernels) {
    auto run = [&]() -> Tensor {
      if (kn == "f32") return matmul_ref(x, w);
      if (kn == "w8a8_ref") return gemm_w8a8_ref(aq, wq8);
      if (kn == "w8a8_opt") return gemm_w8a8_opt(aq, wq8);
      return gemm_w4a8_ref(aq, wq4);
    };

    if (kn != "f32") {
      const Tensor oracle =
          kn == "w4a8_ref" ? matmul_ref(adeq, w4deq) : matmul_ref(adeq, w8deq);
      const double err = rel_frobenius_error(run(), oracle);
      if (!(err <= tol)) {
        throw Error("bench: kernel " + kn +
                    " failed its pre-timing correctness cross-check (rel err " +
                    fmt("%.3e", err) + ", tol " + fmt("%.3e", tol) + ")");
      }
    }

    std::vector<long long> ns(args.iters);
    for (std::size_t it = 0; it < args.iters; ++it) {
      const auto t0 = std::chrono::steady_clock::now();
      volatile float sink = run()[0];
      (void)sink;
      const auto t1 = std::chrono::steady_clock::now();
      ns[it] = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
    }
    std::sort(ns.begin(), ns.end());
    long long median = args.iters % 2 == 1
                           ? ns[args.iters / 2]
                           : (ns[args.iters / 2 - 1] + ns[args.iters / 2]) / 2;
    median = std::max<long long>(median, 1);

    const detail::BenchPayload p = detail::bench_payload(kn, args.m, args.n, args.k);
    out << kn << "," << args.m << "," << args.n << "," << args.k << ","
        << args.iters << "," << median << "," << p.weight_bytes << ","
        << p.scale_bytes << "," << p.act_bytes << ","
        << (p.weight_bytes + p.scale_bytes + p.act_bytes) << "\n";
  }
}

// ----------------------------------------------------------------- eval-toy

struct EvalToyArgs {
  std::string precision = "fp32";  // fp32 | w8a8 | w4a8
  std::optional<float> smooth_alpha;
  bool hadamard = false;
  std::size_t group_size = 0;
  std::size_t prompts = 32;
  std::size_t prompt_len = 16;
  std::size_t max_new = 32;
  std::uint64_t seed = 0;
  std::size_t outlier_channels = 2;
  float outlier_factor = 10.0f;
  std::string out_path;  // also write the report here when set
};

struct EvalToyReport {
  double mean_rel_logit_err = 0.0;
  double token_divergence_rate = 0.0;
  double repetition_pct = 0.0;
};

// Core of cmd_eval_toy, reusable where the numbers matter more than the
// report text: logit error is measured on prompt forwards, divergence
// and repetition on greedy continuations.
inline EvalToyReport eval_toy_metrics(const ToyModel& model,
                                      const QuantizedToyModel* qmodel,
                                      const std::vector<std::vector<int>>& prompts,
                                      std::size_t max_new) {
  if (prompts.empty()) throw InputError("eval: no prompts");
  EvalToyReport rep;
  std::vector<std::vector<int>> generations;
  for (const std::vector<int>& prompt : prompts) {
    const Tensor base_logits = model.forward(prompt);
    const Tensor eval_logits = qmodel ? qmodel->forward(prompt) : base_logits;
    rep.mean_rel_logit_err += rel_frobenius_error(eval_logits, base_logits);

    const std::vector<int> base_gen = generate(model, prompt, max_new);
    const std::vector<int> eval_gen =
        qmodel ? generate(*qmodel, prompt, max_new) : base_gen;
    generations.push_back(eval_gen);
    const std::size_t base_len = base_gen.size() - prompt.size();
    const std::size_t eval_len = eval_gen.size() - prompt.size();
    const std::size_t span = std::max(base_len, eval_len);
    if (span > 0) {
      std::size_t mismatches = 0;
      for (std::size_t i = 0; i < span; ++i) {
        const std::size_t pos = prompt.size() + i;
        if (i >= base_len || i >= eval_len ||
            base_gen[pos] != eval_gen[pos]) {
          ++mismatches;
        }
      }
      rep.token_divergence_rate +=
          static_cast<double>(mismatches) / static_cast<double>(span);
    }
  }
  rep.mean_rel_logit_err /= static_cast<double>(prompts.size());
  rep.token_divergence_rate /= static_cast<double>(prompts.size());
  rep.repetition_pct = 100.0 * repetition_ratio(generations);
  return rep;
}

inline void cmd_eval_toy(const EvalToyArgs& args, std::ostream& out) {
  if (args.precision != "fp32" && args.precision != "w8a8" &&
      args.precision != "w4a8") {
    throw ConfigError("unknown precision '" + args.precision +
                      "' (expected fp32, w8a8, or w4a8)");
  }
  if (args.prompts == 0 || args.prompt_len == 0) {
    throw ConfigError("eval: prompts and prompt_len must be positive");
  }
  ToyModelConfig cfg;
  cfg.seed = args.seed;
  if (args.prompt_len + args.max_new > cfg.max_seq) {
    throw ConfigError("eval: prompt_len + max_new exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  ToyModel model =
      ToyModel::random(cfg, args.outlier_channels, args.outlier_factor);

  std::optional<QuantizedToyModel> qmodel;
  if (args.precision != "fp32") {
    const std::vector<std::vector<int>> calib =
        random_sequences(args.seed ^ 0x63616c6962ULL, 16,
                         std::min<std::size_t>(128, cfg.max_seq), cfg.vocab);
    CalibrationStats stats = calibrate(model, calib);
    QuantizeModelOptions opts;
    opts.smooth_alpha = args.smooth_alpha;
    opts.hadamard = args.hadamard;
    opts.group_size = args.group_size;
    qmodel = quantize_model(model, parse_scheme(args.precision), stats, opts);
  }

  const std::vector<std::vector<int>> prompts = random_sequences(
      args.seed ^ 0x70726f6d70ULL, args.prompts, args.prompt_len, cfg.vocab);
  const EvalToyReport rep = eval_toy_metrics(
      model, qmodel ? &*qmodel : nullptr, prompts, args.max_new);

  std::ostringstream text;
  text << "precision=" << args.precision << "\n"
       << "smooth_alpha="
       << (args.smooth_alpha ? fmt("%.6f", *args.smooth_alpha) : "none") << "\n"
       << "hadamard=" << (args.hadamard ? 1 : 0) << "\n"
       << "group_size=" << args.group_size << "\n"
       << "seed=" << args.seed << "\n"
       << "prompts=" << args.prompts << "\n"
       << "prompt_len=" << args.prompt_len << "\n"
       << "max_new=" << args.max_new << "\n"
       << "outlier_channels=" << args.outlier_channels << "\n"
       << "outlier_factor=" << fmt("%.6f", args.outlier_factor) << "\n"
       << "mean_rel_logit_err=" << fmt("%.6e", rep.mean_rel_logit_err) << "\n"
       << "token_divergence_rate=" << fmt("%.6f", rep.token_divergence_rate) << "\n"
       << "repetition_ratio_percent=" << fmt("%.1f", rep.repetition_pct) << "\n";
  out << text.str();
  if (!args.out_path.empty()) {
    std::ofstream f(args.out_path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + args.out_path + "' for writing");
    f << text.str();
  }
}

// ------------------------------------------------------------------ analyze

struct AnalyzeArgs {
  std::string channel_ckpt;   // --channel-stats <ckpt> <layer>
  std::string channel_layer;
  std::string word_counts_path;  // --word-counts <file>
  std::string repetition_path;   // --repetition <file>
  RepetitionConfig repetition;
};

inline void cmd_analyze(const AnalyzeArgs& args, std::ostream& out) {
  const int modes = (args.channel_ckpt.empty() ? 0 : 1) +
                    (args.word_counts_path.empty() ? 0 : 1) +
                    (args.repetition_path.empty() ? 0 : 1);
  if (modes != 1) {
    throw ConfigError(
        "analyze: choose exactly one of --channel-stats, --word-counts, --repetition");
  }

  if (!args.channel_ckpt.empty()) {
    if (args.channel_layer.empty()) {
      throw ConfigError("analyze: --channel-stats needs a layer name");
    }
    Container c = Container::read(args.channel_ckpt);
    if (!c.has(args.channel_layer)) {
      throw FormatError("checkpoint has no entry '" + args.channel_layer + "'");
    }
    const Tensor w = c.entries.at(args.channel_layer).dtype == DType::F32
                         ? c.get_tensor(args.channel_layer)
                         : dequantize(c.get_quantized(args.channel_layer));
    const ChannelProfile prof = channel_profile(w);
    out << "channel,absmax\n";
    for (std::size_t j = 0; j < prof.absmax.size(); ++j) {
      out << j << "," << fmt("%.6e", prof.absmax[j]) << "\n";
    }
    out << "# max=" << fmt("%.6e", prof.max_absmax)
        << " median=" << fmt("%.6e", prof.median_absmax)
        << " ratio=" << fmt("%.6e", prof.ratio) << "\n";
    return;
  }

  if (!args.word_counts_path.empty()) {
    const std::vector<std::string> lines = read_lines(args.word_counts_path);
    const WordCountStats st = word_count_stats(lines);
    out << "id,count\n";
    for (std::size_t i = 0; i < st.counts.size(); ++i) {
      out << i << "," << st.counts[i] << "\n";
    }
    out << "# mean=" << fmt("%.6f", st.mean)
        << " median=" << fmt("%.6f", st.median) << " p95=" << st.p95 << "\n";
    return;
  }

  const std::vector<std::vector<int>> seqs = parse_token_lines(
      read_lines(args.repetition_path), args.repetition_path);
  if (seqs.empty()) {
    throw FormatError("token file '" + args.repetition_path +
                      "' holds no sequences");
  }
  out << "id,detected,phrase_len,repeats\n";
  std::size_t hits = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const RepetitionReport rep =
        detect_terminal_repetition(seqs[i], args.repetition);
    if (rep.detected) ++hits;
    out << i << "," << (rep.detected ? 1 : 0) << "," << rep.phrase_len << ","
        << rep.repeats << "\n";
  }
  const double pct =
      100.0 * static_cast<double>(hits) / static_cast<double>(seqs.size());
  out << "# repetition_ratio_percent=" << fmt("%.1f", pct) << "\n";
}

// -------------------------------------------------------------- exit mapping

template <typename Fn>
int run_command(Fn&& fn, std::ostream& err) {
  try {
    fn();
    return 0;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const DimError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const RangeError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace lbq::cli

#endif  // LBQ_CLI_HPP

// lbq_main.cpp - Flag parsing for the lbq binary. All behavior lives in
// lbq/cli.hpp; this file maps flags onto the option structs and exit
// codes onto the documented families.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lbq/cli.hpp"

namespace {

// --seed wins; otherwise LBQ_SEED; otherwise 0.
std::uint64_t resolve_seed(const CLI::Option* seed_opt, std::uint64_t flag_value) {
  if (seed_opt->count() > 0) return flag_value;
  if (auto env = lbq::cli::env_seed()) return *env;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Post-training quantization toolkit (W8A8 / W4A8)"};
  app.require_subcommand(1);

  lbq::cli::InitToyArgs init_args;
  CLI::App* init = app.add_subcommand("init-toy", "Write a fresh FP32 toy-model checkpoint");
  init->add_option("out", init_args.out_path, "Output checkpoint path")->required();
  CLI::Option* init_seed = init->add_option("--seed", init_args.seed, "RNG seed");
  init->add_option("--outlier-channels", init_args.outlier_channels,
                   "Input channels per linear scaled up to emulate outliers");
  init->add_option("--outlier-factor", init_args.outlier_factor,
                   "Scale factor applied to outlier channels");

  lbq::cli::QuantizeArgs q_args;
  CLI::App* quant = app.add_subcommand("quantize", "Quantize a checkpoint");
  quant->add_option("in", q_args.in_path, "Input FP32 checkpoint")->required();
  quant->add_option("out", q_args.out_path, "Output quantized checkpoint")->required();
  quant->add_option("--scheme", q_args.scheme, "w8a8 or w4a8")->required();
  quant->add_option("--smooth", q_args.smooth_alpha,
                    "Enable smoothing with this alpha in [0,1]");
  quant->add_flag("--hadamard", q_args.hadamard, "Rotate weights/activations");
  quant->add_option("--group-size", q_args.group_size,
                    "w4a8 group size (0 = per-channel scales)");
  quant->add_option("--calib", q_args.calib_path,
                    "Token file for calibration (default: seeded random)");
  quant->add_option("--calib-count", q_args.calib_count,
                    "Random calibration sequences when --calib is absent");
  quant->add_option("--calib-len", q_args.calib_len,
                    "Length of random calibration sequences");
  CLI::Option* q_seed = quant->add_option("--seed", q_args.seed, "RNG seed");

  lbq::cli::BenchArgs b_args;
  CLI::App* bench = app.add_subcommand("bench", "Benchmark GEMM kernels, CSV to stdout");
  bench->add_option("--m", b_args.m, "Rows of the activation block");
  bench->add_option("--n", b_args.n, "Output features");
  bench->add_option("--k", b_args.k, "Contraction dim (< 131072)");
  bench->add_option("--iters", b_args.iters, "Timed iterations per kernel");
  bench->add_option("--kernels", b_args.kernels,
                    "Subset of f32,w8a8_ref,w8a8_opt,w4a8_ref")
      ->delimiter(',');
  CLI::Option* b_seed = bench->add_option("--seed", b_args.seed, "RNG seed");

  lbq::cli::EvalToyArgs e_args;
  CLI::App* eval = app.add_subcommand(
      "eval-toy", "Quantization-quality report on the seeded toy model");
  eval->add_option("--precision", e_args.precision, "fp32, w8a8, or w4a8");
  eval->add_option("--smooth", e_args.smooth_alpha,
                   "Enable smoothing with this alpha in [0,1]");
  eval->add_flag("--hadamard", e_args.hadamard, "Rotate weights/activations");
  eval->add_option("--group-size", e_args.group_size,
                   "w4a8 group size (0 = per-channel scales)");
  eval->add_option("--prompts", e_args.prompts, "Number of evaluation prompts");
  eval->add_option("--prompt-len", e_args.prompt_len, "Tokens per prompt");
  eval->add_option("--max-new", e_args.max_new, "Greedy continuation length");
  CLI::Option* e_seed = eval->add_option("--seed", e_args.seed, "RNG seed");
  eval->add_option("--outlier-channels", e_args.outlier_channels,
                   "Input channels per linear scaled up to emulate outliers");
  eval->add_option("--outlier-factor", e_args.outlier_factor,
                   "Scale factor applied to outlier channels");
  eval->add_option("--out", e_args.out_path, "Also write the report to this file");

  lbq::cli::AnalyzeArgs a_args;
  std::vector<std::string> channel_stats;
  CLI::App* analyze = app.add_subcommand("analyze", "Diagnostics, CSV to stdout");
  analyze->add_option("--channel-stats", channel_stats,
                      "Checkpoint path and entry name")
      ->expected(2);
  analyze->add_option("--word-counts", a_args.word_counts_path,
                      "Text file, one document per line");
  analyze->add_option("--repetition", a_args.repetition_path,
                      "Token file, one space-separated sequence per line");
  analyze->add_option("--min-phrase", a_args.repetition.min_phrase,
                      "Shortest phrase length considered");
  analyze->add_option("--max-phrase", a_args.repetition.max_phrase,
                      "Longest phrase length considered");
  analyze->add_option("--min-repeats", a_args.repetition.min_repeats,
                      "Copies required to call a loop");
  analyze->add_flag_function(
      "--allow-truncated-tail",
      [&a_args](std::int64_t) { a_args.repetition.must_reach_end = false; },
      "Accept loops followed by trailing tokens");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  return lbq::cli::run_command(
      [&] {
        if (init->parsed()) {
          init_args.seed = resolve_seed(init_seed, init_args.seed);
          lbq::cli::cmd_init_toy(init_args, std::cout);
        } else if (quant->parsed()) {
          q_args.seed = resolve_seed(q_seed, q_args.seed);
          lbq::cli::cmd_quantize(q_args, std::cout);
        } else if (bench->parsed()) {
          b_args.seed = resolve_seed(b_seed, b_args.seed);
          lbq::cli::cmd_bench(b_args, std::cout);
        } else if (eval->parsed()) {
          e_args.seed = resolve_seed(e_seed, e_args.seed);
          lbq::cli::cmd_eval_toy(e_args, std::cout);
        } else {
          if (channel_stats.size() == 2) {
            a_args.channel_ckpt = channel_stats[0];
            a_args.channel_layer = channel_stats[1];
          }
          lbq::cli::cmd_analyze(a_args, std::cout);
        }
      },
      std::cerr);
}

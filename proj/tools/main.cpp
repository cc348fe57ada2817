// founddiff command line: simulate | train-perception | train-denoiser |
// denoise | evaluate | verify.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration error,
// 3 data/simulation error, 4 training divergence.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "founddiff/pipeline.hpp"

using namespace founddiff;

int main(int argc, char** argv) {
  CLI::App app{"founddiff: dose- and anatomy-aware low-dose CT denoising"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "run";
  std::uint64_t seed_override = 0;
  bool seed_given = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key=value config file");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed_override, "seed override")
        ->each([&](const std::string&) { seed_given = true; });
  };

  auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset");
  add_common(sim);
  auto* tp = app.add_subcommand("train-perception", "train the perception stage");
  add_common(tp);
  auto* td = app.add_subcommand("train-denoiser", "train the denoiser stage");
  add_common(td);
  auto* dn = app.add_subcommand("denoise", "denoise sample files");
  add_common(dn);
  std::vector<std::string> inputs;
  dn->add_option("inputs", inputs, "sample files (.cts)")->required();
  auto* ev = app.add_subcommand("evaluate", "evaluate on a test dataset");
  add_common(ev);
  auto* vf = app.add_subcommand("verify", "run the verification suites");
  add_common(vf);
  std::string corrupt_op;
  vf->add_option("--corrupt-backward", corrupt_op,
                 "fault-injection hook: corrupt the named op's backward rule")
      ->group("");  // hidden

  CLI11_PARSE(app, argc, argv);

  try {
    cli::RunConfig cfg;
    if (!config_path.empty()) cfg = cli::load_config(config_path);
    if (seed_given) cfg.seed = seed_override;
    cli::validate(cfg);

    if (sim->parsed()) {
      cli::cmd_simulate(cfg, out_dir, config_path);
      std::printf("dataset written to %s\n", out_dir.c_str());
    } else if (tp->parsed()) {
      cli::cmd_train_perception(cfg, out_dir, config_path);
      std::printf("perception checkpoint written to %s\n", out_dir.c_str());
    } else if (td->parsed()) {
      cli::cmd_train_denoiser(cfg, out_dir, config_path);
      std::printf("denoiser checkpoint written to %s\n", out_dir.c_str());
    } else if (dn->parsed()) {
      const long evals = cli::cmd_denoise(cfg, out_dir, inputs, config_path);
      std::printf("images=%zu network_evals=%ld\n", inputs.size(), evals);
    } else if (ev->parsed()) {
      auto summary = cli::cmd_evaluate(cfg, out_dir, config_path);
      std::printf("perception: plcc=%.4f srocc=%.4f anatomy_acc=%.4f\n",
                  summary.plcc, summary.srocc, summary.anatomy_acc);
      std::printf("seen:   n=%d input_psnr=%.2f output_psnr=%.2f\n",
                  summary.seen_count, summary.seen_input_psnr,
                  summary.seen_output_psnr);
      std::printf("unseen: n=%d input_psnr=%.2f output_psnr=%.2f\n",
                  summary.unseen_count, summary.unseen_input_psnr,
                  summary.unseen_output_psnr);
    } else if (vf->parsed()) {
      return cli::cmd_verify(corrupt_op, std::cout);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return 4;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}

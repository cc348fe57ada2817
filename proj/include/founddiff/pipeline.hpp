#pragma once

// Command implementations behind the CLI: dataset simulation, two-stage
// training with resumable loss traces, batch denoising, evaluation reports,
// and the verification suites.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "founddiff/config.hpp"
#include "founddiff/dataset.hpp"
#include "founddiff/diffusion.hpp"
#include "founddiff/metrics.hpp"
#include "founddiff/perception.hpp"
#include "founddiff/verify.hpp"

namespace founddiff::cli {

namespace fs = std::filesystem;

inline std::vector<ctsim::Family> parse_families(const RunConfig& cfg) {
  std::vector<ctsim::Family> out;
  for (const auto& f : cfg.families) out.push_back(ctsim::family_from_name(f));
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << text;
}

// The run's configuration is copied verbatim into its output directory;
// when no file was given the resolved defaults are written instead.
inline void copy_config_into(const RunConfig& cfg, const std::string& config_path,
                             const std::string& out_dir) {
  fs::create_directories(out_dir);
  const auto dest = (fs::path(out_dir) / "config.txt").string();
  if (!config_path.empty()) {
    std::ifstream src(config_path, std::ios::binary);
    std::ostringstream ss;
    ss << src.rdbuf();
    write_text(dest, ss.str());
  } else {
    write_text(dest, serialize_config(cfg));
  }
}

inline std::vector<ctsim::CtSample> load_dataset(const std::string& dir) {
  return ctsim::read_manifest((fs::path(dir) / "manifest.txt").string());
}

inline std::vector<ctsim::CtSample> filter_fractions(
    const std::vector<ctsim::CtSample>& ds, const std::vector<double>& menu) {
  std::vector<ctsim::CtSample> out;
  for (const auto& s : ds)
    for (double f : menu)
      if (std::abs(s.y_d - f) < 1e-9) {
        out.push_back(s);
        break;
      }
  return out;
}

inline perception::PerceptionConfig perception_config(const RunConfig& cfg) {
  return {cfg.d_e, cfg.tau};
}

inline dadiff::DenoiserConfig denoiser_config(const RunConfig& cfg) {
  dadiff::DenoiserConfig d;
  d.levels = cfg.levels;
  d.widths = cfg.widths;
  d.n_state = cfg.n_state;
  d.d_e = cfg.d_e;
  d.t_dim = cfg.t_dim;
  d.scan_directions = cfg.scan_directions;
  d.use_dose_condition = cfg.use_dose_condition;
  d.use_anatomy_condition = cfg.use_anatomy_condition;
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

inline void cmd_simulate(const RunConfig& cfg, const std::string& out_dir,
                         const std::string& config_path) {
  auto samples = ctsim::make_dataset(parse_families(cfg), cfg.dose_fractions,
                                     cfg.n_per_cell, cfg.image_size, cfg.n0,
                                     cfg.seed);
  ctsim::write_dataset(samples, out_dir);
  if (cfg.export_pgm) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char name[96];
      std::snprintf(name, sizeof(name), "sample_%05zu_%s_%.4f", i,
                    ctsim::family_name(samples[i].anatomy), samples[i].y_d);
      ctsim::write_pgm16(samples[i].ldct,
                         (fs::path(out_dir) / (std::string(name) + "_ldct.pgm")).string());
      ctsim::write_pgm16(samples[i].ndct,
                         (fs::path(out_dir) / (std::string(name) + "_ndct.pgm")).string());
    }
  }
  copy_config_into(cfg, config_path, out_dir);
}

// ---------------------------------------------------------------------------
// training commands with resumable traces
// ---------------------------------------------------------------------------

inline int count_trace_rows(const std::string& path) {
  std::ifstream f(path);
  if (!f) return 0;
  int rows = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty() && line.find("loss") == std::string::npos) ++rows;
  return rows;
}

inline void append_trace(const std::string& path, const char* index_name,
                         int start, const std::vector<double>& values) {
  const bool fresh = !fs::exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw DataError("cannot write trace " + path);
  if (fresh) f << index_name << ",loss\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    char line[64];
    std::snprintf(line, sizeof(line), "%d,%.10g\n", start + static_cast<int>(i),
                  values[i]);
    f << line;
  }
}

inline void cmd_train_perception(const RunConfig& cfg, const std::string& out_dir,
                                 const std::string& config_path) {
  auto dataset = load_dataset(cfg.dataset_dir);
  fs::create_directories(out_dir);
  const auto ckpt = (fs::path(out_dir) / cfg.perception_checkpoint).string();
  const auto trace_path = (fs::path(out_dir) / "perception_loss.csv").string();

  perception::TrainPerceptionConfig tc;
  tc.epochs = cfg.percep_epochs;
  tc.batch_sources = cfg.percep_batch;
  tc.lr0 = cfg.percep_lr0;
  tc.prompt_lr_scale = cfg.percep_prompt_lr_scale;
  tc.lr_end = cfg.percep_lr_end;
  tc.momentum = cfg.percep_momentum;
  tc.crop_area = cfg.crop_area;

  Rng rng(cfg.seed);
  perception::PerceptionModel model;
  int start_epoch = 0;
  if (cfg.resume && fs::exists(ckpt)) {
    model = perception::load_perception(perception_config(cfg), ckpt);
    start_epoch = count_trace_rows(trace_path);
  } else {
    if (fs::exists(trace_path)) fs::remove(trace_path);
    model = perception::PerceptionModel(perception_config(cfg), rng);
  }
  std::vector<double> trace;
  perception::run_perception_epochs(model, dataset, tc, rng, trace, start_epoch);
  perception::save_perception(model, ckpt);
  append_trace(trace_path, "epoch", start_epoch, trace);
  perception::export_embeddings(model, dataset,
                                (fs::path(out_dir) / "embeddings.csv").string());
  copy_config_into(cfg, config_path, out_dir);
}

inline void cmd_train_denoiser(const RunConfig& cfg, const std::string& out_dir,
                               const std::string& config_path) {
  const auto percep_path =
      fs::exists(cfg.perception_checkpoint)
          ? cfg.perception_checkpoint
          : (fs::path(out_dir) / cfg.perception_checkpoint).string();
  if (!fs::exists(percep_path))
    throw ConfigError("perception checkpoint not found: " + cfg.perception_checkpoint);
  auto percep = perception::load_perception(perception_config(cfg), percep_path);

  auto dataset = filter_fractions(load_dataset(cfg.dataset_dir), cfg.train_fractions);
  if (dataset.empty())
    throw DataError("no dataset samples match train_fractions");

  fs::create_directories(out_dir);
  const auto ckpt = (fs::path(out_dir) / cfg.denoiser_checkpoint).string();
  const auto trace_path = (fs::path(out_dir) / "denoiser_loss.csv").string();

  diffusion::TrainDenoiserConfig tc;
  tc.steps = cfg.denoiser_steps;
  tc.batch = cfg.denoiser_batch;
  tc.lr = cfg.denoiser_lr;

  Rng rng(cfg.seed + 1);
  dadiff::DenoiserNet net;
  int start_step = 0;
  if (cfg.resume && fs::exists(ckpt)) {
    net = dadiff::load_denoiser(denoiser_config(cfg), ckpt);
    start_step = count_trace_rows(trace_path);
  } else {
    if (fs::exists(trace_path)) fs::remove(trace_path);
    net = dadiff::DenoiserNet(denoiser_config(cfg), rng);
  }
  auto sched = diffusion::build_schedule(cfg.diffusion_steps, cfg.eta);
  auto trace = diffusion::run_denoiser_steps(net, percep, dataset, sched, tc, rng,
                                             start_step);
  dadiff::save_denoiser(net, ckpt);
  append_trace(trace_path, "step", start_step, trace);
  copy_config_into(cfg, config_path, out_dir);
}

// ---------------------------------------------------------------------------
// denoise
// ---------------------------------------------------------------------------

inline std::pair<perception::PerceptionModel, dadiff::DenoiserNet> load_models(
    const RunConfig& cfg, const std::string& out_dir) {
  auto find = [&](const std::string& name) {
    if (fs::exists(name)) return name;
    const auto in_out = (fs::path(out_dir) / name).string();
    if (fs::exists(in_out)) return in_out;
    throw ConfigError("checkpoint not found: " + name);
  };
  auto percep = perception::load_perception(perception_config(cfg),
                                            find(cfg.perception_checkpoint));
  auto net = dadiff::load_denoiser(denoiser_config(cfg), find(cfg.denoiser_checkpoint));
  return {std::move(percep), std::move(net)};
}

// Returns the number of network evaluations (instrumentation hook).
inline long cmd_denoise(const RunConfig& cfg, const std::string& out_dir,
                        const std::vector<std::string>& inputs,
                        const std::string& config_path) {
  if (inputs.empty()) throw ConfigError("denoise: no input samples given");
  auto [percep, net] = load_models(cfg, out_dir);
  auto sched = diffusion::build_schedule(cfg.diffusion_steps, cfg.eta);
  auto plan = diffusion::uniform_plan(cfg.diffusion_steps, cfg.sample_steps,
                                      cfg.stochastic_init);
  fs::create_directories(out_dir);
  net.reset_forward_count();
  Rng root(cfg.seed);

  std::vector<ctsim::CtSample> loaded;
  for (const auto& path : inputs) loaded.push_back(ctsim::read_sample(path));
  std::vector<Image> results(loaded.size());
  parallel_for(static_cast<int>(loaded.size()), [&](int i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    results[i] = diffusion::sample(net, percep, loaded[i].ldct, plan, sched, rng);
  });

  for (std::size_t i = 0; i < loaded.size(); ++i) {
    const auto stem = fs::path(inputs[i]).stem().string();
    ctsim::CtSample out = loaded[i];
    out.ndct = results[i];  // denoised plane first, original input second
    out.ldct = loaded[i].ldct;
    ctsim::write_sample(out, (fs::path(out_dir) / (stem + ".den.cts")).string());
    ctsim::write_pgm16(results[i], (fs::path(out_dir) / (stem + ".den.pgm")).string());
  }
  copy_config_into(cfg, config_path, out_dir);
  return net.forward_count();
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvalSummary {
  metrics::MetricReport report;
  double plcc = 0.0, srocc = 0.0, anatomy_acc = 0.0;
  double seen_input_psnr = 0.0, seen_output_psnr = 0.0;
  double unseen_input_psnr = 0.0, unseen_output_psnr = 0.0;
  int seen_count = 0, unseen_count = 0;
  std::vector<std::string> missing_cells;
};

inline std::string dose_key(double f) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", f);
  return buf;
}

inline EvalSummary cmd_evaluate(const RunConfig& cfg, const std::string& out_dir,
                                const std::string& config_path) {
  const auto test_dir =
      cfg.test_dataset_dir.empty() ? cfg.dataset_dir : cfg.test_dataset_dir;
  auto dataset = load_dataset(test_dir);
  auto [percep, net] = load_models(cfg, out_dir);
  auto sched = diffusion::build_schedule(cfg.diffusion_steps, cfg.eta);
  auto plan = diffusion::uniform_plan(cfg.diffusion_steps, cfg.sample_steps,
                                      cfg.stochastic_init);

  const int n = static_cast<int>(dataset.size());
  std::vector<Image> denoised(n);
  Rng root(cfg.seed);
  parallel_for(n, [&](int i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    denoised[i] = diffusion::sample(net, percep, dataset[i].ldct, plan, sched, rng);
  });

  EvalSummary summary;
  auto in_seen = [&](double y) {
    for (double f : cfg.train_fractions)
      if (std::abs(y - f) < 1e-9) return true;
    return false;
  };
  auto in_unseen = [&](double y) {
    for (double f : cfg.unseen_fractions)
      if (std::abs(y - f) < 1e-9) return true;
    return false;
  };

  fs::create_directories(out_dir);
  std::ofstream csv((fs::path(out_dir) / "report.csv").string());
  if (!csv) throw DataError("cannot write report.csv");
  csv << "sample_id,metric,value,dose,anatomy\n";
  for (int i = 0; i < n; ++i) {
    const auto& s = dataset[i];
    const double psnr_in = metrics::psnr(s.ldct, s.ndct);
    const double psnr_out = metrics::psnr(denoised[i], s.ndct);
    const double ssim_out = metrics::ssim(denoised[i], s.ndct);
    const auto dose = dose_key(s.y_d);
    const auto anat = ctsim::family_name(s.anatomy);
    summary.report.add("psnr_input", dose, anat, psnr_in);
    summary.report.add("psnr", dose, anat, psnr_out);
    summary.report.add("ssim", dose, anat, ssim_out);
    char line[192];
    std::snprintf(line, sizeof(line), "%d,psnr_input,%.10g,%s,%s\n", i, psnr_in,
                  dose.c_str(), anat);
    csv << line;
    std::snprintf(line, sizeof(line), "%d,psnr,%.10g,%s,%s\n", i, psnr_out,
                  dose.c_str(), anat);
    csv << line;
    std::snprintf(line, sizeof(line), "%d,ssim,%.10g,%s,%s\n", i, ssim_out,
                  dose.c_str(), anat);
    csv << line;

    if (in_seen(s.y_d)) {
      summary.seen_input_psnr += psnr_in;
      summary.seen_output_psnr += psnr_out;
      ++summary.seen_count;
    } else if (in_unseen(s.y_d)) {
      summary.unseen_input_psnr += psnr_in;
      summary.unseen_output_psnr += psnr_out;
      ++summary.unseen_count;
    }
  }
  if (summary.seen_count) {
    summary.seen_input_psnr /= summary.seen_count;
    summary.seen_output_psnr /= summary.seen_count;
  }
  if (summary.unseen_count) {
    summary.unseen_input_psnr /= summary.unseen_count;
    summary.unseen_output_psnr /= summary.unseen_count;
  }

  auto ev = perception::eval_perception(percep, dataset);
  summary.plcc = ev.plcc;
  summary.srocc = ev.srocc;
  summary.anatomy_acc = ev.anatomy_acc;

  // expected cells: (train + unseen menus) x families; absent ones are
  // reported as missing rather than zero
  std::vector<double> menu = cfg.train_fractions;
  menu.insert(menu.end(), cfg.unseen_fractions.begin(), cfg.unseen_fractions.end());
  for (double f : menu)
    for (const auto& fam : cfg.families) {
      const auto key = "psnr|" + dose_key(f) + "|" + fam;
      if (!summary.report.cells.count(key))
        summary.missing_cells.push_back(dose_key(f) + "|" + fam);
    }

  nlohmann::json j;
  for (const auto& [key, cell] : summary.report.cells)
    j["cells"][key] = {{"mean", cell.mean()},
                       {"std", cell.stddev()},
                       {"count", cell.values.size()}};
  j["perception"] = {{"plcc", summary.plcc},
                     {"srocc", summary.srocc},
                     {"anatomy_acc", summary.anatomy_acc}};
  j["seen"] = {{"count", summary.seen_count},
               {"input_psnr", summary.seen_input_psnr},
               {"output_psnr", summary.seen_output_psnr}};
  j["unseen"] = {{"count", summary.unseen_count},
                 {"input_psnr", summary.unseen_input_psnr},
                 {"output_psnr", summary.unseen_output_psnr}};
  j["missing"] = summary.missing_cells;
  write_text((fs::path(out_dir) / "summary.json").string(), j.dump(2) + "\n");
  copy_config_into(cfg, config_path, out_dir);
  return summary;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

inline int cmd_verify(const std::string& corrupt_op, std::ostream& os) {
  numcore::corrupt_backward_op() =
      corrupt_op.empty() ? nullptr : corrupt_op.c_str();
  auto suites = verify::run_all_suites();
  numcore::corrupt_backward_op() = nullptr;

  std::vector<std::string> failing;
  for (const auto& s : suites) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-32s max_error=%.3e threshold=%.0e %s\n",
                  s.name.c_str(), s.max_error, s.threshold,
                  s.pass ? "PASS" : "FAIL");
    os << line;
    if (!s.pass) failing.push_back(s.name);
  }
  if (!failing.empty()) {
    os << "failing suites:";
    for (const auto& f : failing) os << " " << f;
    os << "\n";
    return 1;
  }
  os << "all verification suites passed\n";
  return 0;
}

}  // namespace founddiff::cli

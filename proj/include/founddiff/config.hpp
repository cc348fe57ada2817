#pragma once

// Flat key=value run configuration. '#' starts a comment; unknown keys are
// rejected; parse -> serialize -> parse is the identity.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "founddiff/errors.hpp"

namespace founddiff::cli {

struct RunConfig {
  // simulation
  std::vector<std::string> families{"abdomen", "chest", "head"};
  std::vector<double> dose_fractions{1.0 / 2, 1.0 / 3, 1.0 / 4,  1.0 / 5,
                                     1.0 / 6, 1.0 / 8, 1.0 / 10, 1.0 / 20};
  int n_per_cell = 8;
  int image_size = 64;
  double n0 = 1e5;
  std::uint64_t seed = 1234;
  bool export_pgm = false;

  // perception
  int d_e = 32;
  double tau = 0.1;
  int percep_epochs = 30;
  int percep_batch = 4;
  double percep_lr0 = 1e-3;
  double percep_prompt_lr_scale = 30.0;
  double percep_lr_end = 1e-5;
  double percep_momentum = 0.9;
  double crop_area = 0.75;

  // denoiser network
  int levels = 3;
  std::vector<int> widths{16, 32, 64};
  int n_state = 8;
  int t_dim = 16;
  int scan_directions = 4;
  bool use_dose_condition = true;
  bool use_anatomy_condition = true;

  // diffusion
  int diffusion_steps = 100;
  double eta = 0.2;
  int sample_steps = 2;
  bool stochastic_init = false;

  // dose menus
  std::vector<double> train_fractions{1.0 / 2, 1.0 / 4, 1.0 / 6, 1.0 / 10};
  std::vector<double> unseen_fractions{1.0 / 3, 1.0 / 5, 1.0 / 8, 1.0 / 20};

  // denoiser training
  int denoiser_steps = 2000;
  int denoiser_batch = 2;
  double denoiser_lr = 2e-4;

  // paths
  std::string dataset_dir = "data";
  std::string test_dataset_dir;  // defaults to dataset_dir when empty
  std::string perception_checkpoint = "perception.ckpt";
  std::string denoiser_checkpoint = "denoiser.ckpt";
  bool resume = false;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double parse_fraction(const std::string& key, const std::string& tok) {
  const auto slash = tok.find('/');
  try {
    if (slash != std::string::npos) {
      const double num = std::stod(tok.substr(0, slash));
      const double den = std::stod(tok.substr(slash + 1));
      return num / den;
    }
    return std::stod(tok);
  } catch (...) {
    throw ConfigError(key + ": cannot parse value '" + tok + "'");
  }
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string tok;
  std::istringstream ss(v);
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct FieldBinding {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, FieldBinding>& field_bindings() {
  static const std::map<std::string, FieldBinding> table = [] {
    std::map<std::string, FieldBinding> m;
    auto add = [&m](const std::string& key, auto setter, auto getter) {
      m[key] = FieldBinding{setter, getter};
    };
    auto int_field = [&](const std::string& key, int RunConfig::*f) {
      add(key,
          [f](RunConfig& c, const std::string& k, const std::string& v) {
            try {
              c.*f = std::stoi(v);
            } catch (...) {
              throw ConfigError(k + ": cannot parse integer '" + v + "'");
            }
          },
          [f](const RunConfig& c) { return std::to_string(c.*f); });
    };
    auto dbl_field = [&](const std::string& key, double RunConfig::*f) {
      add(key,
          [f](RunConfig& c, const std::string& k, const std::string& v) {
            c.*f = parse_fraction(k, v);
          },
          [f](const RunConfig& c) { return format_double(c.*f); });
    };
    auto bool_field = [&](const std::string& key, bool RunConfig::*f) {
      add(key,
          [f](RunConfig& c, const std::string& k, const std::string& v) {
            if (v == "true" || v == "1")
              c.*f = true;
            else if (v == "false" || v == "0")
              c.*f = false;
            else
              throw ConfigError(k + ": expected true/false, got '" + v + "'");
          },
          [f](const RunConfig& c) { return c.*f ? "true" : "false"; });
    };
    auto str_field = [&](const std::string& key, std::string RunConfig::*f) {
      add(key,
          [f](RunConfig& c, const std::string&, const std::string& v) { c.*f = v; },
          [f](const RunConfig& c) { return c.*f; });
    };
    auto frac_list_field = [&](const std::string& key,
                               std::vector<double> RunConfig::*f) {
      add(key,
          [f](RunConfig& c, const std::string& k, const std::string& v) {
            (c.*f).clear();
            for (const auto& tok : split_list(v))
              (c.*f).push_back(parse_fraction(k, tok));
          },
          [f](const RunConfig& c) {
            std::string out;
            for (std::size_t i = 0; i < (c.*f).size(); ++i)
              out += (i ? "," : "") + format_double((c.*f)[i]);
            return out;
          });
    };

    add("families",
        [](RunConfig& c, const std::string&, const std::string& v) {
          c.families = split_list(v);
        },
        [](const RunConfig& c) {
          std::string out;
          for (std::size_t i = 0; i < c.families.size(); ++i)
            out += (i ? "," : "") + c.families[i];
          return out;
        });
    frac_list_field("dose_fractions", &RunConfig::dose_fractions);
    int_field("n_per_cell", &RunConfig::n_per_cell);
    int_field("image_size", &RunConfig::image_size);
    dbl_field("n0", &RunConfig::n0);
    add("seed",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.seed = std::stoull(v);
          } catch (...) {
            throw ConfigError(k + ": cannot parse seed '" + v + "'");
          }
        },
        [](const RunConfig& c) { return std::to_string(c.seed); });
    bool_field("export_pgm", &RunConfig::export_pgm);

    int_field("d_e", &RunConfig::d_e);
    dbl_field("tau", &RunConfig::tau);
    int_field("percep_epochs", &RunConfig::percep_epochs);
    int_field("percep_batch", &RunConfig::percep_batch);
    dbl_field("percep_lr0", &RunConfig::percep_lr0);
    dbl_field("percep_prompt_lr_scale", &RunConfig::percep_prompt_lr_scale);
    dbl_field("percep_lr_end", &RunConfig::percep_lr_end);
    dbl_field("percep_momentum", &RunConfig::percep_momentum);
    dbl_field("crop_area", &RunConfig::crop_area);

    int_field("levels", &RunConfig::levels);
    add("widths",
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.widths.clear();
          for (const auto& tok : split_list(v)) {
            try {
              c.widths.push_back(std::stoi(tok));
            } catch (...) {
              throw ConfigError(k + ": cannot parse width '" + tok + "'");
            }
          }
        },
        [](const RunConfig& c) {
          std::string out;
          for (std::size_t i = 0; i < c.widths.size(); ++i)
            out += (i ? "," : "") + std::to_string(c.widths[i]);
          return out;
        });
    int_field("n_state", &RunConfig::n_state);
    int_field("t_dim", &RunConfig::t_dim);
    int_field("scan_directions", &RunConfig::scan_directions);
    bool_field("use_dose_condition", &RunConfig::use_dose_condition);
    bool_field("use_anatomy_condition", &RunConfig::use_anatomy_condition);

    int_field("diffusion_steps", &RunConfig::diffusion_steps);
    dbl_field("eta", &RunConfig::eta);
    int_field("sample_steps", &RunConfig::sample_steps);
    bool_field("stochastic_init", &RunConfig::stochastic_init);

    frac_list_field("train_fractions", &RunConfig::train_fractions);
    frac_list_field("unseen_fractions", &RunConfig::unseen_fractions);

    int_field("denoiser_steps", &RunConfig::denoiser_steps);
    int_field("denoiser_batch", &RunConfig::denoiser_batch);
    dbl_field("denoiser_lr", &RunConfig::denoiser_lr);

    str_field("dataset_dir", &RunConfig::dataset_dir);
    str_field("test_dataset_dir", &RunConfig::test_dataset_dir);
    str_field("perception_checkpoint", &RunConfig::perception_checkpoint);
    str_field("denoiser_checkpoint", &RunConfig::denoiser_checkpoint);
    bool_field("resume", &RunConfig::resume);
    return m;
  }();
  return table;
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  auto check_fractions = [](const std::string& key, const std::vector<double>& fs) {
    if (fs.empty()) throw ConfigError(key + ": must not be empty");
    for (double f : fs)
      if (!(f > 0.0 && f <= 1.0))
        throw ConfigError(key + ": fraction " + detail::format_double(f) +
                          " outside (0, 1]");
  };
  check_fractions("dose_fractions", c.dose_fractions);
  check_fractions("train_fractions", c.train_fractions);
  check_fractions("unseen_fractions", c.unseen_fractions);
  if (c.families.empty()) throw ConfigError("families: must not be empty");
  for (const auto& f : c.families)
    if (f != "abdomen" && f != "chest" && f != "head")
      throw ConfigError("families: unknown family '" + f + "'");
  if (c.n_per_cell < 1) throw ConfigError("n_per_cell: must be >= 1");
  if (c.image_size < 16) throw ConfigError("image_size: must be >= 16");
  if (c.n0 <= 0.0) throw ConfigError("n0: must be positive");
  if (c.d_e < 1) throw ConfigError("d_e: must be >= 1");
  if (c.tau <= 0.0) throw ConfigError("tau: must be positive");
  if (c.crop_area <= 0.0 || c.crop_area > 1.0)
    throw ConfigError("crop_area: must be in (0, 1]");
  if (c.levels < 1 || static_cast<int>(c.widths.size()) != c.levels)
    throw ConfigError("widths: must list one width per level");
  if (c.diffusion_steps < 1) throw ConfigError("diffusion_steps: must be >= 1");
  if (c.eta < 0.0) throw ConfigError("eta: must be >= 0");
  if (c.sample_steps < 1 || c.sample_steps > c.diffusion_steps)
    throw ConfigError("sample_steps: must be in [1, diffusion_steps]");
  if (c.denoiser_steps < 1) throw ConfigError("denoiser_steps: must be >= 1");
  if (c.denoiser_batch < 1) throw ConfigError("denoiser_batch: must be >= 1");
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  std::istringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key=value, got '" + line + "'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    const auto& table = detail::field_bindings();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key: " + key);
    it->second.set(c, key, value);
  }
  validate(c);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

inline std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& [key, binding] : detail::field_bindings())
    out += key + " = " + binding.get(c) + "\n";
  return out;
}

}  // namespace founddiff::cli

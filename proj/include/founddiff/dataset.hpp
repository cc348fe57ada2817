#pragma once

// Dataset synthesis and on-disk formats: paired LDCT/NDCT samples in a
// fixed HU window, one "CTS1" file per sample plus a manifest, and 16-bit
// PGM export for visual inspection.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "founddiff/errors.hpp"
#include "founddiff/image.hpp"
#include "founddiff/parallel.hpp"
#include "founddiff/phantom.hpp"
#include "founddiff/projection.hpp"
#include "founddiff/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "sample files are little-endian");

namespace founddiff::ctsim {

struct DoseLevel {
  double fraction = 1.0;  // 1 = normal dose

  void validate() const {
    if (!(fraction > 0.0 && fraction <= 1.0))
      throw ConfigError("dose fraction must be in (0, 1]");
  }
};

// The eight-level menu used throughout.
inline std::vector<double> full_dose_menu() {
  return {1.0 / 2, 1.0 / 3, 1.0 / 4, 1.0 / 5, 1.0 / 6, 1.0 / 8, 1.0 / 10, 1.0 / 20};
}

// HU conversion anchored at the phantom's body attenuation, then the fixed
// [-1000, 2000] HU window mapped onto [0, 1].
inline double hu_from_mu(double mu, double mu_water) {
  return 1000.0 * (mu - mu_water) / mu_water;
}
inline double window_from_hu(double hu) {
  const double v = (hu + 1000.0) / 3000.0;
  return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
}
inline double hu_from_window(double v) { return v * 3000.0 - 1000.0; }

inline Image window_image(const Image& mu_img, double mu_water) {
  Image out(mu_img.height, mu_img.width);
  for (std::size_t i = 0; i < mu_img.size(); ++i)
    out.data[i] = window_from_hu(hu_from_mu(mu_img.data[i], mu_water));
  return out;
}

struct CtSample {
  Image ndct;  // window-normalized [0,1]
  Image ldct;
  double y_d = 1.0;
  Family anatomy = Family::abdomen;
  std::uint64_t seed = 0;
  double n0 = 0.0;
  ScanGeometry geometry;
};

// One fresh phantom per (family, fraction, index) cell: analytic sinogram,
// noiseless FBP as NDCT, dose-noised FBP as LDCT. Deterministic under seed
// regardless of worker count.
inline std::vector<CtSample> make_dataset(const std::vector<Family>& families,
                                          const std::vector<double>& dose_fractions,
                                          int n_per_cell, int size, double n0,
                                          std::uint64_t seed) {
  if (families.empty() || dose_fractions.empty() || n_per_cell < 1)
    throw ConfigError("make_dataset: families, fractions and count must be nonempty");
  for (double f : dose_fractions) DoseLevel{f}.validate();
  if (n0 <= 0.0) throw ConfigError("make_dataset: n0 must be positive");

  const ScanGeometry geom = default_geometry(size);
  const int cells = static_cast<int>(families.size() * dose_fractions.size()) * n_per_cell;
  std::vector<CtSample> out(cells);
  Rng root(seed);

  parallel_for(cells, [&](int cell) {
    const int per_family = static_cast<int>(dose_fractions.size()) * n_per_cell;
    const Family family = families[cell / per_family];
    const double fraction = dose_fractions[(cell % per_family) / n_per_cell];
    Rng rng = root.fork(static_cast<std::uint64_t>(cell));

    const EllipsePhantom phantom = make_phantom(family, rng);
    const Sinogram clean = project_analytic(phantom, geom);
    const Sinogram noisy = inject_dose_noise(clean, fraction, n0, rng);

    CtSample& s = out[cell];
    s.ndct = window_image(fbp(clean, geom, size), phantom.mu_body);
    s.ldct = window_image(fbp(noisy, geom, size), phantom.mu_body);
    s.y_d = fraction;
    s.anatomy = family;
    s.seed = rng.seed();
    s.n0 = n0;
    s.geometry = geom;
  });
  return out;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// "CTS1 H W y_d anatomy seed\n" followed by the ndct then ldct planes as raw
// little-endian 32-bit floats.
inline void write_sample(const CtSample& s, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write sample file: " + path);
  char header[160];
  std::snprintf(header, sizeof(header), "CTS1 %d %d %.17g %s %llu\n", s.ndct.height,
                s.ndct.width, s.y_d, family_name(s.anatomy),
                static_cast<unsigned long long>(s.seed));
  f << header;
  auto write_plane = [&f](const Image& img) {
    std::vector<float> plane(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) plane[i] = static_cast<float>(img.data[i]);
    f.write(reinterpret_cast<const char*>(plane.data()),
            static_cast<std::streamsize>(plane.size() * sizeof(float)));
  };
  write_plane(s.ndct);
  write_plane(s.ldct);
  if (!f) throw DataError("short write on sample file: " + path);
}

inline CtSample read_sample(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open sample file: " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("missing header in " + path);
  std::istringstream hs(line);
  std::string magic, anatomy;
  int h = 0, w = 0;
  double y_d = 0.0;
  unsigned long long seed = 0;
  hs >> magic >> h >> w >> y_d >> anatomy >> seed;
  if (magic != "CTS1" || h < 1 || w < 1 || hs.fail())
    throw DataError("bad CTS1 header in " + path);
  CtSample s;
  s.y_d = y_d;
  s.anatomy = family_from_name(anatomy);
  s.seed = seed;
  auto read_plane = [&](Image& img) {
    img = Image(h, w);
    std::vector<float> plane(img.size());
    f.read(reinterpret_cast<char*>(plane.data()),
           static_cast<std::streamsize>(plane.size() * sizeof(float)));
    if (!f) throw DataError("truncated sample file: " + path);
    for (std::size_t i = 0; i < plane.size(); ++i) img.data[i] = plane[i];
  };
  read_plane(s.ndct);
  read_plane(s.ldct);
  return s;
}

// Manifest: one line per sample, "path y_d anatomy".
inline void write_manifest(const std::vector<std::string>& paths,
                           const std::vector<CtSample>& samples,
                           const std::string& manifest_path) {
  std::ofstream f(manifest_path);
  if (!f) throw DataError("cannot write manifest: " + manifest_path);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char line[256];
    std::snprintf(line, sizeof(line), "%s %.17g %s\n", paths[i].c_str(),
                  samples[i].y_d, family_name(samples[i].anatomy));
    f << line;
  }
}

inline std::vector<CtSample> read_manifest(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw DataError("cannot open manifest: " + manifest_path);
  const auto dir = std::filesystem::path(manifest_path).parent_path();
  std::vector<CtSample> samples;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string rel;
    ls >> rel;
    if (rel.empty()) continue;
    samples.push_back(read_sample((dir / rel).string()));
  }
  if (samples.empty()) throw DataError("empty manifest: " + manifest_path);
  return samples;
}

// Writes the dataset directory: sample files, manifest, nothing else.
inline void write_dataset(const std::vector<CtSample>& samples,
                          const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> names;
  names.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[96];
    std::snprintf(name, sizeof(name), "sample_%05zu_%s_%.4f.cts", i,
                  family_name(samples[i].anatomy), samples[i].y_d);
    names.emplace_back(name);
    write_sample(samples[i], (std::filesystem::path(dir) / name).string());
  }
  write_manifest(names, samples, (std::filesystem::path(dir) / "manifest.txt").string());
}

// 16-bit binary PGM (maxval 65535, big-endian samples) of a [0,1] image.
inline void write_pgm16(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write PGM: " + path);
  f << "P5\n" << img.width << " " << img.height << "\n65535\n";
  for (double v : img.data) {
    const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    const auto q = static_cast<std::uint16_t>(std::lround(c * 65535.0));
    const unsigned char bytes[2] = {static_cast<unsigned char>(q >> 8),
                                    static_cast<unsigned char>(q & 0xff)};
    f.write(reinterpret_cast<const char*>(bytes), 2);
  }
}

}  // namespace founddiff::ctsim

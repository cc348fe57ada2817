#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "founddiff/dataset.hpp"
#include "founddiff/metrics.hpp"
#include "founddiff/phantom.hpp"
#include "founddiff/projection.hpp"

using namespace founddiff;
using namespace founddiff::ctsim;

namespace {

double rel_rmse(const Sinogram& a, const Sinogram& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    num += d * d;
    den += b.data[i] * b.data[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("head phantom peaks on the ring annulus") {
  Rng rng(7);
  auto ph = make_phantom(Family::head, rng);
  const auto& skull = ph.ellipses[0];
  const auto& brain = ph.ellipses[1];
  double best = -1.0, best_x = 0.0, best_y = 0.0;
  for (int i = 0; i < 200; ++i) {
    for (int j = 0; j < 200; ++j) {
      const double x = -1.0 + 2.0 * (j + 0.5) / 200;
      const double y = -1.0 + 2.0 * (i + 0.5) / 200;
      const double v = ph.attenuation_at(x, y);
      if (v > best) {
        best = v;
        best_x = x;
        best_y = y;
      }
    }
  }
  REQUIRE(best >= 1.5 * ph.mu_body);
  REQUIRE(skull.contains(best_x, best_y));
  REQUIRE_FALSE(brain.contains(best_x, best_y));
}

TEST_CASE("chest lung centers attenuate below body") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng(seed);
    auto ph = make_phantom(Family::chest, rng);
    // ellipses[1], ellipses[2] are the lungs
    for (int k = 1; k <= 2; ++k) {
      const auto& lung = ph.ellipses[k];
      REQUIRE(ph.attenuation_at(lung.cx, lung.cy) < ph.mu_body);
    }
  }
}

TEST_CASE("phantoms always hold at least two ellipses and stay valid") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    for (Family f : {Family::abdomen, Family::chest, Family::head}) {
      auto ph = make_phantom(f, rng);
      REQUIRE(ph.ellipses.size() >= 2);
      REQUIRE_NOTHROW(ph.validate());
      // attenuation nonnegative on a coarse grid
      for (int i = 0; i < 64; ++i)
        for (int j = 0; j < 64; ++j) {
          const double x = -1.0 + 2.0 * (j + 0.5) / 64;
          const double y = -1.0 + 2.0 * (i + 0.5) / 64;
          REQUIRE(ph.attenuation_at(x, y) >= 0.0);
        }
    }
  }
}

TEST_CASE("rasterize centered circle") {
  EllipsePhantom ph;
  ph.ellipses.push_back({0, 0, 0.5, 0.5, 0.0, 1.0});
  ph.ellipses.push_back({0, 0, 0.1, 0.1, 0.0, 0.0});
  auto img = rasterize(ph, 64);
  REQUIRE(img.at(32, 32) == 1.0);
  REQUIRE(img.at(0, 0) == 0.0);
  REQUIRE(img.at(63, 63) == 0.0);
}

TEST_CASE("rasterize is additive over overlapping ellipses") {
  EllipsePhantom ph;
  ph.ellipses.push_back({0, 0, 0.4, 0.3, 0.2, 0.3});
  ph.ellipses.push_back({0.1, 0.0, 0.3, 0.4, 1.0, 0.2});
  auto img = rasterize(ph, 64);
  bool saw_overlap = false;
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 64; ++j) {
      const double x = pixel_to_x(j, 64), y = pixel_to_y(i, 64);
      const bool in0 = ph.ellipses[0].contains(x, y);
      const bool in1 = ph.ellipses[1].contains(x, y);
      const double expect = (in0 ? 0.3 : 0.0) + (in1 ? 0.2 : 0.0);
      REQUIRE(img.at(i, j) == Catch::Approx(expect).margin(1e-15));
      saw_overlap = saw_overlap || (in0 && in1);
    }
  REQUIRE(saw_overlap);
}

TEST_CASE("rotating an ellipse by pi leaves the raster unchanged") {
  EllipsePhantom a, b;
  a.ellipses.push_back({0.1, -0.2, 0.5, 0.25, 0.7, 1.0});
  a.ellipses.push_back({0, 0, 0.05, 0.05, 0, 0.1});
  b = a;
  b.ellipses[0].theta += 3.14159265358979323846;
  auto ia = rasterize(a, 96), ib = rasterize(b, 96);
  for (std::size_t i = 0; i < ia.size(); ++i)
    REQUIRE(ia.data[i] == Catch::Approx(ib.data[i]).margin(1e-12));
}

TEST_CASE("analytic projector chord values") {
  EllipsePhantom circle;
  circle.ellipses.push_back({0, 0, 0.5, 0.5, 0.0, 1.0});
  circle.ellipses.push_back({0, 0, 0.01, 0.01, 0.0, 0.0});
  ScanGeometry g;
  g.n_views = 2;
  g.n_detectors = 5;
  g.detector_spacing = 0.5;  // detectors at -1, -0.5, 0, 0.5, 1
  auto sino = project_analytic(circle, g);
  REQUIRE(sino.at(0, 2) == Catch::Approx(1.0).margin(1e-14));  // diameter
  REQUIRE(sino.at(0, 3) == 0.0);                               // tangent ray
  REQUIRE(sino.at(0, 4) == 0.0);

  EllipsePhantom ell;
  ell.ellipses.push_back({0, 0, 0.6, 0.3, 0.0, 1.0});
  ell.ellipses.push_back({0, 0, 0.01, 0.01, 0.0, 0.0});
  auto sino2 = project_analytic(ell, g);
  // view 0 is the vertical ray family (normal along +x): chord through the
  // center runs along the minor axis
  REQUIRE(sino2.at(0, 2) == Catch::Approx(0.6).margin(1e-14));
}

TEST_CASE("noiseless sinogram of a nonnegative phantom is nonnegative") {
  Rng rng(11);
  for (Family f : {Family::abdomen, Family::chest, Family::head}) {
    auto ph = make_phantom(f, rng);
    auto sino = project_analytic(ph, default_geometry(64));
    for (double v : sino.data) REQUIRE(v >= -1e-12);
  }
}

TEST_CASE("numeric projector: zero image, oracle agreement, convergence") {
  Rng rng(3);
  auto ph = make_phantom(Family::abdomen, rng);
  ScanGeometry g;
  g.n_views = 180;
  g.n_detectors = 257;
  g.detector_spacing = 2.2 / 257;

  Image zero(64, 64);
  auto zs = project_numeric(zero, g, 1.0 / 64);
  for (double v : zs.data) REQUIRE(v == 0.0);

  const int size = 256;
  auto img = rasterize(ph, size);
  auto reference = project_analytic(ph, g);
  const double fine_step = 2.0 / size / 4.0;  // quarter pixel
  auto fine = project_numeric(img, g, fine_step);
  const double fine_err = rel_rmse(fine, reference);
  CAPTURE(fine_err);
  REQUIRE(fine_err < 0.02);

  auto coarse = project_numeric(img, g, 2.0 * fine_step);
  const double coarse_err = rel_rmse(coarse, reference);
  CAPTURE(coarse_err);
  REQUIRE(coarse_err < 4.0 * fine_err);

  REQUIRE_THROWS_AS(project_numeric(img, g, 1.0), Error);
}

TEST_CASE("dose noise: moments, clamping, and variance ordering") {
  ScanGeometry g;
  g.n_views = 100;
  g.n_detectors = 101;
  g.detector_spacing = 2.2 / 101;
  Sinogram flat(g.n_views, g.n_detectors);  // p = 0 everywhere

  Rng rng(42);
  auto noisy = inject_dose_noise(flat, 1.0, 1e6, rng);
  double m = 0.0, v = 0.0;
  for (double p : noisy.data) m += p;
  m /= static_cast<double>(noisy.data.size());
  for (double p : noisy.data) v += (p - m) * (p - m);
  v /= static_cast<double>(noisy.data.size() - 1);
  REQUIRE(std::abs(m) < 5e-5);  // 4 sigma of the mean estimate
  REQUIRE(std::sqrt(v) == Catch::Approx(1e-3).epsilon(0.05));

  // photon floor
  Rng rf(1);
  REQUIRE_THROWS_AS(inject_dose_noise(flat, 0.5, 10.0, rf), DataError);

  // c = 0 bins clamp to ln(N0 * fraction)
  Sinogram opaque(2, 101);
  for (auto& p : opaque.data) p = 30.0;
  Rng rc(2);
  auto clamped = inject_dose_noise(opaque, 1.0, 50.0, rc);
  for (double p : clamped.data) {
    REQUIRE(std::isfinite(p));
    REQUIRE(p == Catch::Approx(std::log(50.0)).margin(1e-12));
  }

  // variance of (p_hat - p) strictly increases as the fraction decreases
  Rng rp(5);
  auto ph = make_phantom(Family::abdomen, rp);
  auto sino = project_analytic(ph, g);
  std::vector<double> variances;
  for (double f : full_dose_menu()) {
    double acc = 0.0;
    int count = 0;
    for (int trial = 0; trial < 10; ++trial) {
      Rng rt(1000 + trial);
      auto n = inject_dose_noise(sino, f, 1e5, rt);
      for (std::size_t i = 0; i < n.data.size(); ++i) {
        const double d = n.data[i] - sino.data[i];
        acc += d * d;
        ++count;
      }
    }
    variances.push_back(acc / count);
  }
  for (std::size_t i = 1; i < variances.size(); ++i)
    REQUIRE(variances[i] > variances[i - 1]);  // menu is ordered by decreasing dose
}

TEST_CASE("ramp kernel sums to approximately zero") {
  const double spacing = 2.2 / 257;
  auto h = ramp_kernel(257, spacing);
  double s = 0.0;
  for (double v : h) s += v;
  REQUIRE(std::abs(s) * spacing * spacing < 1e-3);
}

TEST_CASE("fbp of zero sinogram is zero") {
  ScanGeometry g = default_geometry(64);
  Sinogram zero(g.n_views, g.n_detectors);
  auto img = fbp(zero, g, 64);
  for (double v : img.data) REQUIRE(v == 0.0);
}

TEST_CASE("fbp reconstructs the analytic sinogram of a circle phantom") {
  EllipsePhantom ph;
  ph.ellipses.push_back({0.05, -0.1, 0.55, 0.45, 0.3, 1.0});
  ph.ellipses.push_back({0.0, 0.0, 0.2, 0.15, 0.0, 0.4});
  ScanGeometry g;
  g.n_views = 360;
  g.n_detectors = 257;
  g.detector_spacing = 2.2 / 257;
  const int size = 256;
  auto recon = fbp(project_analytic(ph, g), g, size);
  auto truth = rasterize(ph, size);
  double num = 0.0;
  int count = 0;
  double peak = 0.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double x = pixel_to_x(j, size), y = pixel_to_y(i, size);
      if (x * x + y * y >= 1.0) continue;
      const double d = recon.at(i, j) - truth.at(i, j);
      num += d * d;
      peak = std::max(peak, truth.at(i, j));
      ++count;
    }
  const double psnr_disk = 10.0 * std::log10(peak * peak / (num / count));
  CAPTURE(psnr_disk);
  REQUIRE(psnr_disk >= 25.0);
}

TEST_CASE("windowing round-trips HU exactly on its range") {
  for (double hu : {-1000.0, -500.0, 0.0, 123.456, 1999.99, 2000.0}) {
    const double v = window_from_hu(hu);
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
    REQUIRE(hu_from_window(v) == Catch::Approx(hu).margin(1e-12));
  }
  REQUIRE(window_from_hu(-2000.0) == 0.0);
  REQUIRE(window_from_hu(9000.0) == 1.0);
}

TEST_CASE("make_dataset: counting, determinism, and dose monotonicity") {
  const std::vector<Family> families{Family::abdomen, Family::chest, Family::head};
  auto a = make_dataset(families, full_dose_menu(), 2, 32, 1e5, 99);
  REQUIRE(a.size() == 48);
  int per_family[3] = {0, 0, 0};
  for (const auto& s : a) {
    ++per_family[static_cast<int>(s.anatomy)];
    REQUIRE(s.ndct.same_shape(s.ldct));
    for (double v : s.ndct.data) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }
  for (int c : per_family) REQUIRE(c == 16);

  auto b = make_dataset(families, full_dose_menu(), 2, 32, 1e5, 99);
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].ndct.data == b[i].ndct.data);
    REQUIRE(a[i].ldct.data == b[i].ldct.data);
  }

  const std::vector<double> menu{1.0 / 2, 1.0 / 4, 1.0 / 10, 1.0 / 20};
  auto mono = make_dataset({Family::abdomen}, menu, 10, 64, 1e5, 7);
  std::vector<double> mean_psnr(menu.size(), 0.0);
  for (std::size_t i = 0; i < mono.size(); ++i)
    mean_psnr[i / 10] += metrics::psnr(mono[i].ldct, mono[i].ndct) / 10.0;
  CAPTURE(mean_psnr);
  for (std::size_t i = 1; i < mean_psnr.size(); ++i)
    REQUIRE(mean_psnr[i] < mean_psnr[i - 1]);
}

TEST_CASE("sample files and manifest round-trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "founddiff_ctsim_test";
  fs::remove_all(dir);
  auto samples = make_dataset({Family::chest}, {0.5, 0.1}, 2, 32, 1e5, 5);
  write_dataset(samples, dir.string());
  REQUIRE(fs::exists(dir / "manifest.txt"));

  auto loaded = read_manifest((dir / "manifest.txt").string());
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    REQUIRE(loaded[i].y_d == samples[i].y_d);
    REQUIRE(loaded[i].anatomy == samples[i].anatomy);
    REQUIRE(loaded[i].seed == samples[i].seed);
    for (std::size_t k = 0; k < samples[i].ndct.size(); ++k) {
      REQUIRE(loaded[i].ndct.data[k] ==
              static_cast<double>(static_cast<float>(samples[i].ndct.data[k])));
      REQUIRE(loaded[i].ldct.data[k] ==
              static_cast<double>(static_cast<float>(samples[i].ldct.data[k])));
    }
  }

  write_pgm16(samples[0].ldct, (dir / "preview.pgm").string());
  REQUIRE(fs::file_size(dir / "preview.pgm") > 32u * 32u * 2u);
  fs::remove_all(dir);
}

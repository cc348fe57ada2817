#pragma once

// Parallel-beam projection (closed-form and ray-driven), photon-count dose
// noise, and filtered backprojection.

#include <cmath>
#include <vector>

#include "founddiff/errors.hpp"
#include "founddiff/image.hpp"
#include "founddiff/parallel.hpp"
#include "founddiff/phantom.hpp"
#include "founddiff/rng.hpp"

namespace founddiff::ctsim {

struct ScanGeometry {
  int n_views = 180;
  int n_detectors = 257;
  double detector_spacing = 2.2 / 257;

  void validate() const {
    if (n_views < 1) throw Error("geometry: n_views must be >= 1");
    if (n_detectors < 1 || n_detectors % 2 == 0)
      throw Error("geometry: n_detectors must be odd and positive");
    if (n_detectors * detector_spacing < 2.0)
      throw Error("geometry: detector row does not span the unit disk");
  }

  double view_angle(int k) const { return 3.14159265358979323846 * k / n_views; }
  double detector_s(int m) const {
    return (m - (n_detectors - 1) / 2) * detector_spacing;
  }
};

inline ScanGeometry default_geometry(int image_size) {
  ScanGeometry g;
  g.n_views = std::max(90, (image_size * 7) / 5);
  int nd = std::max(65, (image_size * 3) / 2);
  if (nd % 2 == 0) ++nd;
  g.n_detectors = nd;
  g.detector_spacing = 2.2 / nd;
  return g;
}

struct Sinogram {
  int n_views = 0;
  int n_detectors = 0;
  std::vector<double> data;

  Sinogram() = default;
  Sinogram(int v, int d)
      : n_views(v), n_detectors(d), data(static_cast<std::size_t>(v) * d, 0.0) {}

  double& at(int v, int d) { return data[static_cast<std::size_t>(v) * n_detectors + d]; }
  double at(int v, int d) const { return data[static_cast<std::size_t>(v) * n_detectors + d]; }
};

// Exact Radon transform of the ellipse set: a ray at signed distance s from
// the mapped circle contributes 2*rho*(a*b/w^2)*sqrt(w^2 - s'^2) where
// w^2 = a^2 cos^2(phi-theta) + b^2 sin^2(phi-theta).
inline Sinogram project_analytic(const EllipsePhantom& phantom,
                                 const ScanGeometry& geom) {
  geom.validate();
  Sinogram sino(geom.n_views, geom.n_detectors);
  for (int k = 0; k < geom.n_views; ++k) {
    const double phi = geom.view_angle(k);
    const double c = std::cos(phi), sn = std::sin(phi);
    for (const auto& e : phantom.ellipses) {
      const double center_s = e.cx * c + e.cy * sn;
      const double ca = std::cos(phi - e.theta), sa = std::sin(phi - e.theta);
      const double w2 = e.a * e.a * ca * ca + e.b * e.b * sa * sa;
      const double scale = 2.0 * e.rho * e.a * e.b / w2;
      for (int m = 0; m < geom.n_detectors; ++m) {
        const double sp = geom.detector_s(m) - center_s;
        const double under = w2 - sp * sp;
        if (under > 0.0) sino.at(k, m) += scale * std::sqrt(under);
      }
    }
  }
  return sino;
}

// Ray-driven projection of a sampled image: bilinear interpolation along the
// ray, trapezoidal accumulation scaled by the step.
inline Sinogram project_numeric(const Image& img, const ScanGeometry& geom,
                                double step) {
  geom.validate();
  const double half_pixel = 1.0 / std::min(img.height, img.width);
  if (step > half_pixel + 1e-12)
    throw Error("project_numeric: step must be <= half pixel width");

  auto sample = [&img](double x, double y) -> double {
    const double fx = (x + 1.0) * img.width / 2.0 - 0.5;
    const double fy = (1.0 - y) * img.height / 2.0 - 0.5;
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    const double tx = fx - x0, ty = fy - y0;
    double acc = 0.0;
    for (int dy = 0; dy < 2; ++dy) {
      const int yy = y0 + dy;
      if (yy < 0 || yy >= img.height) continue;
      const double wy = dy ? ty : 1.0 - ty;
      for (int dx = 0; dx < 2; ++dx) {
        const int xx = x0 + dx;
        if (xx < 0 || xx >= img.width) continue;
        acc += wy * (dx ? tx : 1.0 - tx) * img.at(yy, xx);
      }
    }
    return acc;
  };

  Sinogram sino(geom.n_views, geom.n_detectors);
  const double tmax = 1.45;  // covers the [-1,1]^2 support from any ray
  const int n_samples = static_cast<int>(std::ceil(2.0 * tmax / step));
  parallel_for(geom.n_views, [&](int k) {
    const double phi = geom.view_angle(k);
    const double nx = std::cos(phi), ny = std::sin(phi);
    const double dx = -ny, dy = nx;
    for (int m = 0; m < geom.n_detectors; ++m) {
      const double s = geom.detector_s(m);
      double acc = 0.0;
      for (int i = 0; i <= n_samples; ++i) {
        const double t = -tmax + 2.0 * tmax * i / n_samples;
        const double v = sample(s * nx + t * dx, s * ny + t * dy);
        acc += (i == 0 || i == n_samples) ? 0.5 * v : v;
      }
      sino.at(k, m) = acc * (2.0 * tmax / n_samples);
    }
  });
  return sino;
}

// Photon-count noise at a dose fraction: counts ~ Poisson(N0*f*exp(-p)),
// re-logged with a max(c,1) guard.
inline Sinogram inject_dose_noise(const Sinogram& sino, double dose_fraction,
                                  double n0, Rng& rng) {
  if (!(dose_fraction > 0.0 && dose_fraction <= 1.0))
    throw DataError("inject_dose_noise: dose fraction must be in (0, 1]");
  const double flux = n0 * dose_fraction;
  if (flux < 10.0)
    throw DataError("inject_dose_noise: N0 * fraction below photon floor of 10");
  Sinogram out = sino;
  for (auto& p : out.data) {
    const double lambda = flux * std::exp(-p);
    const double counts = static_cast<double>(rng.poisson(lambda));
    p = -std::log(std::max(counts, 1.0) / flux);
  }
  return out;
}

// Spatial-domain Ram-Lak kernel sampled at the detector pitch:
// h[0] = 1/(4 d^2), h[n] = -1/(n pi d)^2 for odd n, 0 for even n != 0.
inline std::vector<double> ramp_kernel(int taps, double spacing) {
  if (taps < 1 || taps % 2 == 0) throw Error("ramp_kernel: taps must be odd");
  std::vector<double> h(taps, 0.0);
  const int c = taps / 2;
  h[c] = 1.0 / (4.0 * spacing * spacing);
  const double pi = 3.14159265358979323846;
  for (int n = 1; n <= c; n += 2) {
    const double v = -1.0 / (n * pi * spacing) / (n * pi * spacing);
    h[c + n] = v;
    h[c - n] = v;
  }
  return h;
}

// Ramp-filter each view, then backproject with linear detector
// interpolation, scaled by pi / n_views.
inline Image fbp(const Sinogram& sino, const ScanGeometry& geom, int size) {
  geom.validate();
  if (sino.n_views != geom.n_views || sino.n_detectors != geom.n_detectors)
    throw Error("fbp: sinogram does not match geometry");
  const int nd = geom.n_detectors;
  const double spacing = geom.detector_spacing;

  const auto h = ramp_kernel(2 * nd - 1, spacing);
  const int hc = nd - 1;
  std::vector<double> filtered(static_cast<std::size_t>(geom.n_views) * nd, 0.0);
  parallel_for(geom.n_views, [&](int k) {
    const double* p = &sino.data[static_cast<std::size_t>(k) * nd];
    double* q = &filtered[static_cast<std::size_t>(k) * nd];
    for (int m = 0; m < nd; ++m) {
      double acc = 0.0;
      for (int n = 0; n < nd; ++n) acc += p[n] * h[hc + m - n];
      q[m] = acc * spacing;
    }
  });

  std::vector<double> cos_phi(geom.n_views), sin_phi(geom.n_views);
  for (int k = 0; k < geom.n_views; ++k) {
    cos_phi[k] = std::cos(geom.view_angle(k)) / spacing;
    sin_phi[k] = std::sin(geom.view_angle(k)) / spacing;
  }

  Image img(size, size);
  const double scale = 3.14159265358979323846 / geom.n_views;
  const double s_center = (nd - 1) / 2.0;
  parallel_for(size, [&](int i) {
    const double y = pixel_to_y(i, size);
    for (int j = 0; j < size; ++j) {
      const double x = pixel_to_x(j, size);
      double acc = 0.0;
      for (int k = 0; k < geom.n_views; ++k) {
        const double u = x * cos_phi[k] + y * sin_phi[k] + s_center;
        const int u0 = static_cast<int>(std::floor(u));
        if (u0 < -1 || u0 > nd - 1) continue;
        const double frac = u - u0;
        const double* q = &filtered[static_cast<std::size_t>(k) * nd];
        const double q0 = u0 >= 0 ? q[u0] : 0.0;
        const double q1 = u0 + 1 < nd ? q[u0 + 1] : 0.0;
        acc += q0 * (1.0 - frac) + q1 * frac;
      }
      img.at(i, j) = acc * scale;
    }
  });
  return img;
}

}  // namespace founddiff::ctsim

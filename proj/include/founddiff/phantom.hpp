#pragma once

// Ellipse phantoms for three pseudo-anatomies. Attenuation is additive over
// ellipses; every phantom fits inside the unit disk and is nonnegative.

#include <cmath>
#include <string>
#include <vector>

#include "founddiff/errors.hpp"
#include "founddiff/image.hpp"
#include "founddiff/rng.hpp"

namespace founddiff::ctsim {

enum class Family { abdomen, chest, head };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::abdomen: return "abdomen";
    case Family::chest: return "chest";
    case Family::head: return "head";
  }
  return "?";
}

inline Family family_from_name(const std::string& s) {
  if (s == "abdomen") return Family::abdomen;
  if (s == "chest") return Family::chest;
  if (s == "head") return Family::head;
  throw DataError("unknown anatomy family: " + s);
}

struct Ellipse {
  double cx = 0.0, cy = 0.0;  // center in [-1,1]^2
  double a = 0.0, b = 0.0;    // semi-axes, > 0
  double theta = 0.0;         // rotation, radians
  double rho = 0.0;           // additive attenuation

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (c * dx + s * dy) / a;
    const double v = (-s * dx + c * dy) / b;
    return u * u + v * v <= 1.0;
  }
};

struct EllipsePhantom {
  std::vector<Ellipse> ellipses;
  Family family = Family::abdomen;
  double mu_body = 0.2;  // base attenuation of the body interior (HU anchor)

  double attenuation_at(double x, double y) const {
    double mu = 0.0;
    for (const auto& e : ellipses)
      if (e.contains(x, y)) mu += e.rho;
    return mu;
  }

  void validate() const {
    if (ellipses.size() < 2) throw Error("phantom: fewer than 2 ellipses");
    for (const auto& e : ellipses) {
      if (e.a <= 0.0 || e.b <= 0.0) throw Error("phantom: nonpositive semi-axis");
      const double reach = std::hypot(e.cx, e.cy) + std::max(e.a, e.b);
      if (reach > 1.0 + 1e-12) throw Error("phantom: ellipse leaves the unit disk");
    }
  }
};

namespace detail {

// Position expressed in the body-ellipse frame (fr, fs in [-1,1] of the
// body semi-axes) mapped back to world coordinates.
inline void body_frame_point(const Ellipse& body, double fr, double fs,
                             double& x, double& y) {
  const double c = std::cos(body.theta), s = std::sin(body.theta);
  const double u = fr * body.a, v = fs * body.b;
  x = body.cx + c * u - s * v;
  y = body.cy + s * u + c * v;
}

}  // namespace detail

// Family-characteristic random phantom. All randomness comes from rng.
inline EllipsePhantom make_phantom(Family family, Rng& rng) {
  EllipsePhantom ph;
  ph.family = family;
  ph.mu_body = rng.uniform(0.19, 0.21);

  const double jx = rng.uniform(-0.04, 0.04), jy = rng.uniform(-0.04, 0.04);

  if (family == Family::abdomen) {
    Ellipse body{jx, jy, rng.uniform(0.74, 0.84), rng.uniform(0.56, 0.68),
                 rng.uniform(-0.12, 0.12), ph.mu_body};
    ph.ellipses.push_back(body);
    const int k = 4 + static_cast<int>(rng.uniform_index(5));
    double negative_budget = 0.8 * ph.mu_body;
    for (int i = 0; i < k; ++i) {
      const double ang = rng.uniform(0.0, 6.283185307179586);
      const double rad = 0.62 * std::sqrt(rng.uniform());
      double x, y;
      detail::body_frame_point(body, rad * std::cos(ang), rad * std::sin(ang), x, y);
      double rho = rng.uniform(0.4, 1.0) * 0.15 * ph.mu_body;
      if (rng.uniform() < 0.5) {
        if (rho <= negative_budget) {
          negative_budget -= rho;
          rho = -rho;
        }
      }
      ph.ellipses.push_back({x, y, rng.uniform(0.05, 0.13), rng.uniform(0.04, 0.11),
                             rng.uniform(0.0, 3.14159265358979), rho});
    }
  } else if (family == Family::chest) {
    Ellipse body{jx, jy, rng.uniform(0.8, 0.88), rng.uniform(0.58, 0.68),
                 rng.uniform(-0.08, 0.08), ph.mu_body};
    ph.ellipses.push_back(body);
    std::vector<Ellipse> lungs;
    for (int side = -1; side <= 1; side += 2) {
      const double fx = side * rng.uniform(0.38, 0.44);
      const double fy = rng.uniform(-0.05, 0.1);
      double x, y;
      detail::body_frame_point(body, fx, fy, x, y);
      Ellipse lung{x, y, rng.uniform(0.24, 0.3) * body.a,
                   rng.uniform(0.5, 0.6) * body.b, body.theta,
                   -0.95 * ph.mu_body};
      lungs.push_back(lung);
      ph.ellipses.push_back(lung);
    }
    const int nodules = 2 + static_cast<int>(rng.uniform_index(3));
    for (int i = 0; i < nodules; ++i) {
      const Ellipse& lung = lungs[rng.uniform_index(2)];
      const double ang = rng.uniform(0.0, 6.283185307179586);
      const double rad = rng.uniform(0.15, 0.55);
      const double r = rng.uniform(0.02, 0.045);
      ph.ellipses.push_back({lung.cx + rad * lung.a * std::cos(ang),
                             lung.cy + rad * lung.b * std::sin(ang), r, r, 0.0,
                             rng.uniform(0.3, 0.6) * ph.mu_body});
    }
  } else {
    const double w = rng.uniform(0.08, 0.12);
    Ellipse skull{jx, jy, rng.uniform(0.62, 0.7), rng.uniform(0.76, 0.84),
                  rng.uniform(-0.06, 0.06), rng.uniform(1.6, 2.0) * ph.mu_body};
    Ellipse brain = skull;
    brain.a = skull.a * (1.0 - w);
    brain.b = skull.b * (1.0 - w);
    brain.rho = ph.mu_body - skull.rho;  // interior returns to base value
    ph.ellipses.push_back(skull);
    ph.ellipses.push_back(brain);
    const int k = 2 + static_cast<int>(rng.uniform_index(3));
    double negative_budget = 0.8 * ph.mu_body;
    for (int i = 0; i < k; ++i) {
      const double ang = rng.uniform(0.0, 6.283185307179586);
      const double rad = 0.55 * std::sqrt(rng.uniform());
      double x, y;
      detail::body_frame_point(brain, rad * std::cos(ang), rad * std::sin(ang), x, y);
      double rho = rng.uniform(0.3, 1.0) * 0.1 * ph.mu_body;
      if (rng.uniform() < 0.5 && rho <= negative_budget) {
        negative_budget -= rho;
        rho = -rho;
      }
      ph.ellipses.push_back({x, y, rng.uniform(0.04, 0.1), rng.uniform(0.04, 0.1),
                             rng.uniform(0.0, 3.14159265358979), rho});
    }
  }

  ph.validate();
  return ph;
}

// Pixel value = attenuation at the pixel center; zero outside the unit disk.
inline Image rasterize(const EllipsePhantom& phantom, int size) {
  if (size < 16) throw Error("rasterize: size must be >= 16");
  Image img(size, size);
  for (int i = 0; i < size; ++i) {
    const double y = pixel_to_y(i, size);
    for (int j = 0; j < size; ++j) {
      const double x = pixel_to_x(j, size);
      if (x * x + y * y > 1.0) continue;
      img.at(i, j) = phantom.attenuation_at(x, y);
    }
  }
  return img;
}

}  // namespace founddiff::ctsim

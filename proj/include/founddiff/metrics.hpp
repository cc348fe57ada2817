#pragma once

// Scalar evaluation: PSNR/SSIM for images, PLCC/SROCC for dose prediction.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "founddiff/errors.hpp"
#include "founddiff/image.hpp"

namespace founddiff::metrics {

// MSE == 0 reports the 99 dB table cap.
inline constexpr double kPsnrCap = 99.0;

inline double psnr(const Image& x, const Image& y, double data_range = 1.0) {
  if (!x.same_shape(y)) throw Error("psnr: image shapes differ");
  if (data_range <= 0.0) throw Error("psnr: data_range must be positive");
  const double m = mse(x, y);
  if (m == 0.0) return kPsnrCap;
  return 10.0 * std::log10(data_range * data_range / m);
}

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01 K2=0.03, L=1.
inline double ssim(const Image& x, const Image& y) {
  if (!x.same_shape(y)) throw Error("ssim: image shapes differ");
  constexpr int kWin = 11;
  if (x.height < kWin || x.width < kWin)
    throw Error("ssim: image smaller than the 11x11 window");
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;

  double w[kWin];
  double wsum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    wsum += w[i];
  }
  for (auto& v : w) v /= wsum;

  const int oh = x.height - kWin + 1, ow = x.width - kWin + 1;
  double acc = 0.0;
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int a = 0; a < kWin; ++a) {
        for (int b = 0; b < kWin; ++b) {
          const double ww = w[a] * w[b];
          const double xv = x.at(i + a, j + b), yv = y.at(i + a, j + b);
          mx += ww * xv;
          my += ww * yv;
          xx += ww * xv * xv;
          yy += ww * yv * yv;
          xy += ww * xv * yv;
        }
      }
      const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
      acc += ((2 * mx * my + kC1) * (2 * cxy + kC2)) /
             ((mx * mx + my * my + kC1) * (vx + vy + kC2));
    }
  }
  return acc / (static_cast<double>(oh) * ow);
}

inline double plcc(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size() || u.size() < 2)
    throw Error("plcc: need two equal-length vectors with n >= 2");
  const double n = static_cast<double>(u.size());
  const double mu = std::accumulate(u.begin(), u.end(), 0.0) / n;
  const double mv = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double suu = 0, svv = 0, suv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double du = u[i] - mu, dv = v[i] - mv;
    suu += du * du;
    svv += dv * dv;
    suv += du * dv;
  }
  if (suu == 0.0) throw Error("plcc: first vector is constant");
  if (svv == 0.0) throw Error("plcc: second vector is constant");
  return suv / std::sqrt(suu * svv);
}

// Average ranks with ties averaged.
inline std::vector<double> average_ranks(const std::vector<double>& u) {
  const std::size_t n = u.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return u[a] < u[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && u[idx[j + 1]] == u[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double srocc(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size() || u.size() < 2)
    throw Error("srocc: need two equal-length vectors with n >= 2");
  auto ru = average_ranks(u);
  auto rv = average_ranks(v);
  return plcc(ru, rv);  // all-tied vectors are rejected by plcc
}

// Per-cell aggregate keyed by (metric, dose fraction, anatomy).
struct MetricCell {
  std::vector<double> values;

  double mean() const {
    return std::accumulate(values.begin(), values.end(), 0.0) /
           static_cast<double>(values.size());
  }
  double stddev() const {
    if (values.size() < 2) return 0.0;
    const double m = mean();
    double acc = 0.0;
    for (double v : values) acc += (v - m) * (v - m);
    return std::sqrt(acc / static_cast<double>(values.size() - 1));
  }
};

struct MetricReport {
  // key: metric|dose|anatomy, all as strings for stable ordering
  std::map<std::string, MetricCell> cells;

  void add(const std::string& metric, const std::string& dose,
           const std::string& anatomy, double value) {
    cells[metric + "|" + dose + "|" + anatomy].values.push_back(value);
  }
};

}  // namespace founddiff::metrics

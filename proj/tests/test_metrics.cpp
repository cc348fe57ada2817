#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "founddiff/metrics.hpp"
#include "founddiff/rng.hpp"

using namespace founddiff;
using namespace founddiff::metrics;

namespace {

Image random_image(int h, int w, Rng& rng) {
  Image img(h, w);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("psnr basics") {
  Rng rng(1);
  auto x = random_image(16, 16, rng);
  REQUIRE(psnr(x, x) == kPsnrCap);

  Image a(16, 16, 0.2), b(16, 16, 0.3);
  REQUIRE(psnr(a, b) == Catch::Approx(20.0).margin(1e-12));

  // matches an independent direct evaluation
  auto y = random_image(16, 16, rng);
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.data[i] - y.data[i];
    m += d * d;
  }
  m /= static_cast<double>(x.size());
  REQUIRE(psnr(x, y) == Catch::Approx(10.0 * std::log10(1.0 / m)).margin(1e-12));

  // invariance under joint affine rescale with matching data_range
  Image xs = x, ys = y;
  for (auto& v : xs.data) v = 3.0 * v + 1.0;
  for (auto& v : ys.data) v = 3.0 * v + 1.0;
  REQUIRE(psnr(xs, ys, 3.0) == Catch::Approx(psnr(x, y, 1.0)).margin(1e-9));
}

TEST_CASE("ssim basics") {
  Rng rng(2);
  auto x = random_image(24, 24, rng);
  REQUIRE(ssim(x, x) == Catch::Approx(1.0).margin(1e-9));

  auto y = random_image(24, 24, rng);
  REQUIRE(ssim(x, y) == Catch::Approx(ssim(y, x)).margin(1e-12));

  // binary half-plane vs its inverse: strong structural disagreement
  Image h(32, 32), hinv(32, 32);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) {
      h.at(i, j) = j < 16 ? 1.0 : 0.0;
      hinv.at(i, j) = 1.0 - h.at(i, j);
    }
  REQUIRE(ssim(h, hinv) < 0.2);

  Image tiny(8, 8);
  REQUIRE_THROWS_AS(ssim(tiny, tiny), Error);
}

TEST_CASE("plcc basics") {
  std::vector<double> u{1, 2, 3, 5, 8};
  std::vector<double> v;
  for (double x : u) v.push_back(2.0 * x + 3.0);
  REQUIRE(plcc(u, v) == Catch::Approx(1.0).margin(1e-12));
  std::vector<double> neg;
  for (double x : u) neg.push_back(-x);
  REQUIRE(plcc(u, neg) == Catch::Approx(-1.0).margin(1e-12));

  Rng rng(3);
  std::vector<double> a(50), b(50);
  for (int i = 0; i < 50; ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
  }
  // independent direct evaluation
  double ma = 0, mb = 0;
  for (int i = 0; i < 50; ++i) {
    ma += a[i] / 50;
    mb += b[i] / 50;
  }
  double saa = 0, sbb = 0, sab = 0;
  for (int i = 0; i < 50; ++i) {
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
    sab += (a[i] - ma) * (b[i] - mb);
  }
  REQUIRE(plcc(a, b) == Catch::Approx(sab / std::sqrt(saa * sbb)).margin(1e-12));

  std::vector<double> flat(5, 1.0);
  REQUIRE_THROWS_WITH(plcc(flat, u), Catch::Matchers::ContainsSubstring("first"));
  REQUIRE_THROWS_WITH(plcc(u, flat), Catch::Matchers::ContainsSubstring("second"));
}

TEST_CASE("srocc basics") {
  std::vector<double> u{0.3, 1.2, 2.9, 3.1, 7.0};
  std::vector<double> mono;
  for (double x : u) mono.push_back(std::exp(x));  // strictly increasing map
  REQUIRE(srocc(u, mono) == Catch::Approx(1.0).margin(1e-12));

  std::vector<double> rev(u.rbegin(), u.rend());
  REQUIRE(srocc(u, rev) == Catch::Approx(-1.0).margin(1e-12));

  // ties averaged: ranks of [1,2,2,3] are [1, 2.5, 2.5, 4]
  std::vector<double> t{1, 2, 2, 3};
  auto r = average_ranks(t);
  REQUIRE(r == std::vector<double>{1.0, 2.5, 2.5, 4.0});
  std::vector<double> w{10, 20, 30, 40};
  const double expect = plcc(std::vector<double>{1, 2.5, 2.5, 4},
                             std::vector<double>{1, 2, 3, 4});
  REQUIRE(srocc(t, w) == Catch::Approx(expect).margin(1e-12));

  std::vector<double> tied(4, 2.0);
  REQUIRE_THROWS_AS(srocc(tied, w), Error);
}

TEST_CASE("metric cells aggregate mean and std") {
  MetricReport rep;
  rep.add("psnr", "0.5", "abdomen", 30.0);
  rep.add("psnr", "0.5", "abdomen", 34.0);
  const auto& cell = rep.cells.at("psnr|0.5|abdomen");
  REQUIRE(cell.mean() == Catch::Approx(32.0));
  REQUIRE(cell.stddev() == Catch::Approx(std::sqrt(8.0)));
}

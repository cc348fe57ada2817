#pragma once

// Built-in verification suites for the verify command: gradient checks for
// every primitive, the selective-scan recurrence against a naive reference,
// the contrastive losses against literal-formula evaluators, the numeric
// projector against the closed-form one, and oracle-sampler exactness.
// The reference implementations here are written directly from the
// definitions and share no code with the production paths they check.

#include <cmath>
#include <string>
#include <vector>

#include "founddiff/dataset.hpp"
#include "founddiff/diffusion.hpp"
#include "founddiff/perception.hpp"
#include "founddiff/scan.hpp"
#include "founddiff/tensor.hpp"

namespace founddiff::verify {

struct SuiteResult {
  std::string name;
  double max_error = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

namespace detail {

using numcore::Shape;
using numcore::Tensor;

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numcore::numel_of(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from_values(std::move(shape), std::move(v));
}

inline std::vector<double> naive_scan(const std::vector<double>& x,
                                      const std::vector<double>& delta,
                                      const std::vector<double>& a,
                                      const std::vector<double>& b,
                                      const std::vector<double>& c,
                                      const std::vector<double>& dskip, int len,
                                      int dim, int n_state) {
  std::vector<double> h(static_cast<std::size_t>(dim) * n_state, 0.0);
  std::vector<double> y(static_cast<std::size_t>(len) * dim, 0.0);
  for (int l = 0; l < len; ++l)
    for (int d = 0; d < dim; ++d) {
      for (int n = 0; n < n_state; ++n) {
        const double abar = std::exp(delta[l * dim + d] * a[d * n_state + n]);
        h[d * n_state + n] =
            abar * h[d * n_state + n] + delta[l * dim + d] * b[l * n_state + n] * x[l * dim + d];
      }
      double acc = dskip[d] * x[l * dim + d];
      for (int n = 0; n < n_state; ++n) acc += c[l * n_state + n] * h[d * n_state + n];
      y[l * dim + d] = acc;
    }
  return y;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double rank_reference(const std::vector<std::vector<double>>& e,
                             const std::vector<double>& y, double tau) {
  const int n = static_cast<int>(e.size());
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double den = 0.0;
      for (int k = 0; k < n; ++k)
        if (k != i && std::abs(y[i] - y[k]) >= std::abs(y[i] - y[j]))
          den += std::exp(dot(e[i], e[k]) / tau);
      total += -std::log(std::exp(dot(e[i], e[j]) / tau) / den);
    }
  return total / (static_cast<double>(n) * (n - 1));
}

inline double anatomy_reference(const std::vector<std::vector<double>>& e,
                                const std::vector<int>& y, double tau) {
  const int n = static_cast<int>(e.size());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<int> pos;
    for (int p = 0; p < n; ++p)
      if (p != i && y[p] == y[i]) pos.push_back(p);
    double term = 0.0;
    for (int p : pos) {
      double den = 0.0;
      for (int j = 0; j < n; ++j)
        if (j != i) den += std::exp(dot(e[i], e[j]) / tau);
      term += std::log(std::exp(dot(e[i], e[p]) / tau) / den);
    }
    total += -term / static_cast<double>(pos.size());
  }
  return total;
}

inline std::vector<std::vector<double>> random_unit_rows(int n, int d, Rng& rng) {
  std::vector<std::vector<double>> rows(n, std::vector<double>(d));
  for (auto& r : rows) {
    double norm = 0.0;
    for (auto& v : r) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : r) v /= norm;
  }
  return rows;
}

inline Tensor rows_tensor(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from_values({static_cast<int>(rows.size()),
                              static_cast<int>(rows[0].size())},
                             flat);
}

}  // namespace detail

// Per-primitive gradient checks; one suite entry per op so a corrupted
// backward rule is reported by name.
inline std::vector<SuiteResult> gradient_suites() {
  using namespace numcore;
  using detail::random_tensor;
  std::vector<SuiteResult> out;
  auto run = [&out](const char* op, double err) {
    out.push_back({std::string("grad_check:") + op, err, 1e-6, err < 1e-6});
  };
  Rng rng(90001);
  {
    auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    run("matmul", grad_check([](const std::vector<Tensor>& in) {
          auto y = matmul(in[0], in[1]);
          return mean(mul(y, y));
        }, {a, b}));
  }
  {
    auto x = random_tensor({2, 5, 5}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng, 0.4);
    auto b = random_tensor({3}, rng, 0.2);
    run("conv2d_3x3_pad1", grad_check([](const std::vector<Tensor>& in) {
          auto y = conv2d_3x3_pad1(in[0], in[1], in[2], 2);
          auto z = conv2d_3x3_pad1(in[0], in[1], in[2], 1);
          return add(mean(mul(y, y)), mean(mul(z, z)));
        }, {x, w, b}));
  }
  {
    auto x = random_tensor({3, 4, 4}, rng);
    auto w = random_tensor({2, 3}, rng);
    auto b = random_tensor({2}, rng);
    run("pointwise_conv", grad_check([](const std::vector<Tensor>& in) {
          auto y = pointwise_conv(in[0], in[1], in[2]);
          return mean(mul(y, y));
        }, {x, w, b}));
  }
  {
    auto x = random_tensor({3, 6}, rng);
    auto g = random_tensor({6}, rng);
    auto b = random_tensor({6}, rng);
    run("layer_norm", grad_check([](const std::vector<Tensor>& in) {
          auto y = layer_norm(in[0], in[1], in[2]);
          return mean(mul(y, y));
        }, {x, g, b}));
  }
  {
    auto x = random_tensor({3, 5}, rng);
    run("softmax_last_dim", grad_check([](const std::vector<Tensor>& in) {
          auto y = softmax_last_dim(in[0]);
          return mean(mul(y, y));
        }, {x}));
  }
  {
    auto x = random_tensor({7}, rng, 0.6);
    run("softplus", grad_check([](const std::vector<Tensor>& in) {
          return mean(mul(softplus(in[0]), softplus(in[0])));
        }, {x}));
    run("exp", grad_check([](const std::vector<Tensor>& in) {
          return mean(vexp(in[0]));
        }, {x}));
    run("silu", grad_check([](const std::vector<Tensor>& in) {
          return mean(mul(silu(in[0]), silu(in[0])));
        }, {x}));
  }
  {
    auto x = random_tensor({2, 3, 4}, rng);
    auto c = random_tensor({2}, rng);
    run("add", grad_check([](const std::vector<Tensor>& in) {
          auto y = add(in[0], in[1]);
          return mean(mul(y, y));
        }, {x, c}));
    run("mul", grad_check([](const std::vector<Tensor>& in) {
          auto y = mul(in[0], in[1]);
          return mean(mul(y, y));
        }, {x, c}));
  }
  {
    auto x = random_tensor({4, 3}, rng);
    run("scalar_scale", grad_check([](const std::vector<Tensor>& in) {
          return mean(mul(scalar_scale(in[0], -1.7), scalar_scale(in[0], -1.7)));
        }, {x}));
    run("sum", grad_check([](const std::vector<Tensor>& in) {
          return scalar_scale(numcore::sum(mul(in[0], in[0])), 0.5);
        }, {x}));
    run("mean", grad_check([](const std::vector<Tensor>& in) {
          return mean(mul(in[0], in[0]));
        }, {x}));
  }
  {
    auto a = random_tensor({2, 3, 3}, rng);
    auto b = random_tensor({1, 3, 3}, rng);
    run("concat_channels", grad_check([](const std::vector<Tensor>& in) {
          auto y = concat_channels({in[0], in[1]});
          return mean(mul(y, y));
        }, {a, b}));
  }
  {
    auto x = random_tensor({4, 3}, rng);
    run("transpose_2d", grad_check([](const std::vector<Tensor>& in) {
          auto y = transpose_2d(in[0]);
          return mean(mul(y, y));
        }, {x}));
    std::vector<int> idx{3, 0, 2, 2};
    run("gather_sequence", grad_check([idx](const std::vector<Tensor>& in) {
          auto y = gather_sequence(in[0], idx);
          return mean(mul(y, y));
        }, {x}));
  }
  return out;
}

inline SuiteResult scan_oracle_suite(int instances = 20) {
  double worst = 0.0;
  for (int trial = 0; trial < instances; ++trial) {
    Rng rng(91000 + trial);
    const int len = 2 + static_cast<int>(rng.uniform_index(15));
    const int dim = 1 + static_cast<int>(rng.uniform_index(4));
    const int n_state = 1 + static_cast<int>(rng.uniform_index(4));
    auto x = detail::random_tensor({len, dim}, rng);
    std::vector<double> dv(static_cast<std::size_t>(len) * dim);
    for (auto& v : dv) v = rng.uniform(0.01, 1.5);
    auto delta = numcore::Tensor::from_values({len, dim}, dv);
    std::vector<double> av(static_cast<std::size_t>(dim) * n_state);
    for (auto& v : av) v = -rng.uniform(0.05, 3.0);
    auto a = numcore::Tensor::from_values({dim, n_state}, av);
    auto b = detail::random_tensor({len, n_state}, rng);
    auto c = detail::random_tensor({len, n_state}, rng);
    auto dskip = detail::random_tensor({dim}, rng);
    auto got = dadiff::selective_scan(x, delta, a, b, c, dskip);
    auto ref = detail::naive_scan(x.values(), delta.values(), a.values(),
                                  b.values(), c.values(), dskip.values(), len,
                                  dim, n_state);
    for (int i = 0; i < got.numel(); ++i)
      worst = std::max(worst, std::abs(got.values()[i] - ref[i]));
  }
  return {"scan_oracle", worst, 1e-12, worst < 1e-12};
}

inline SuiteResult loss_oracle_suite(int batches = 10) {
  double worst = 0.0;
  auto menu = ctsim::full_dose_menu();
  for (int trial = 0; trial < batches; ++trial) {
    Rng rng(92000 + trial);
    const int pairs = 2 + static_cast<int>(rng.uniform_index(3));
    const int n = 2 * pairs;
    const int d = 2 + static_cast<int>(rng.uniform_index(5));
    const double tau = rng.uniform(0.05, 1.0);
    auto rows = detail::random_unit_rows(n, d, rng);
    std::vector<double> dose(n);
    for (auto& v : dose) v = menu[rng.uniform_index(menu.size())];
    std::vector<int> anat(n);
    for (int i = 0; i < pairs; ++i)
      anat[2 * i] = anat[2 * i + 1] = static_cast<int>(rng.uniform_index(3));

    const double rank_ref = detail::rank_reference(rows, dose, tau);
    const double rank_got =
        perception::loss_rank(detail::rows_tensor(rows), dose, tau).item();
    worst = std::max(worst, std::abs(rank_got - rank_ref));

    const double anat_ref = detail::anatomy_reference(rows, anat, tau);
    const double anat_got =
        perception::loss_anatomy(detail::rows_tensor(rows), anat, tau).item();
    worst = std::max(worst, std::abs(anat_got - anat_ref));
  }
  return {"loss_oracles", worst, 1e-10, worst < 1e-10};
}

inline SuiteResult projector_oracle_suite(int size = 128, int n_views = 90) {
  Rng rng(93000);
  auto phantom = ctsim::make_phantom(ctsim::Family::abdomen, rng);
  ctsim::ScanGeometry geom;
  geom.n_views = n_views;
  int nd = size + 1;
  if (nd % 2 == 0) ++nd;
  geom.n_detectors = nd;
  geom.detector_spacing = 2.2 / nd;
  auto img = ctsim::rasterize(phantom, size);
  auto reference = ctsim::project_analytic(phantom, geom);
  auto numeric = ctsim::project_numeric(img, geom, 2.0 / size / 4.0);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < reference.data.size(); ++i) {
    const double d = numeric.data[i] - reference.data[i];
    num += d * d;
    den += reference.data[i] * reference.data[i];
  }
  const double rel = std::sqrt(num / den);
  return {"projector_oracle", rel, 0.02, rel < 0.02};
}

inline SuiteResult sampler_exactness_suite() {
  auto samples = ctsim::make_dataset({ctsim::Family::abdomen}, {0.1}, 1, 32, 1e5, 94000);
  const auto& s = samples[0];
  Image res(s.ndct.height, s.ndct.width);
  for (std::size_t i = 0; i < res.size(); ++i)
    res.data[i] = s.ldct.data[i] - s.ndct.data[i];
  diffusion::ResidualPredictor oracle = [&](const Image&, const Image&, int) {
    return res;
  };
  auto sched = diffusion::build_schedule(100, 0.2);
  double worst = 0.0;
  for (int steps : {1, 2, 10}) {
    for (bool stochastic : {false, true}) {
      Rng rng(17);
      auto plan = diffusion::uniform_plan(sched.t_steps, steps, stochastic);
      auto out = diffusion::sample_with_predictor(oracle, s.ldct, plan, sched, rng);
      for (std::size_t i = 0; i < out.size(); ++i)
        worst = std::max(worst, std::abs(out.data[i] - s.ndct.data[i]));
    }
  }
  return {"sampler_exactness", worst, 1e-10, worst < 1e-10};
}

inline std::vector<SuiteResult> run_all_suites() {
  auto out = gradient_suites();
  out.push_back(scan_oracle_suite());
  out.push_back(loss_oracle_suite());
  out.push_back(projector_oracle_suite());
  out.push_back(sampler_exactness_suite());
  return out;
}

}  // namespace founddiff::verify

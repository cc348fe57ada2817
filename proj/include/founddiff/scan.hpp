#pragma once

// Input-dependent discretized linear recurrence (selective scan):
//   h_l = exp(delta_l * A) (.) h_{l-1} + (delta_l * B_l) x_l
//   y_l = <C_l, h_l> + D_skip (.) x_l
// One tape node with an analytic reverse recurrence.

#include <cmath>
#include <string>
#include <vector>

#include "founddiff/tensor.hpp"

namespace founddiff::dadiff {

using numcore::Shape;
using numcore::Tensor;

// x: [L,D], delta: [L,D] (>0), a: [D,N] (<0), b: [L,N], c_eff: [L,N],
// d_skip: [D]  ->  y: [L,D]
inline Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& a,
                             const Tensor& b, const Tensor& c_eff,
                             const Tensor& d_skip) {
  using numcore::TensorError;
  if (x.rank() != 2 || delta.shape() != x.shape())
    throw TensorError("selective_scan: x and delta must both be [L,D]");
  const int l_len = x.shape()[0], d_dim = x.shape()[1];
  if (a.rank() != 2 || a.shape()[0] != d_dim)
    throw TensorError("selective_scan: A must be [D,N]");
  const int n_state = a.shape()[1];
  if (b.shape() != Shape{l_len, n_state} || c_eff.shape() != Shape{l_len, n_state})
    throw TensorError("selective_scan: B and C must be [L,N]");
  if (d_skip.shape() != Shape{d_dim})
    throw TensorError("selective_scan: D_skip must be [D]");
  for (double v : delta.values())
    if (!(v > 0.0)) throw TensorError("selective_scan: delta must be positive");
  for (double v : a.values())
    if (!(v < 0.0)) throw TensorError("selective_scan: A must be negative");

  const auto& xv = x.values();
  const auto& dv = delta.values();
  const auto& av = a.values();
  const auto& bv = b.values();
  const auto& cv = c_eff.values();
  const auto& skipv = d_skip.values();

  const std::size_t dn = static_cast<std::size_t>(d_dim) * n_state;
  std::vector<double> h(static_cast<std::size_t>(l_len) * dn, 0.0);
  std::vector<double> abar(static_cast<std::size_t>(l_len) * dn, 0.0);
  std::vector<double> y(static_cast<std::size_t>(l_len) * d_dim, 0.0);

  for (int l = 0; l < l_len; ++l) {
    const double* xr = &xv[static_cast<std::size_t>(l) * d_dim];
    const double* dr = &dv[static_cast<std::size_t>(l) * d_dim];
    const double* br = &bv[static_cast<std::size_t>(l) * n_state];
    const double* cr = &cv[static_cast<std::size_t>(l) * n_state];
    const double* hprev = l > 0 ? &h[static_cast<std::size_t>(l - 1) * dn] : nullptr;
    double* hr = &h[static_cast<std::size_t>(l) * dn];
    double* ar = &abar[static_cast<std::size_t>(l) * dn];
    double* yr = &y[static_cast<std::size_t>(l) * d_dim];
    for (int d = 0; d < d_dim; ++d) {
      const double xd = xr[d], dd = dr[d];
      const double* arow = &av[static_cast<std::size_t>(d) * n_state];
      double* hrow = &hr[static_cast<std::size_t>(d) * n_state];
      double* abrow = &ar[static_cast<std::size_t>(d) * n_state];
      const double* hp = hprev ? &hprev[static_cast<std::size_t>(d) * n_state] : nullptr;
      double acc = skipv[d] * xd;
      for (int n = 0; n < n_state; ++n) {
        const double ab = std::exp(dd * arow[n]);
        const double hv = ab * (hp ? hp[n] : 0.0) + dd * br[n] * xd;
        abrow[n] = ab;
        hrow[n] = hv;
        acc += cr[n] * hv;
      }
      if (!std::isfinite(acc))
        throw TensorError("selective_scan: non-finite state at position " +
                          std::to_string(l));
      yr[d] = acc;
    }
  }

  return numcore::make_custom_op(
      "selective_scan", {x, delta, a, b, c_eff, d_skip}, {l_len, d_dim},
      std::move(y),
      [l_len, d_dim, n_state, dn, h = std::move(h), abar = std::move(abar)](
          numcore::detail::Node& nd) {
        const auto& g = nd.grad;
        const auto& xv = nd.parents[0]->values;
        const auto& dv = nd.parents[1]->values;
        const auto& av = nd.parents[2]->values;
        const auto& bv = nd.parents[3]->values;
        const auto& cv = nd.parents[4]->values;
        const auto& skipv = nd.parents[5]->values;
        auto grad_of = [&](int i) -> std::vector<double>* {
          return nd.parents[i]->requires_grad ? &nd.parents[i]->ensure_grad() : nullptr;
        };
        auto* dx = grad_of(0);
        auto* ddelta = grad_of(1);
        auto* da = grad_of(2);
        auto* db = grad_of(3);
        auto* dc = grad_of(4);
        auto* dskip = grad_of(5);

        std::vector<double> gh(dn, 0.0);
        for (int l = l_len - 1; l >= 0; --l) {
          const double* gr = &g[static_cast<std::size_t>(l) * d_dim];
          const double* xr = &xv[static_cast<std::size_t>(l) * d_dim];
          const double* dr = &dv[static_cast<std::size_t>(l) * d_dim];
          const double* br = &bv[static_cast<std::size_t>(l) * n_state];
          const double* cr = &cv[static_cast<std::size_t>(l) * n_state];
          const double* hr = &h[static_cast<std::size_t>(l) * dn];
          const double* hp = l > 0 ? &h[static_cast<std::size_t>(l - 1) * dn] : nullptr;
          const double* ar = &abar[static_cast<std::size_t>(l) * dn];
          for (int d = 0; d < d_dim; ++d) {
            const double gy = gr[d];
            const double xd = xr[d], dd = dr[d];
            const double* arow = &av[static_cast<std::size_t>(d) * n_state];
            const double* hrow = &hr[static_cast<std::size_t>(d) * n_state];
            const double* hprow = hp ? &hp[static_cast<std::size_t>(d) * n_state] : nullptr;
            const double* abrow = &ar[static_cast<std::size_t>(d) * n_state];
            double* ghrow = &gh[static_cast<std::size_t>(d) * n_state];

            if (dskip) (*dskip)[d] += gy * xd;
            double dx_acc = gy * skipv[d];
            double ddelta_acc = 0.0;
            for (int n = 0; n < n_state; ++n) {
              double ghv = ghrow[n] + gy * cr[n];
              if (dc) (*dc)[static_cast<std::size_t>(l) * n_state + n] += gy * hrow[n];
              const double hprev_v = hprow ? hprow[n] : 0.0;
              const double dabar = ghv * hprev_v;
              const double dbbar = ghv * xd;
              ddelta_acc += dabar * arow[n] * abrow[n] + dbbar * br[n];
              if (da)
                (*da)[static_cast<std::size_t>(d) * n_state + n] += dabar * dd * abrow[n];
              if (db) (*db)[static_cast<std::size_t>(l) * n_state + n] += dbbar * dd;
              dx_acc += ghv * dd * br[n];
              ghrow[n] = ghv * abrow[n];
            }
            if (dx) (*dx)[static_cast<std::size_t>(l) * d_dim + d] += dx_acc;
            if (ddelta) (*ddelta)[static_cast<std::size_t>(l) * d_dim + d] += ddelta_acc;
          }
        }
      });
}

}  // namespace founddiff::dadiff

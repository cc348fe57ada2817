#pragma once

// Dose and anatomy conditional block: adaLN-Zero modulation driven by the
// fused timestep/dose embedding, a conditional selective-scan state-space
// branch conditioned on the anatomy embedding, and transposed channel
// attention. Zero-initialized projections make every block an exact
// identity at initialization.

#include <cmath>
#include <string>
#include <vector>

#include "founddiff/checkpoint.hpp"
#include "founddiff/rng.hpp"
#include "founddiff/scan.hpp"
#include "founddiff/tensor.hpp"

namespace founddiff::dadiff {

using numcore::Shape;
using numcore::Tensor;

namespace detail {

inline Tensor init_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numcore::numel_of(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

inline Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

}  // namespace detail

// Sinusoidal features at log-spaced frequencies; constant norm sqrt(dim/2).
inline Tensor timestep_embed(int t, int dim) {
  if (dim < 2 || dim % 2 != 0)
    throw numcore::TensorError("timestep_embed: dim must be even and >= 2");
  if (t < 0) throw numcore::TensorError("timestep_embed: t must be >= 0");
  const int half = dim / 2;
  std::vector<double> v(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    v[i] = std::sin(t * freq);
    v[half + i] = std::cos(t * freq);
  }
  return Tensor::from_values({1, dim}, std::move(v));
}

// ---------------------------------------------------------------------------
// adaLN-Zero modulation
// ---------------------------------------------------------------------------

struct ModulationParams {
  Tensor gamma1, beta1, alpha1, gamma2, beta2, alpha2;  // per-channel [C]
};

struct ModState {
  Tensor t_w;    // [t_dim, d_e] inner linear on the timestep embedding
  Tensor t_b;    // [d_e]
  Tensor w1;     // [d_e, hidden]
  Tensor b1;     // [hidden]
  Tensor w2;     // [hidden, 6C], zero-initialized
  Tensor b2;     // [6C], zero-initialized
  int channels = 0;

  static ModState init(int t_dim, int d_e, int channels, Rng& rng) {
    ModState s;
    const int hidden = 4 * channels;
    s.t_w = detail::init_normal({t_dim, d_e}, std::sqrt(2.0 / t_dim), rng);
    s.t_b = detail::zeros_param({d_e});
    s.w1 = detail::init_normal({d_e, hidden}, std::sqrt(2.0 / d_e), rng);
    s.b1 = detail::zeros_param({hidden});
    s.w2 = detail::zeros_param({hidden, 6 * channels});
    s.b2 = detail::zeros_param({6 * channels});
    s.channels = channels;
    return s;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + "t_w", t_w);
    out.emplace_back(prefix + "t_b", t_b);
    out.emplace_back(prefix + "w1", w1);
    out.emplace_back(prefix + "b1", b1);
    out.emplace_back(prefix + "w2", w2);
    out.emplace_back(prefix + "b2", b2);
  }
};

// params = MLP(MLP(t) + e_d), split into the six per-channel vectors.
inline ModulationParams modulation(const Tensor& t_emb, const Tensor& e_d,
                                   const ModState& s) {
  using namespace numcore;
  auto fused = add(add(matmul(t_emb, s.t_w), s.t_b), e_d);  // [1, d_e]
  auto hiddenv = silu(add(matmul(fused, s.w1), s.b1));
  auto six = reshape(add(matmul(hiddenv, s.w2), s.b2), {6, s.channels});
  auto pick = [&](int i) {
    return reshape(gather_sequence(six, {i}), {s.channels});
  };
  return {pick(0), pick(1), pick(2), pick(3), pick(4), pick(5)};
}

// ---------------------------------------------------------------------------
// Residual local-enhance block
// ---------------------------------------------------------------------------

struct RlebState {
  Tensor w1, b1;  // 3x3 conv
  Tensor w2, b2;  // 3x3 conv, zero-initialized (identity at init)

  static RlebState init(int channels, Rng& rng) {
    RlebState s;
    s.w1 = detail::init_normal({channels, channels, 3, 3},
                               std::sqrt(2.0 / (9.0 * channels)), rng);
    s.b1 = detail::zeros_param({channels});
    s.w2 = detail::zeros_param({channels, channels, 3, 3});
    s.b2 = detail::zeros_param({channels});
    return s;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + "w1", w1);
    out.emplace_back(prefix + "b1", b1);
    out.emplace_back(prefix + "w2", w2);
    out.emplace_back(prefix + "b2", b2);
  }
};

inline Tensor rleb_forward(const Tensor& f, const RlebState& s) {
  using namespace numcore;
  return add(f, conv2d_3x3_pad1(silu(conv2d_3x3_pad1(f, s.w1, s.b1)), s.w2, s.b2));
}

// ---------------------------------------------------------------------------
// Conditional state-space model (CS2D core)
// ---------------------------------------------------------------------------

struct SsmParams {
  Tensor a_log;   // [D, N]; A = -exp(a_log)
  Tensor d_skip;  // [D]
  Tensor w_delta, b_delta;  // [D, D], [D]
  Tensor w_b;     // [D, N]
  Tensor w_c;     // [D, N]
  Tensor p_a;     // [d_e, N] anatomy projection, zero-initialized
};

struct CssmState {
  Tensor in_w, in_b;    // pointwise C -> D
  Tensor out_w, out_b;  // pointwise D -> C, zero-initialized
  SsmParams ssm;
  int d_inner = 0;
  int n_state = 0;

  static CssmState init(int channels, int n_state, int d_e, Rng& rng) {
    CssmState s;
    const int d = channels;
    s.d_inner = d;
    s.n_state = n_state;
    s.in_w = detail::init_normal({d, channels}, std::sqrt(1.0 / channels), rng);
    s.in_b = detail::zeros_param({d});
    s.out_w = detail::zeros_param({channels, d});
    s.out_b = detail::zeros_param({channels});
    // S4D-real initialization: state n decays at rate n+1
    std::vector<double> alog(static_cast<std::size_t>(d) * n_state);
    for (int i = 0; i < d; ++i)
      for (int n = 0; n < n_state; ++n)
        alog[static_cast<std::size_t>(i) * n_state + n] = std::log(n + 1.0);
    s.ssm.a_log = Tensor::from_values({d, n_state}, std::move(alog), true);
    s.ssm.d_skip = Tensor::full({d}, 1.0, true);
    s.ssm.w_delta = detail::init_normal({d, d}, 0.5 * std::sqrt(1.0 / d), rng);
    // softplus(-2.25) ~ 0.1: moderate default step size
    s.ssm.b_delta = Tensor::full({d}, -2.25, true);
    s.ssm.w_b = detail::init_normal({d, n_state}, std::sqrt(1.0 / d), rng);
    s.ssm.w_c = detail::init_normal({d, n_state}, std::sqrt(1.0 / d), rng);
    s.ssm.p_a = detail::zeros_param({d_e, n_state});
    return s;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + "in_w", in_w);
    out.emplace_back(prefix + "in_b", in_b);
    out.emplace_back(prefix + "out_w", out_w);
    out.emplace_back(prefix + "out_b", out_b);
    out.emplace_back(prefix + "a_log", ssm.a_log);
    out.emplace_back(prefix + "d_skip", ssm.d_skip);
    out.emplace_back(prefix + "w_delta", ssm.w_delta);
    out.emplace_back(prefix + "b_delta", ssm.b_delta);
    out.emplace_back(prefix + "w_b", ssm.w_b);
    out.emplace_back(prefix + "w_c", ssm.w_c);
    out.emplace_back(prefix + "p_a", ssm.p_a);
  }
};

// The four full-scan orders over an H x W grid: row-major forward/backward
// and column-major forward/backward, as index lists into the row-major
// flattening.
inline std::vector<std::vector<int>> scan_direction_indices(int h, int w) {
  const int l = h * w;
  std::vector<std::vector<int>> dirs(4, std::vector<int>(l));
  for (int i = 0; i < l; ++i) dirs[0][i] = i;
  for (int i = 0; i < l; ++i) dirs[1][i] = l - 1 - i;
  int p = 0;
  for (int c = 0; c < w; ++c)
    for (int r = 0; r < h; ++r) dirs[2][p++] = r * w + c;
  for (int i = 0; i < l; ++i) dirs[3][i] = dirs[2][l - 1 - i];
  return dirs;
}

inline std::vector<int> inverse_permutation(const std::vector<int>& idx) {
  std::vector<int> inv(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) inv[idx[i]] = static_cast<int>(i);
  return inv;
}

// Conditional 2D selective scan: shared SSM parameters across directions,
// anatomy bias added to the output matrix C, directional results merged by
// sum. A custom direction set may be supplied (defaults to the four full
// scans).
inline Tensor cssm_forward(const Tensor& f, const Tensor& e_a, const CssmState& s,
                           const std::vector<std::vector<int>>* directions = nullptr) {
  using namespace numcore;
  const int h = f.shape()[1], w = f.shape()[2];
  const int l = h * w;
  auto x3 = pointwise_conv(f, s.in_w, s.in_b);           // [D,H,W]
  auto base = transpose_2d(reshape(x3, {s.d_inner, l}));  // [L,D]

  auto delta = softplus(add(matmul(base, s.ssm.w_delta), s.ssm.b_delta));
  auto b_mat = matmul(base, s.ssm.w_b);  // [L,N]
  auto c_mat = matmul(base, s.ssm.w_c);  // [L,N]
  auto e_row = e_a.rank() == 2 ? e_a : reshape(e_a, {1, e_a.numel()});
  auto cond = reshape(matmul(e_row, s.ssm.p_a), {s.n_state});
  auto c_eff = add(c_mat, cond);  // broadcast over rows
  auto a_neg = scalar_scale(vexp(s.ssm.a_log), -1.0);

  const auto default_dirs = directions ? std::vector<std::vector<int>>{}
                                       : scan_direction_indices(h, w);
  const auto& dirs = directions ? *directions : default_dirs;

  Tensor merged;
  for (const auto& idx : dirs) {
    auto y_dir = selective_scan(gather_sequence(base, idx),
                                gather_sequence(delta, idx), a_neg,
                                gather_sequence(b_mat, idx),
                                gather_sequence(c_eff, idx), s.ssm.d_skip);
    auto restored = gather_sequence(y_dir, inverse_permutation(idx));
    merged = merged.defined() ? add(merged, restored) : restored;
  }

  auto out3 = reshape(transpose_2d(merged), {s.d_inner, h, w});
  return pointwise_conv(out3, s.out_w, s.out_b);
}

// ---------------------------------------------------------------------------
// Transposed (channel) attention
// ---------------------------------------------------------------------------

struct AttnState {
  Tensor wq, bq, wk, bk, wv, bv;  // pointwise projections [C,C] / [C]
  Tensor temperature;             // [1], learnable
  Tensor wo, bo;                  // output projection, zero-initialized

  static AttnState init(int channels, Rng& rng) {
    AttnState s;
    const double sd = std::sqrt(1.0 / channels);
    s.wq = detail::init_normal({channels, channels}, sd, rng);
    s.bq = detail::zeros_param({channels});
    s.wk = detail::init_normal({channels, channels}, sd, rng);
    s.bk = detail::zeros_param({channels});
    s.wv = detail::init_normal({channels, channels}, sd, rng);
    s.bv = detail::zeros_param({channels});
    s.temperature = Tensor::full({1}, 1.0, true);
    s.wo = detail::zeros_param({channels, channels});
    s.bo = detail::zeros_param({channels});
    return s;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + "wq", wq);
    out.emplace_back(prefix + "bq", bq);
    out.emplace_back(prefix + "wk", wk);
    out.emplace_back(prefix + "bk", bk);
    out.emplace_back(prefix + "wv", wv);
    out.emplace_back(prefix + "bv", bv);
    out.emplace_back(prefix + "temperature", temperature);
    out.emplace_back(prefix + "wo", wo);
    out.emplace_back(prefix + "bo", bo);
  }
};

// Self-attention across the channel dimension: C x C attention map over
// L2-normalized transposed query/key rows.
inline Tensor transposed_attention(const Tensor& f, const AttnState& s) {
  using namespace numcore;
  const int c = f.shape()[0], h = f.shape()[1], w = f.shape()[2];
  const int l = h * w;
  auto q = l2norm_rows(reshape(pointwise_conv(f, s.wq, s.bq), {c, l}));
  auto k = l2norm_rows(reshape(pointwise_conv(f, s.wk, s.bk), {c, l}));
  auto v = reshape(pointwise_conv(f, s.wv, s.bv), {c, l});
  auto attn = softmax_last_dim(mul(matmul(q, transpose_2d(k)), s.temperature));
  auto out = reshape(matmul(attn, v), {c, h, w});
  return pointwise_conv(out, s.wo, s.bo);
}

// ---------------------------------------------------------------------------
// The full block
// ---------------------------------------------------------------------------

struct DacbState {
  Tensor norm1_g, norm1_b, norm2_g, norm2_b;  // channel layer-norm affines
  ModState mod;
  CssmState cssm;
  AttnState attn;
  int channels = 0;

  static DacbState init(int channels, int n_state, int d_e, int t_dim, Rng& rng) {
    DacbState s;
    s.channels = channels;
    s.norm1_g = Tensor::full({channels}, 1.0, true);
    s.norm1_b = detail::zeros_param({channels});
    s.norm2_g = Tensor::full({channels}, 1.0, true);
    s.norm2_b = detail::zeros_param({channels});
    s.mod = ModState::init(t_dim, d_e, channels, rng);
    s.cssm = CssmState::init(channels, n_state, d_e, rng);
    s.attn = AttnState::init(channels, rng);
    return s;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + "norm1_g", norm1_g);
    out.emplace_back(prefix + "norm1_b", norm1_b);
    out.emplace_back(prefix + "norm2_g", norm2_g);
    out.emplace_back(prefix + "norm2_b", norm2_b);
    mod.collect(prefix + "mod_", out);
    cssm.collect(prefix + "cssm_", out);
    attn.collect(prefix + "attn_", out);
  }
};

// LayerNorm across channels at each spatial position.
inline Tensor layer_norm_channels(const Tensor& f, const Tensor& gamma,
                                  const Tensor& beta) {
  using namespace numcore;
  const int c = f.shape()[0], h = f.shape()[1], w = f.shape()[2];
  auto rows = transpose_2d(reshape(f, {c, h * w}));
  auto normed = layer_norm(rows, gamma, beta);
  return reshape(transpose_2d(normed), {c, h, w});
}

//   F1     = gamma1 (.) LN(F)  + beta1 (.) F
//   F'     = CSSM(F1, e_a) + alpha1 (.) F1 + F
//   F2     = gamma2 (.) LN(F') + beta2 (.) F'
//   F_next = TA(F') + alpha2 (.) F2 + F'
inline Tensor dacb_forward(const Tensor& f, const Tensor& e_d, const Tensor& e_a,
                           const Tensor& t_emb, const DacbState& s) {
  using namespace numcore;
  const auto mp = modulation(t_emb, e_d, s.mod);
  auto f1 = add(mul(layer_norm_channels(f, s.norm1_g, s.norm1_b), mp.gamma1),
                mul(f, mp.beta1));
  auto fp = add(add(cssm_forward(f1, e_a, s.cssm), mul(f1, mp.alpha1)), f);
  auto f2 = add(mul(layer_norm_channels(fp, s.norm2_g, s.norm2_b), mp.gamma2),
                mul(fp, mp.beta2));
  return add(add(transposed_attention(fp, s.attn), mul(f2, mp.alpha2)), fp);
}

}  // namespace founddiff::dadiff

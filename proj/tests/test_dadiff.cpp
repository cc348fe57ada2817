#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "founddiff/dacb.hpp"
#include "founddiff/denoiser.hpp"
#include "founddiff/scan.hpp"

using namespace founddiff;
using namespace founddiff::dadiff;
using numcore::Shape;
using numcore::Tensor;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numcore::numel_of(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from_values(std::move(shape), std::move(v));
}

// Step-by-step reference recurrence, written independently of the
// implementation.
std::vector<double> naive_scan(const std::vector<double>& x,
                               const std::vector<double>& delta,
                               const std::vector<double>& a,
                               const std::vector<double>& b,
                               const std::vector<double>& c,
                               const std::vector<double>& dskip, int L, int D,
                               int N) {
  std::vector<double> h(static_cast<std::size_t>(D) * N, 0.0);
  std::vector<double> y(static_cast<std::size_t>(L) * D, 0.0);
  for (int l = 0; l < L; ++l) {
    for (int d = 0; d < D; ++d) {
      for (int n = 0; n < N; ++n) {
        const double abar = std::exp(delta[l * D + d] * a[d * N + n]);
        const double bbar = delta[l * D + d] * b[l * N + n];
        h[d * N + n] = abar * h[d * N + n] + bbar * x[l * D + d];
      }
      double acc = dskip[d] * x[l * D + d];
      for (int n = 0; n < N; ++n) acc += c[l * N + n] * h[d * N + n];
      y[l * D + d] = acc;
    }
  }
  return y;
}

void randomize(Tensor t, Rng& rng, double scale) {
  for (auto& v : t.raw_values()) v = scale * rng.normal();
}

// Fills the zero-initialized projections so gradient paths are exercised.
void perturb_dacb(DacbState& s, Rng& rng) {
  randomize(s.mod.w2, rng, 0.2);
  randomize(s.mod.b2, rng, 0.2);
  randomize(s.cssm.out_w, rng, 0.3);
  randomize(s.cssm.out_b, rng, 0.1);
  randomize(s.cssm.ssm.p_a, rng, 0.3);
  randomize(s.attn.wo, rng, 0.3);
  randomize(s.attn.bo, rng, 0.1);
}

std::vector<Tensor> dacb_params(const DacbState& s) {
  NamedParams named;
  s.collect("", named);
  std::vector<Tensor> out;
  for (auto& [n, t] : named) out.push_back(t);
  return out;
}

}  // namespace

TEST_CASE("timestep embedding basics") {
  auto e0 = timestep_embed(0, 8);
  for (int i = 0; i < 4; ++i) {
    REQUIRE(e0.values()[i] == 0.0);
    REQUIRE(e0.values()[4 + i] == 1.0);
  }

  const int dim = 32;
  std::vector<std::vector<double>> embs;
  for (int t = 0; t <= 1000; ++t) embs.push_back(timestep_embed(t, dim).values());
  const double ref_norm = std::sqrt(dim / 2.0);
  for (const auto& e : embs) {
    double n = 0.0;
    for (double v : e) n += v * v;
    REQUIRE(std::sqrt(n) == Catch::Approx(ref_norm).margin(1e-9));
  }
  // pairwise distinct: nearest pair still separated
  for (int t = 1; t <= 1000; ++t) {
    double d = 0.0;
    for (int i = 0; i < dim; ++i) {
      const double diff = embs[t][i] - embs[t - 1][i];
      d += diff * diff;
    }
    REQUIRE(d > 1e-12);
  }
}

TEST_CASE("modulation is exactly zero at init and affine in the final bias") {
  Rng rng(1);
  auto mod = ModState::init(8, 4, 6, rng);
  auto t_emb = timestep_embed(17, 8);
  auto e_d = random_tensor({1, 4}, rng);
  auto mp = modulation(t_emb, e_d, mod);
  for (const Tensor* t : {&mp.gamma1, &mp.beta1, &mp.alpha1, &mp.gamma2, &mp.beta2, &mp.alpha2})
    for (double v : t->values()) REQUIRE(v == 0.0);

  // bias perturbation appears verbatim, independent of the inputs
  Rng rb(2);
  randomize(mod.b2, rb, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    auto mp2 = modulation(timestep_embed(trial * 31, 8), random_tensor({1, 4}, rb), mod);
    const auto& b = mod.b2.values();
    const Tensor* parts[6] = {&mp2.gamma1, &mp2.beta1, &mp2.alpha1,
                              &mp2.gamma2, &mp2.beta2, &mp2.alpha2};
    for (int p = 0; p < 6; ++p)
      for (int c = 0; c < 6; ++c) REQUIRE(parts[p]->values()[c] == b[p * 6 + c]);
  }

  // gradient through modulation with a quadratic readout
  Rng rg(3);
  auto mod2 = ModState::init(8, 4, 3, rg);
  randomize(mod2.w2, rg, 0.3);
  randomize(mod2.b2, rg, 0.3);
  auto inputs = std::vector<Tensor>{mod2.t_w, mod2.t_b, mod2.w1, mod2.b1,
                                    mod2.w2, mod2.b2, random_tensor({1, 4}, rg)};
  auto err = numcore::grad_check(
      [&](const std::vector<Tensor>& in) {
        auto mp3 = modulation(timestep_embed(5, 8), in[6], mod2);
        auto cat = numcore::concat_channels({mp3.gamma1, mp3.beta1, mp3.alpha1,
                                             mp3.gamma2, mp3.beta2, mp3.alpha2});
        return numcore::mean(numcore::mul(cat, cat));
      },
      inputs);
  REQUIRE(err < 1e-6);
}

TEST_CASE("rleb is identity at init and differentiable") {
  Rng rng(4);
  for (auto [c, hw] : {std::pair{16, 8}, std::pair{32, 16}}) {
    auto blk = RlebState::init(c, rng);
    auto f = random_tensor({c, hw, hw}, rng);
    auto out = rleb_forward(f, blk);
    REQUIRE(out.shape() == f.shape());
    REQUIRE(out.values() == f.values());  // zero-init second conv
  }

  auto blk = RlebState::init(3, rng);
  randomize(blk.w2, rng, 0.2);
  randomize(blk.b2, rng, 0.1);
  auto f = random_tensor({3, 5, 5}, rng);
  auto err = numcore::grad_check(
      [&](const std::vector<Tensor>& in) {
        auto y = rleb_forward(in[0], blk);
        return numcore::mean(numcore::mul(y, y));
      },
      {f, blk.w1, blk.b1, blk.w2, blk.b2});
  REQUIRE(err < 1e-5);
}

TEST_CASE("selective_scan hand case and zero input") {
  auto y = selective_scan(Tensor::from_values({1, 1}, {5.0}),
                          Tensor::from_values({1, 1}, {1.0}),
                          Tensor::from_values({1, 1}, {-0.7}),
                          Tensor::from_values({1, 1}, {2.0}),
                          Tensor::from_values({1, 1}, {3.0}),
                          Tensor::from_values({1}, {0.0}));
  REQUIRE(y.item() == Catch::Approx(30.0).margin(1e-14));

  Rng rng(5);
  auto zero = Tensor::zeros({6, 2});
  auto delta = Tensor::full({6, 2}, 0.5);
  auto a = Tensor::full({2, 3}, -1.0);
  auto b = random_tensor({6, 3}, rng);
  auto c = random_tensor({6, 3}, rng);
  auto dskip = random_tensor({2}, rng);
  auto y0 = selective_scan(zero, delta, a, b, c, dskip);
  for (double v : y0.values()) REQUIRE(v == 0.0);
}

TEST_CASE("selective_scan matches the naive recurrence on random instances") {
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(4000 + trial);
    const int L = 2 + static_cast<int>(rng.uniform_index(15));
    const int D = 1 + static_cast<int>(rng.uniform_index(4));
    const int N = 1 + static_cast<int>(rng.uniform_index(4));
    auto x = random_tensor({L, D}, rng);
    std::vector<double> dv(static_cast<std::size_t>(L) * D);
    for (auto& v : dv) v = rng.uniform(0.01, 1.5);
    auto delta = Tensor::from_values({L, D}, dv);
    std::vector<double> av(static_cast<std::size_t>(D) * N);
    for (auto& v : av) v = -rng.uniform(0.05, 3.0);
    auto a = Tensor::from_values({D, N}, av);
    auto b = random_tensor({L, N}, rng);
    auto c = random_tensor({L, N}, rng);
    auto dskip = random_tensor({D}, rng);

    auto got = selective_scan(x, delta, a, b, c, dskip);
    auto expect = naive_scan(x.values(), delta.values(), a.values(), b.values(),
                             c.values(), dskip.values(), L, D, N);
    for (int i = 0; i < got.numel(); ++i)
      REQUIRE(std::abs(got.values()[i] - expect[i]) < 1e-12);
  }
}

TEST_CASE("selective_scan gradient matches finite differences") {
  Rng rng(6);
  const int L = 7, D = 2, N = 3;
  auto x = random_tensor({L, D}, rng);
  std::vector<double> dv(static_cast<std::size_t>(L) * D);
  for (auto& v : dv) v = rng.uniform(0.05, 1.0);
  auto delta = Tensor::from_values({L, D}, dv);
  std::vector<double> av(static_cast<std::size_t>(D) * N);
  for (auto& v : av) v = -rng.uniform(0.1, 2.0);
  auto a = Tensor::from_values({D, N}, av);
  auto b = random_tensor({L, N}, rng);
  auto c = random_tensor({L, N}, rng);
  auto dskip = random_tensor({D}, rng);
  auto err = numcore::grad_check(
      [](const std::vector<Tensor>& in) {
        auto y = selective_scan(in[0], in[1], in[2], in[3], in[4], in[5]);
        return numcore::mean(numcore::mul(y, y));
      },
      {x, delta, a, b, c, dskip});
  REQUIRE(err < 1e-6);
}

TEST_CASE("selective_scan validates its domain") {
  auto ok = Tensor::full({2, 1}, 1.0);
  auto bad_delta = Tensor::from_values({2, 1}, {0.5, -0.1});
  auto a = Tensor::full({1, 1}, -1.0);
  auto b = Tensor::full({2, 1}, 1.0);
  auto dskip = Tensor::full({1}, 0.0);
  REQUIRE_THROWS_AS(selective_scan(ok, bad_delta, a, b, b, dskip),
                    numcore::TensorError);
  auto bad_a = Tensor::full({1, 1}, 0.5);
  REQUIRE_THROWS_AS(selective_scan(ok, ok, bad_a, b, b, dskip),
                    numcore::TensorError);
}

TEST_CASE("cssm: zero anatomy projection makes output independent of e_a") {
  Rng rng(7);
  auto s = CssmState::init(4, 3, 6, rng);
  randomize(s.out_w, rng, 0.3);  // nonzero so the scan output is visible
  auto f = random_tensor({4, 5, 5}, rng);
  auto ea1 = numcore::l2norm_rows(random_tensor({1, 6}, rng));
  auto ea2 = numcore::l2norm_rows(random_tensor({1, 6}, rng));
  auto y1 = cssm_forward(f, ea1, s);
  auto y2 = cssm_forward(f, ea2, s);
  REQUIRE(y1.values() == y2.values());  // bit-identical

  // once p_a is nonzero the conditioning routes through C
  randomize(s.ssm.p_a, rng, 0.5);
  auto z1 = cssm_forward(f, ea1, s);
  auto z2 = cssm_forward(f, ea2, s);
  REQUIRE(z1.values() != z2.values());
}

TEST_CASE("cssm: zero input with zero biases stays zero") {
  Rng rng(8);
  auto s = CssmState::init(3, 2, 4, rng);
  randomize(s.out_w, rng, 0.3);
  auto f = Tensor::zeros({3, 4, 4});
  auto ea = numcore::l2norm_rows(random_tensor({1, 4}, rng));
  auto y = cssm_forward(f, ea, s);
  for (double v : y.values()) REQUIRE(v == 0.0);
}

TEST_CASE("cssm: 1x1 spatial input makes the 4-direction merge 4x one scan") {
  Rng rng(9);
  auto s = CssmState::init(3, 2, 4, rng);
  randomize(s.out_w, rng, 0.3);
  auto f = random_tensor({3, 1, 1}, rng);
  auto ea = numcore::l2norm_rows(random_tensor({1, 4}, rng));
  auto all = cssm_forward(f, ea, s);
  const std::vector<std::vector<int>> single{{0}};
  auto one = cssm_forward(f, ea, s, &single);
  for (int i = 0; i < all.numel(); ++i)
    REQUIRE(all.values()[i] == Catch::Approx(4.0 * one.values()[i]).margin(1e-12));
}

TEST_CASE("cssm is exactly equivariant under horizontal flip with flipped scans") {
  Rng rng(10);
  auto s = CssmState::init(4, 3, 6, rng);
  randomize(s.out_w, rng, 0.3);
  randomize(s.ssm.p_a, rng, 0.3);
  const int c = 4, h = 6, w = 5;
  auto f = random_tensor({c, h, w}, rng);
  auto ea = numcore::l2norm_rows(random_tensor({1, 6}, rng));

  auto flip_plane = [&](const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          out[(ch * h + i) * w + j] = v[(ch * h + i) * w + (w - 1 - j)];
    return out;
  };
  auto flip_pos = [&](int p) {
    const int r = p / w, col = p % w;
    return r * w + (w - 1 - col);
  };

  auto dirs = scan_direction_indices(h, w);
  auto flipped_dirs = dirs;
  for (auto& d : flipped_dirs)
    for (auto& p : d) p = flip_pos(p);

  auto base_out = cssm_forward(f, ea, s, &dirs);
  auto f_flipped = Tensor::from_values({c, h, w}, flip_plane(f.values()));
  auto flipped_out = cssm_forward(f_flipped, ea, s, &flipped_dirs);
  auto unflipped = flip_plane(flipped_out.values());
  REQUIRE(unflipped == base_out.values());  // exact, including rounding
}

TEST_CASE("transposed attention: C=1, row sums, gradient") {
  Rng rng(11);
  {
    auto s = AttnState::init(1, rng);
    randomize(s.wo, rng, 0.5);
    randomize(s.bo, rng, 0.1);
    auto f = random_tensor({1, 4, 4}, rng);
    auto got = transposed_attention(f, s);
    auto v = numcore::pointwise_conv(f, s.wv, s.bv);
    auto expect = numcore::pointwise_conv(v, s.wo, s.bo);
    for (int i = 0; i < got.numel(); ++i)
      REQUIRE(got.values()[i] == Catch::Approx(expect.values()[i]).margin(1e-12));
  }
  {
    auto s = AttnState::init(5, rng);
    auto f = random_tensor({5, 6, 6}, rng);
    auto q = numcore::l2norm_rows(numcore::reshape(numcore::pointwise_conv(f, s.wq, s.bq), {5, 36}));
    auto k = numcore::l2norm_rows(numcore::reshape(numcore::pointwise_conv(f, s.wk, s.bk), {5, 36}));
    auto attn = numcore::softmax_last_dim(
        numcore::mul(numcore::matmul(q, numcore::transpose_2d(k)), s.temperature));
    for (int r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (int cc = 0; cc < 5; ++cc) sum += attn.values()[r * 5 + cc];
      REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
    }
  }
  {
    auto s = AttnState::init(4, rng);
    randomize(s.wo, rng, 0.3);
    randomize(s.bo, rng, 0.1);
    auto f = random_tensor({4, 4, 4}, rng);
    NamedParams named;
    s.collect("", named);
    std::vector<Tensor> inputs{f};
    for (auto& [n, t] : named) inputs.push_back(t);
    auto err = numcore::grad_check(
        [&](const std::vector<Tensor>& in) {
          auto y = transposed_attention(in[0], s);
          return numcore::mean(numcore::mul(y, y));
        },
        inputs);
    REQUIRE(err < 1e-5);
  }
}

TEST_CASE("dacb is the exact identity at initialization") {
  Rng rng(12);
  for (int c : {4, 16}) {
    auto s = DacbState::init(c, 4, 8, 8, rng);
    auto f = random_tensor({c, 6, 6}, rng);
    auto e_d = numcore::l2norm_rows(random_tensor({1, 8}, rng));
    auto e_a = numcore::l2norm_rows(random_tensor({1, 8}, rng));
    auto out = dacb_forward(f, e_d, e_a, timestep_embed(3, 8), s);
    REQUIRE(out.values() == f.values());  // max abs deviation 0
  }
}

TEST_CASE("dacb parameter substitution reduces to the plain composition") {
  Rng rng(13);
  const int c = 3;
  auto s = DacbState::init(c, 2, 4, 4, rng);
  randomize(s.cssm.out_w, rng, 0.3);
  randomize(s.attn.wo, rng, 0.3);
  // alpha1=alpha2=0, gamma1=gamma2=0, beta1=beta2=1
  auto& b2 = s.mod.b2.raw_values();
  for (int i = 0; i < c; ++i) {
    b2[1 * c + i] = 1.0;  // beta1
    b2[4 * c + i] = 1.0;  // beta2
  }
  auto f = random_tensor({c, 4, 4}, rng);
  auto e_d = numcore::l2norm_rows(random_tensor({1, 4}, rng));
  auto e_a = numcore::l2norm_rows(random_tensor({1, 4}, rng));
  auto got = dacb_forward(f, e_d, e_a, timestep_embed(2, 4), s);

  auto fp = numcore::add(cssm_forward(f, e_a, s.cssm), f);
  auto expect = numcore::add(transposed_attention(fp, s.attn), fp);
  for (int i = 0; i < got.numel(); ++i)
    REQUIRE(got.values()[i] == Catch::Approx(expect.values()[i]).margin(1e-12));
}

TEST_CASE("dacb gradient passes finite differences") {
  Rng rng(14);
  auto s = DacbState::init(4, 3, 4, 4, rng);
  perturb_dacb(s, rng);
  auto f = random_tensor({4, 4, 4}, rng);
  auto e_d = numcore::l2norm_rows(random_tensor({1, 4}, rng));
  auto e_a = numcore::l2norm_rows(random_tensor({1, 4}, rng));
  std::vector<Tensor> inputs{f};
  for (auto& t : dacb_params(s)) inputs.push_back(t);
  auto err = numcore::grad_check(
      [&](const std::vector<Tensor>& in) {
        auto y = dacb_forward(in[0], e_d, e_a, timestep_embed(7, 4), s);
        return numcore::mean(numcore::mul(y, y));
      },
      inputs, 1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("denoiser: shape preservation and zero output at init") {
  Rng rng(15);
  DenoiserConfig cfg;
  cfg.levels = 3;
  cfg.widths = {8, 12, 16};
  cfg.n_state = 4;
  cfg.d_e = 8;
  cfg.t_dim = 8;
  DenoiserNet net(cfg, rng);
  auto i_t = random_tensor({1, 64, 64}, rng);
  auto i_ld = random_tensor({1, 64, 64}, rng);
  auto e_d = numcore::l2norm_rows(random_tensor({1, 8}, rng));
  auto e_a = numcore::l2norm_rows(random_tensor({1, 8}, rng));
  auto out = denoiser_forward(i_t, i_ld, 11, e_d, e_a, net);
  REQUIRE(out.shape() == Shape{1, 64, 64});
  for (double v : out.values()) REQUIRE(v == 0.0);  // zero-init output proj
  REQUIRE(net.forward_count() == 1);
}

TEST_CASE("denoiser checkpoint round-trips through DADF format") {
  namespace fs = std::filesystem;
  Rng rng(16);
  DenoiserConfig cfg;
  cfg.levels = 2;
  cfg.widths = {4, 6};
  cfg.n_state = 2;
  cfg.d_e = 4;
  cfg.t_dim = 4;
  DenoiserNet net(cfg, rng);
  const auto path = (fs::temp_directory_path() / "founddiff_dadf_test.bin").string();
  save_denoiser(net, path);
  auto loaded = load_denoiser(cfg, path);
  auto pa = net.named_params();
  auto pb = loaded.named_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].first == pb[i].first);
    for (std::size_t k = 0; k < pa[i].second.values().size(); ++k)
      REQUIRE(pb[i].second.values()[k] ==
              static_cast<double>(static_cast<float>(pa[i].second.values()[k])));
  }
  fs::remove(path);
}

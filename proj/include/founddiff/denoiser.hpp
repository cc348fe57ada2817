#pragma once

// The residual-predicting denoiser: a small U-Net whose every level applies
// a residual local-enhance block followed by a dose/anatomy conditional
// block. All blocks receive the same (e_d, e_a, t) conditioning. The output
// projection is zero-initialized, so a fresh network predicts a zero
// residual.

#include <atomic>
#include <string>
#include <vector>

#include "founddiff/checkpoint.hpp"
#include "founddiff/dacb.hpp"
#include "founddiff/errors.hpp"
#include "founddiff/rng.hpp"
#include "founddiff/tensor.hpp"

namespace founddiff::dadiff {

struct DenoiserConfig {
  int levels = 3;
  std::vector<int> widths = {16, 32, 64};
  int n_state = 8;
  int d_e = 32;
  int t_dim = 16;          // timestep embedding dim; defaults to widths[0]
  int scan_directions = 4;  // 1, 2 or 4
  bool use_dose_condition = true;     // ablation switch: e_d -> 0 when false
  bool use_anatomy_condition = true;  // ablation switch: e_a -> 0 when false

  void validate() const {
    if (levels < 1 || static_cast<int>(widths.size()) != levels)
      throw ConfigError("denoiser: widths must list one width per level");
    for (int w : widths)
      if (w < 1) throw ConfigError("denoiser: widths must be positive");
    if (n_state < 1) throw ConfigError("denoiser: n_state must be positive");
    if (d_e < 1) throw ConfigError("denoiser: d_e must be positive");
    if (t_dim < 2 || t_dim % 2 != 0)
      throw ConfigError("denoiser: t_dim must be even and >= 2");
    if (scan_directions != 1 && scan_directions != 2 && scan_directions != 4)
      throw ConfigError("denoiser: scan_directions must be 1, 2 or 4");
  }
};

struct LevelBlock {
  RlebState rleb;
  DacbState dacb;

  static LevelBlock init(int channels, const DenoiserConfig& cfg, Rng& rng) {
    return {RlebState::init(channels, rng),
            DacbState::init(channels, cfg.n_state, cfg.d_e, cfg.t_dim, rng)};
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    rleb.collect(prefix + "rleb_", out);
    dacb.collect(prefix + "dacb_", out);
  }
};

class DenoiserNet {
 public:
  DenoiserNet() = default;
  DenoiserNet(DenoiserNet&& o) noexcept
      : cfg_(std::move(o.cfg_)), in_w_(std::move(o.in_w_)), in_b_(std::move(o.in_b_)),
        enc_(std::move(o.enc_)), down_w_(std::move(o.down_w_)),
        down_b_(std::move(o.down_b_)), up_w_(std::move(o.up_w_)),
        up_b_(std::move(o.up_b_)), fuse_w_(std::move(o.fuse_w_)),
        fuse_b_(std::move(o.fuse_b_)), dec_(std::move(o.dec_)),
        out_w_(std::move(o.out_w_)), out_b_(std::move(o.out_b_)),
        forward_count_(o.forward_count_.load()) {}
  DenoiserNet& operator=(DenoiserNet&& o) noexcept {
    cfg_ = std::move(o.cfg_);
    in_w_ = std::move(o.in_w_);
    in_b_ = std::move(o.in_b_);
    enc_ = std::move(o.enc_);
    down_w_ = std::move(o.down_w_);
    down_b_ = std::move(o.down_b_);
    up_w_ = std::move(o.up_w_);
    up_b_ = std::move(o.up_b_);
    fuse_w_ = std::move(o.fuse_w_);
    fuse_b_ = std::move(o.fuse_b_);
    dec_ = std::move(o.dec_);
    out_w_ = std::move(o.out_w_);
    out_b_ = std::move(o.out_b_);
    forward_count_ = o.forward_count_.load();
    return *this;
  }

  DenoiserNet(DenoiserConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    using detail::init_normal;
    using detail::zeros_param;
    const auto& w = cfg_.widths;
    in_w_ = init_normal({w[0], 2, 3, 3}, std::sqrt(2.0 / 18.0), rng);
    in_b_ = zeros_param({w[0]});
    for (int l = 0; l < cfg_.levels; ++l)
      enc_.push_back(LevelBlock::init(w[l], cfg_, rng));
    for (int l = 0; l + 1 < cfg_.levels; ++l) {
      down_w_.push_back(init_normal({w[l + 1], w[l], 3, 3},
                                    std::sqrt(2.0 / (9.0 * w[l])), rng));
      down_b_.push_back(zeros_param({w[l + 1]}));
      up_w_.push_back(init_normal({w[l], w[l + 1], 3, 3},
                                  std::sqrt(2.0 / (9.0 * w[l + 1])), rng));
      up_b_.push_back(zeros_param({w[l]}));
      fuse_w_.push_back(init_normal({w[l], 2 * w[l], 3, 3},
                                    std::sqrt(2.0 / (18.0 * w[l])), rng));
      fuse_b_.push_back(zeros_param({w[l]}));
      dec_.push_back(LevelBlock::init(w[l], cfg_, rng));
    }
    out_w_ = zeros_param({1, w[0], 3, 3});
    out_b_ = zeros_param({1});
  }

  const DenoiserConfig& config() const { return cfg_; }

  NamedParams named_params() const {
    NamedParams p;
    p.emplace_back("in_w", in_w_);
    p.emplace_back("in_b", in_b_);
    for (std::size_t l = 0; l < enc_.size(); ++l)
      enc_[l].collect("enc" + std::to_string(l) + "_", p);
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      p.emplace_back("down" + std::to_string(l) + "_w", down_w_[l]);
      p.emplace_back("down" + std::to_string(l) + "_b", down_b_[l]);
      p.emplace_back("up" + std::to_string(l) + "_w", up_w_[l]);
      p.emplace_back("up" + std::to_string(l) + "_b", up_b_[l]);
      p.emplace_back("fuse" + std::to_string(l) + "_w", fuse_w_[l]);
      p.emplace_back("fuse" + std::to_string(l) + "_b", fuse_b_[l]);
      dec_[l].collect("dec" + std::to_string(l) + "_", p);
    }
    p.emplace_back("out_w", out_w_);
    p.emplace_back("out_b", out_b_);
    return p;
  }

  std::vector<numcore::Tensor> params() const {
    std::vector<numcore::Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  long forward_count() const { return forward_count_.load(); }
  void reset_forward_count() { forward_count_ = 0; }

  const std::vector<LevelBlock>& encoder_blocks() const { return enc_; }
  const std::vector<LevelBlock>& decoder_blocks() const { return dec_; }

  friend numcore::Tensor denoiser_forward(const numcore::Tensor&,
                                          const numcore::Tensor&, int,
                                          const numcore::Tensor&,
                                          const numcore::Tensor&,
                                          const DenoiserNet&);

 private:
  DenoiserConfig cfg_;
  Tensor in_w_, in_b_;
  std::vector<LevelBlock> enc_;
  std::vector<Tensor> down_w_, down_b_, up_w_, up_b_, fuse_w_, fuse_b_;
  std::vector<LevelBlock> dec_;
  Tensor out_w_, out_b_;
  mutable std::atomic<long> forward_count_{0};
};

namespace detail {

// Nearest-neighbour 2x upsample built from gather over the row-major
// flattening.
inline Tensor upsample2x_nearest(const Tensor& x) {
  using namespace numcore;
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  std::vector<int> idx(static_cast<std::size_t>(4) * h * w);
  int p = 0;
  for (int i = 0; i < 2 * h; ++i)
    for (int j = 0; j < 2 * w; ++j) idx[p++] = (i / 2) * w + (j / 2);
  auto rows = transpose_2d(reshape(x, {c, h * w}));
  return reshape(transpose_2d(gather_sequence(rows, idx)), {c, 2 * h, 2 * w});
}

}  // namespace detail

// Predicts the residual plane from (I_t, I_ld) under (e_d, e_a, t)
// conditioning. Shape-preserving; requires H and W divisible by
// 2^(levels-1).
inline numcore::Tensor denoiser_forward(const numcore::Tensor& i_t,
                                        const numcore::Tensor& i_ld, int t,
                                        const numcore::Tensor& e_d,
                                        const numcore::Tensor& e_a,
                                        const DenoiserNet& net) {
  using namespace numcore;
  const auto& cfg = net.cfg_;
  if (i_t.shape() != i_ld.shape())
    throw TensorError("denoiser_forward: I_t and I_ld shapes differ");
  const int h = i_t.shape()[1], w = i_t.shape()[2];
  const int factor = 1 << (cfg.levels - 1);
  if (h % factor != 0 || w % factor != 0)
    throw TensorError("denoiser_forward: image size must be divisible by " +
                      std::to_string(factor));
  ++net.forward_count_;

  auto t_emb = timestep_embed(t, cfg.t_dim);
  auto e_d_used = cfg.use_dose_condition ? e_d : Tensor::zeros({1, cfg.d_e});
  auto e_a_used = cfg.use_anatomy_condition ? e_a : Tensor::zeros({1, cfg.d_e});

  const int n_dirs = cfg.scan_directions;
  auto run_block = [&](const LevelBlock& blk, Tensor x) {
    x = rleb_forward(x, blk.rleb);
    if (n_dirs == 4) return dacb_forward(x, e_d_used, e_a_used, t_emb, blk.dacb);
    // reduced direction sets share the same block structure
    const auto all = scan_direction_indices(x.shape()[1], x.shape()[2]);
    const std::vector<std::vector<int>> dirs(all.begin(), all.begin() + n_dirs);
    const auto mp = modulation(t_emb, e_d_used, blk.dacb.mod);
    auto f1 = add(mul(layer_norm_channels(x, blk.dacb.norm1_g, blk.dacb.norm1_b),
                      mp.gamma1),
                  mul(x, mp.beta1));
    auto fp = add(add(cssm_forward(f1, e_a_used, blk.dacb.cssm, &dirs),
                      mul(f1, mp.alpha1)),
                  x);
    auto f2 = add(mul(layer_norm_channels(fp, blk.dacb.norm2_g, blk.dacb.norm2_b),
                      mp.gamma2),
                  mul(fp, mp.beta2));
    return add(add(transposed_attention(fp, blk.dacb.attn), mul(f2, mp.alpha2)), fp);
  };

  auto x = conv2d_3x3_pad1(concat_channels({i_t, i_ld}), net.in_w_, net.in_b_);
  std::vector<Tensor> skips;
  for (int l = 0; l + 1 < cfg.levels; ++l) {
    x = run_block(net.enc_[l], x);
    skips.push_back(x);
    x = conv2d_3x3_pad1(x, net.down_w_[l], net.down_b_[l], 2);
  }
  x = run_block(net.enc_.back(), x);
  for (int l = cfg.levels - 2; l >= 0; --l) {
    x = conv2d_3x3_pad1(detail::upsample2x_nearest(x), net.up_w_[l], net.up_b_[l]);
    x = conv2d_3x3_pad1(concat_channels({x, skips[l]}), net.fuse_w_[l], net.fuse_b_[l]);
    x = run_block(net.dec_[l], x);
  }
  return conv2d_3x3_pad1(x, net.out_w_, net.out_b_);
}

inline constexpr char kDenoiserMagic[4] = {'D', 'A', 'D', 'F'};

inline void save_denoiser(const DenoiserNet& net, const std::string& path) {
  auto params = net.named_params();
  save_checkpoint(path, kDenoiserMagic, params);
}

inline DenoiserNet load_denoiser(const DenoiserConfig& cfg, const std::string& path) {
  Rng rng(0);
  DenoiserNet net(cfg, rng);
  auto params = net.named_params();
  load_checkpoint(path, kDenoiserMagic, params);
  return net;
}

}  // namespace founddiff::dadiff

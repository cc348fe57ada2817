#pragma once

// Stage 1: dose/anatomy perception. A small convolutional encoder with a
// dose head and an anatomy head, trained with a dose-score MSE, a ranking
// contrastive loss over dose labels, and a supervised anatomy
// discrimination loss. The two prompt embeddings are free learnable
// vectors.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "founddiff/checkpoint.hpp"
#include "founddiff/dataset.hpp"
#include "founddiff/errors.hpp"
#include "founddiff/image.hpp"
#include "founddiff/metrics.hpp"
#include "founddiff/optim.hpp"
#include "founddiff/parallel.hpp"
#include "founddiff/rng.hpp"
#include "founddiff/tensor.hpp"

namespace founddiff::perception {

using numcore::Shape;
using numcore::Tensor;

struct PerceptionConfig {
  int d_e = 32;      // embedding dimension
  double tau = 0.1;  // contrastive temperature
};

inline constexpr int kEncoderWidths[4] = {16, 32, 64, 128};

struct PerceptionOutput {
  Tensor e_d;    // [1, d_e], unit norm
  Tensor e_a;    // [1, d_e], unit norm
  Tensor y_hat;  // [1], in (0, 1)
};

namespace detail {

inline Tensor init_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numcore::numel_of(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace detail

class PerceptionModel {
 public:
  PerceptionModel() = default;

  PerceptionModel(PerceptionConfig cfg, Rng& rng) : cfg_(cfg) {
    int ci = 1;
    for (int l = 0; l < 4; ++l) {
      const int co = kEncoderWidths[l];
      enc_w_[l] = detail::init_normal({co, ci, 3, 3}, std::sqrt(2.0 / (9.0 * ci)), rng);
      enc_b_[l] = Tensor::zeros({co}, true);
      ci = co;
    }
    // seed the first four kernels as high-pass filters so local noise power
    // is readable from the very first step (they remain trainable)
    {
      auto& w = enc_w_[0].raw_values();
      const double g = 8.0;
      const double seeds[4][9] = {
          {0, -1, 0, -1, 4, -1, 0, -1, 0},
          {0, 0, 0, -1, 1, 0, 0, 0, 0},
          {0, -1, 0, 0, 1, 0, 0, 0, 0},
          {-1, 0, 0, 0, 1, 0, 0, 0, 0},
      };
      for (int k = 0; k < 4; ++k)
        for (int i = 0; i < 9; ++i) w[k * 9 + i] = g * seeds[k][i];
    }
    const int hidden = 64;
    dose_w1_ = detail::init_normal({128, hidden}, std::sqrt(2.0 / 128.0), rng);
    dose_b1_ = Tensor::zeros({hidden}, true);
    dose_w2_ = detail::init_normal({hidden, cfg_.d_e}, std::sqrt(2.0 / hidden), rng);
    dose_b2_ = Tensor::zeros({cfg_.d_e}, true);
    anat_w1_ = detail::init_normal({128, hidden}, std::sqrt(2.0 / 128.0), rng);
    anat_b1_ = Tensor::zeros({hidden}, true);
    anat_w2_ = detail::init_normal({hidden, cfg_.d_e}, std::sqrt(2.0 / hidden), rng);
    anat_b2_ = Tensor::zeros({cfg_.d_e}, true);
    // prompt vectors must start distinguishable
    do {
      e_clean_ = detail::init_normal({cfg_.d_e}, 1.0 / std::sqrt(cfg_.d_e), rng);
      e_noisy_ = detail::init_normal({cfg_.d_e}, 1.0 / std::sqrt(cfg_.d_e), rng);
    } while (detail::cosine(e_clean_.values(), e_noisy_.values()) >= 0.99);
  }

  const PerceptionConfig& config() const { return cfg_; }

  NamedParams named_params() const {
    NamedParams p;
    for (int l = 0; l < 4; ++l) {
      p.emplace_back("enc" + std::to_string(l) + "_w", enc_w_[l]);
      p.emplace_back("enc" + std::to_string(l) + "_b", enc_b_[l]);
    }
    p.emplace_back("dose_w1", dose_w1_);
    p.emplace_back("dose_b1", dose_b1_);
    p.emplace_back("dose_w2", dose_w2_);
    p.emplace_back("dose_b2", dose_b2_);
    p.emplace_back("anat_w1", anat_w1_);
    p.emplace_back("anat_b1", anat_b1_);
    p.emplace_back("anat_w2", anat_w2_);
    p.emplace_back("anat_b2", anat_b2_);
    p.emplace_back("e_clean", e_clean_);
    p.emplace_back("e_noisy", e_noisy_);
    return p;
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  const Tensor& e_clean() const { return e_clean_; }
  const Tensor& e_noisy() const { return e_noisy_; }
  const Tensor& enc_w(int l) const { return enc_w_[l]; }
  const Tensor& enc_b(int l) const { return enc_b_[l]; }
  const Tensor& dose_w1() const { return dose_w1_; }
  const Tensor& dose_b1() const { return dose_b1_; }
  const Tensor& dose_w2() const { return dose_w2_; }
  const Tensor& dose_b2() const { return dose_b2_; }
  const Tensor& anat_w1() const { return anat_w1_; }
  const Tensor& anat_b1() const { return anat_b1_; }
  const Tensor& anat_w2() const { return anat_w2_; }
  const Tensor& anat_b2() const { return anat_b2_; }

 private:
  PerceptionConfig cfg_;
  Tensor enc_w_[4], enc_b_[4];
  Tensor dose_w1_, dose_b1_, dose_w2_, dose_b2_;
  Tensor anat_w1_, anat_b1_, anat_w2_, anat_b2_;
  Tensor e_clean_, e_noisy_;
};

inline Tensor tensor_from_image(const Image& img) {
  return Tensor::from_values({1, img.height, img.width}, img.data);
}

// Two-way softmax of the prompt inner products; in (0, 1) by construction.
inline Tensor dose_score(const Tensor& e_d, const Tensor& e_clean,
                         const Tensor& e_noisy) {
  using namespace numcore;
  const int d = e_d.shape().back();
  if (e_clean.numel() != d || e_noisy.numel() != d)
    throw Error("dose_score: embedding dimensions differ");
  auto row = e_d.rank() == 2 ? e_d : reshape(e_d, {1, d});
  auto dc = reshape(matmul(row, reshape(e_clean, {d, 1})), {1});
  auto dn = reshape(matmul(row, reshape(e_noisy, {d, 1})), {1});
  auto probs = softmax_last_dim(concat_channels({dc, dn}));
  return numcore::sum(mul(probs, Tensor::from_values({2}, {1.0, 0.0})));
}

// Full perception pass over one window-normalized image.
inline PerceptionOutput encode_one(const PerceptionModel& m, const Image& img) {
  using namespace numcore;
  if (img.height < 16 || img.width < 16)
    throw Error("encode: image must be at least 16x16");
  Tensor x = tensor_from_image(img);
  for (int l = 0; l < 4; ++l) {
    try {
      x = silu(conv2d_3x3_pad1(x, m.enc_w(l), m.enc_b(l), 2));
    } catch (const TensorError& e) {
      throw TensorError("encoder layer " + std::to_string(l) + ": " + e.what());
    }
  }
  const int c = x.shape()[0];
  const int hw = x.shape()[1] * x.shape()[2];
  auto pool = Tensor::full({hw, 1}, 1.0 / hw);
  // normalized pooled features keep the head input scale independent of the
  // conv stack's gain
  auto feat = layer_norm(transpose_2d(matmul(reshape(x, {c, hw}), pool)));  // [1, c]

  auto head = [&](const Tensor& w1, const Tensor& b1, const Tensor& w2,
                  const Tensor& b2) {
    auto h = silu(add(matmul(feat, w1), b1));
    return l2norm_rows(add(matmul(h, w2), b2));
  };
  PerceptionOutput out;
  out.e_d = head(m.dose_w1(), m.dose_b1(), m.dose_w2(), m.dose_b2());
  out.e_a = head(m.anat_w1(), m.anat_b1(), m.anat_w2(), m.anat_b2());
  out.y_hat = dose_score(out.e_d, m.e_clean(), m.e_noisy());
  return out;
}

inline Tensor loss_dose(const Tensor& y_hat, const Tensor& y_true) {
  using namespace numcore;
  if (y_hat.numel() != y_true.numel())
    throw Error("loss_dose: prediction/label lengths differ");
  auto diff = sub(y_hat, y_true);
  return numcore::mean(mul(diff, diff));
}

// Ranking contrastive loss over dose labels. For each ordered pair (i, j)
// the candidate set keeps every k != i whose L1 label distance from i is at
// least the (i, j) distance; ties stay in the set.
inline Tensor loss_rank(const Tensor& emb, const std::vector<double>& labels,
                        double tau) {
  using namespace numcore;
  if (emb.rank() != 2) throw Error("loss_rank: embeddings must be [2N, d]");
  const int n = emb.shape()[0], d = emb.shape()[1];
  if (n < 2 || static_cast<int>(labels.size()) != n)
    throw Error("loss_rank: need >= 2 embeddings with matching labels");
  if (tau <= 0.0) throw Error("loss_rank: tau must be positive");

  const auto& ev = emb.values();
  std::vector<double> s(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k)
        acc += ev[static_cast<std::size_t>(i) * d + k] * ev[static_cast<std::size_t>(j) * d + k];
      s[static_cast<std::size_t>(i) * n + j] = acc / tau;
    }

  std::vector<double> ds(static_cast<std::size_t>(n) * n, 0.0);
  const double inv_count = 1.0 / (static_cast<double>(n) * (n - 1));
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* si = &s[static_cast<std::size_t>(i) * n];
    double* dsi = &ds[static_cast<std::size_t>(i) * n];
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dij = std::abs(labels[i] - labels[j]);
      double mx = -1e300;
      for (int k = 0; k < n; ++k)
        if (k != i && std::abs(labels[i] - labels[k]) >= dij) mx = std::max(mx, si[k]);
      double z = 0.0;
      for (int k = 0; k < n; ++k)
        if (k != i && std::abs(labels[i] - labels[k]) >= dij) z += std::exp(si[k] - mx);
      loss += (mx + std::log(z) - si[j]) * inv_count;
      for (int k = 0; k < n; ++k)
        if (k != i && std::abs(labels[i] - labels[k]) >= dij)
          dsi[k] += std::exp(si[k] - mx) / z * inv_count;
      dsi[j] -= inv_count;
    }
  }

  return make_custom_op(
      "loss_rank", {emb}, {1}, {loss}, [n, d, ds, tau](numcore::detail::Node& nd) {
        const double g0 = nd.grad[0] / tau;
        const auto& ev = nd.parents[0]->values;
        auto& de = nd.parents[0]->ensure_grad();
        for (int a = 0; a < n; ++a)
          for (int b = 0; b < n; ++b) {
            const double c = (ds[static_cast<std::size_t>(a) * n + b] +
                              ds[static_cast<std::size_t>(b) * n + a]) * g0;
            if (c == 0.0) continue;
            const double* eb = &ev[static_cast<std::size_t>(b) * d];
            double* da = &de[static_cast<std::size_t>(a) * d];
            for (int k = 0; k < d; ++k) da[k] += c * eb[k];
          }
      });
}

// Supervised anatomy discrimination loss; self excluded from both the
// positive set and the denominator.
inline Tensor loss_anatomy(const Tensor& emb, const std::vector<int>& labels,
                           double tau) {
  using namespace numcore;
  if (emb.rank() != 2) throw Error("loss_anatomy: embeddings must be [N, d]");
  const int n = emb.shape()[0], d = emb.shape()[1];
  if (n < 2 || static_cast<int>(labels.size()) != n)
    throw Error("loss_anatomy: need >= 2 embeddings with matching labels");
  if (tau <= 0.0) throw Error("loss_anatomy: tau must be positive");

  const auto& ev = emb.values();
  std::vector<double> s(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k)
        acc += ev[static_cast<std::size_t>(i) * d + k] * ev[static_cast<std::size_t>(j) * d + k];
      s[static_cast<std::size_t>(i) * n + j] = acc / tau;
    }

  std::vector<double> ds(static_cast<std::size_t>(n) * n, 0.0);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    int positives = 0;
    for (int p = 0; p < n; ++p)
      if (p != i && labels[p] == labels[i]) ++positives;
    if (positives == 0)
      throw Error("loss_anatomy: sample " + std::to_string(i) +
                  " has no positive in the batch");
    const double* si = &s[static_cast<std::size_t>(i) * n];
    double* dsi = &ds[static_cast<std::size_t>(i) * n];
    double mx = -1e300;
    for (int j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, si[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j)
      if (j != i) z += std::exp(si[j] - mx);
    const double lse = mx + std::log(z);
    // L_i = lse - mean over positives of s_ip
    loss += lse;
    for (int j = 0; j < n; ++j)
      if (j != i) dsi[j] += std::exp(si[j] - mx) / z;
    for (int p = 0; p < n; ++p)
      if (p != i && labels[p] == labels[i]) {
        loss -= si[p] / positives;
        dsi[p] -= 1.0 / positives;
      }
  }

  return make_custom_op(
      "loss_anatomy", {emb}, {1}, {loss}, [n, d, ds, tau](numcore::detail::Node& nd) {
        const double g0 = nd.grad[0] / tau;
        const auto& ev = nd.parents[0]->values;
        auto& de = nd.parents[0]->ensure_grad();
        for (int a = 0; a < n; ++a)
          for (int b = 0; b < n; ++b) {
            const double c = (ds[static_cast<std::size_t>(a) * n + b] +
                              ds[static_cast<std::size_t>(b) * n + a]) * g0;
            if (c == 0.0) continue;
            const double* eb = &ev[static_cast<std::size_t>(b) * d];
            double* da = &de[static_cast<std::size_t>(a) * d];
            for (int k = 0; k < d; ++k) da[k] += c * eb[k];
          }
      });
}

struct ContrastBatch {
  Tensor y_hat;             // [2N]
  Tensor dose_embeddings;   // [2N, d_e]
  Tensor anat_embeddings;   // [2N, d_e]
  std::vector<double> dose_labels;
  std::vector<int> anatomy_labels;
  double tau = 0.1;
};

inline Tensor loss_total(const ContrastBatch& b) {
  using namespace numcore;
  auto target = Tensor::from_values({static_cast<int>(b.dose_labels.size())},
                                    b.dose_labels);
  auto dose_term = add(loss_dose(b.y_hat, target),
                       loss_rank(b.dose_embeddings, b.dose_labels, b.tau));
  return add(dose_term, loss_anatomy(b.anat_embeddings, b.anatomy_labels, b.tau));
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

struct TrainPerceptionConfig {
  int epochs = 30;
  int batch_sources = 4;  // N source images -> 2N crops
  double lr0 = 1e-3;
  double lr_end = 1e-5;
  double momentum = 0.9;
  double crop_area = 0.75;
  // the prompt vectors train faster than the backbone: the score head must
  // re-align whenever the ranking geometry settles
  double prompt_lr_scale = 30.0;
};

struct PerceptionTrainResult {
  PerceptionModel model;
  std::vector<double> epoch_loss;
};

inline Image random_crop(const Image& img, double area, Rng& rng) {
  const int side_h = std::max(16, static_cast<int>(std::lround(img.height * std::sqrt(area))));
  const int side_w = std::max(16, static_cast<int>(std::lround(img.width * std::sqrt(area))));
  const int oy = static_cast<int>(rng.uniform_index(img.height - side_h + 1));
  const int ox = static_cast<int>(rng.uniform_index(img.width - side_w + 1));
  Image out(side_h, side_w);
  for (int i = 0; i < side_h; ++i)
    for (int j = 0; j < side_w; ++j) out.at(i, j) = img.at(oy + i, ox + j);
  return out;
}

inline double run_perception_epochs(PerceptionModel& model,
                                    const std::vector<ctsim::CtSample>& dataset,
                                    const TrainPerceptionConfig& tc, Rng& rng,
                                    std::vector<double>& trace, int start_epoch) {
  const int n = static_cast<int>(dataset.size());
  const int batch = std::min(tc.batch_sources, n);
  const int steps_per_epoch = n / batch;
  const int total_steps = tc.epochs * steps_per_epoch;
  auto all = model.params();
  std::vector<Tensor> body(all.begin(), all.end() - 2);
  std::vector<Tensor> prompts(all.end() - 2, all.end());
  SgdMomentum opt(body, tc.momentum);
  SgdMomentum prompt_opt(prompts, tc.momentum);

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  double last = 0.0;
  for (int epoch = start_epoch; epoch < start_epoch + tc.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_index(i + 1)]);
    double epoch_loss = 0.0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      ContrastBatch cb;
      cb.tau = model.config().tau;
      std::vector<Tensor> e_d_rows, e_a_rows, y_rows;
      for (int b = 0; b < batch; ++b) {
        const auto& sample = dataset[order[step * batch + b]];
        for (int view = 0; view < 2; ++view) {
          auto out = encode_one(model, random_crop(sample.ldct, tc.crop_area, rng));
          e_d_rows.push_back(out.e_d);
          e_a_rows.push_back(out.e_a);
          y_rows.push_back(out.y_hat);
          cb.dose_labels.push_back(sample.y_d);
          cb.anatomy_labels.push_back(static_cast<int>(sample.anatomy));
        }
      }
      cb.dose_embeddings = numcore::concat_channels(e_d_rows);
      cb.anat_embeddings = numcore::concat_channels(e_a_rows);
      cb.y_hat = numcore::concat_channels(y_rows);

      auto loss = loss_total(cb);
      if (!std::isfinite(loss.item()))
        throw DivergenceError("perception training diverged at epoch " +
                              std::to_string(epoch));
      opt.zero_grad();
      prompt_opt.zero_grad();
      numcore::backward(loss);
      const int global_step = (epoch - start_epoch) * steps_per_epoch + step;
      const double lr = cosine_lr(tc.lr0, tc.lr_end, global_step, total_steps);
      opt.step(lr);
      prompt_opt.step(tc.prompt_lr_scale * lr);
      epoch_loss += loss.item();
    }
    last = epoch_loss / steps_per_epoch;
    trace.push_back(last);
  }
  return last;
}

inline PerceptionTrainResult train_perception(const PerceptionConfig& cfg,
                                              const TrainPerceptionConfig& tc,
                                              const std::vector<ctsim::CtSample>& dataset,
                                              Rng& rng) {
  if (dataset.size() < 2)
    throw DataError("train_perception: dataset too small");
  PerceptionTrainResult result;
  result.model = PerceptionModel(cfg, rng);
  run_perception_epochs(result.model, dataset, tc, rng, result.epoch_loss, 0);
  return result;
}

struct PerceptionEval {
  double plcc = 0.0;
  double srocc = 0.0;
  double anatomy_acc = 0.0;
};

struct EncodedSample {
  std::vector<double> e_d, e_a;
  double y_hat = 0.0;
};

inline EncodedSample encode_frozen(const PerceptionModel& m, const Image& img) {
  numcore::NoGradGuard ng;
  auto out = encode_one(m, img);
  return {out.e_d.values(), out.e_a.values(), out.y_hat.item()};
}

inline PerceptionEval eval_perception(const PerceptionModel& model,
                                      const std::vector<ctsim::CtSample>& dataset) {
  if (dataset.empty()) throw DataError("eval_perception: empty dataset");
  const int n = static_cast<int>(dataset.size());
  std::vector<EncodedSample> enc(n);
  parallel_for(n, [&](int i) { enc[i] = encode_frozen(model, dataset[i].ldct); });

  std::vector<double> y_hat(n), y_true(n);
  for (int i = 0; i < n; ++i) {
    y_hat[i] = enc[i].y_hat;
    y_true[i] = dataset[i].y_d;
  }

  PerceptionEval ev;
  ev.plcc = metrics::plcc(y_hat, y_true);
  ev.srocc = metrics::srocc(y_hat, y_true);

  const int d = static_cast<int>(enc[0].e_a.size());
  std::vector<std::vector<double>> centroid(3, std::vector<double>(d, 0.0));
  std::vector<int> count(3, 0);
  for (int i = 0; i < n; ++i) {
    const int c = static_cast<int>(dataset[i].anatomy);
    for (int k = 0; k < d; ++k) centroid[c][k] += enc[i].e_a[k];
    ++count[c];
  }
  for (int c = 0; c < 3; ++c)
    if (count[c])
      for (int k = 0; k < d; ++k) centroid[c][k] /= count[c];
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    double best = 1e300;
    int best_c = -1;
    for (int c = 0; c < 3; ++c) {
      if (!count[c]) continue;
      double dist = 0.0;
      for (int k = 0; k < d; ++k) {
        const double diff = enc[i].e_a[k] - centroid[c][k];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        best_c = c;
      }
    }
    correct += best_c == static_cast<int>(dataset[i].anatomy) ? 1 : 0;
  }
  ev.anatomy_acc = static_cast<double>(correct) / n;
  return ev;
}

inline constexpr char kPerceptionMagic[4] = {'D', 'A', 'C', 'P'};

inline void save_perception(const PerceptionModel& m, const std::string& path) {
  auto params = m.named_params();
  save_checkpoint(path, kPerceptionMagic, params);
}

inline PerceptionModel load_perception(const PerceptionConfig& cfg,
                                       const std::string& path) {
  Rng rng(0);
  PerceptionModel m(cfg, rng);
  auto params = m.named_params();
  load_checkpoint(path, kPerceptionMagic, params);
  return m;
}

// CSV export of embeddings for external visualization.
inline void export_embeddings(const PerceptionModel& model,
                              const std::vector<ctsim::CtSample>& dataset,
                              const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write embeddings csv: " + path);
  const int d = model.config().d_e;
  f << "sample,y_d,anatomy";
  for (int k = 0; k < d; ++k) f << ",e_d" << k;
  for (int k = 0; k < d; ++k) f << ",e_a" << k;
  f << "\n";
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto enc = encode_frozen(model, dataset[i].ldct);
    f << i << "," << dataset[i].y_d << "," << ctsim::family_name(dataset[i].anatomy);
    for (double v : enc.e_d) f << "," << v;
    for (double v : enc.e_a) f << "," << v;
    f << "\n";
  }
}

}  // namespace founddiff::perception

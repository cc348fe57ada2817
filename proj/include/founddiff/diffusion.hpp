#pragma once

// Residual diffusion: the image walks from NDCT to LDCT as the residual is
// blended in with growing noise. Cumulative schedule: alpha_bar_t = t/T,
// beta_bar_t = eta * alpha_bar_t, so the marginal is
//   I_t = I_nd + alpha_bar_t * I_res + beta_bar_t * eps,
// the terminal state is the LDCT image itself, and a deterministic few-step
// update with the true residual recovers I_nd exactly regardless of the
// step count.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "founddiff/dataset.hpp"
#include "founddiff/denoiser.hpp"
#include "founddiff/errors.hpp"
#include "founddiff/image.hpp"
#include "founddiff/optim.hpp"
#include "founddiff/perception.hpp"
#include "founddiff/rng.hpp"

namespace founddiff::diffusion {

struct DiffusionSchedule {
  int t_steps = 100;  // T
  double eta = 0.2;
  std::vector<double> alpha_bar;  // [0..T]
  std::vector<double> beta_bar;   // [0..T]

  double alpha_step() const { return 1.0 / t_steps; }
  double beta_sq(int t) const {
    return beta_bar[t] * beta_bar[t] - beta_bar[t - 1] * beta_bar[t - 1];
  }
};

inline DiffusionSchedule build_schedule(int t_steps, double eta) {
  if (t_steps < 1) throw ConfigError("schedule: T must be >= 1");
  if (eta < 0.0) throw ConfigError("schedule: eta must be >= 0");
  DiffusionSchedule s;
  s.t_steps = t_steps;
  s.eta = eta;
  s.alpha_bar.resize(t_steps + 1);
  s.beta_bar.resize(t_steps + 1);
  for (int t = 0; t <= t_steps; ++t) {
    s.alpha_bar[t] = static_cast<double>(t) / t_steps;
    s.beta_bar[t] = eta * s.alpha_bar[t];
  }
  return s;
}

struct SamplerPlan {
  int step_count = 2;
  std::vector<int> timesteps;  // strictly decreasing, T ... 0 (size S+1)
  bool stochastic_init = false;

  void validate(int t_steps) const {
    if (step_count < 1 || static_cast<int>(timesteps.size()) != step_count + 1)
      throw ConfigError("sampler plan: need step_count+1 timesteps");
    if (timesteps.front() != t_steps || timesteps.back() != 0)
      throw ConfigError("sampler plan: endpoints must be exactly T and 0");
    for (int i = 1; i <= step_count; ++i)
      if (timesteps[i] >= timesteps[i - 1])
        throw ConfigError("sampler plan: timesteps must strictly decrease");
  }
};

inline SamplerPlan uniform_plan(int t_steps, int step_count,
                                bool stochastic_init = false) {
  if (step_count < 1 || step_count > t_steps)
    throw ConfigError("sampler plan: need 1 <= steps <= T");
  SamplerPlan p;
  p.step_count = step_count;
  p.stochastic_init = stochastic_init;
  for (int i = step_count; i >= 0; --i)
    p.timesteps.push_back(static_cast<int>(std::lround(
        static_cast<double>(t_steps) * i / step_count)));
  p.validate(t_steps);
  return p;
}

// I_t = I_nd + alpha_bar_t * I_res + beta_bar_t * eps
inline Image forward_sample(const Image& i_nd, const Image& i_res, int t,
                            const Image& eps, const DiffusionSchedule& s) {
  if (!i_nd.same_shape(i_res) || !i_nd.same_shape(eps))
    throw Error("forward_sample: shapes differ");
  if (t < 0 || t > s.t_steps) throw Error("forward_sample: t outside schedule");
  Image out(i_nd.height, i_nd.width);
  const double ab = s.alpha_bar[t], bb = s.beta_bar[t];
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = i_nd.data[i] + ab * i_res.data[i] + bb * eps.data[i];
  return out;
}

// eps_hat = (I_t - I_ld + (1 - alpha_bar_t) * I_res_hat) / beta_bar_t
inline Image estimate_noise(const Image& i_t, const Image& i_ld,
                            const Image& i_res_hat, int t,
                            const DiffusionSchedule& s) {
  if (t < 0 || t > s.t_steps) throw Error("estimate_noise: t outside schedule");
  if (s.beta_bar[t] <= 0.0)
    throw Error("estimate_noise: beta_bar is zero at t=" + std::to_string(t) +
                "; noise cannot be estimated");
  Image out(i_t.height, i_t.width);
  const double ab = s.alpha_bar[t], bb = s.beta_bar[t];
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = (i_t.data[i] - i_ld.data[i] + (1.0 - ab) * i_res_hat.data[i]) / bb;
  return out;
}

// I_{t'} = I_ld - (1 - alpha_bar_{t'}) * I_res_hat + beta_bar_{t'} * eps_hat
inline Image ddim_step(const Image& i_t, int t, int t_next, const Image& i_res_hat,
                       const Image& eps_hat, const DiffusionSchedule& s,
                       const Image& i_ld) {
  if (t_next >= t) throw Error("ddim_step: t_next must be below t");
  if (!i_t.same_shape(i_res_hat) || !i_t.same_shape(i_ld))
    throw Error("ddim_step: shapes differ");
  Image out(i_t.height, i_t.width);
  const double ab = s.alpha_bar[t_next], bb = s.beta_bar[t_next];
  const bool with_noise = bb > 0.0;
  if (with_noise && !i_t.same_shape(eps_hat)) throw Error("ddim_step: shapes differ");
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = i_ld.data[i] - (1.0 - ab) * i_res_hat.data[i];
    if (with_noise) v += bb * eps_hat.data[i];
    out.data[i] = v;
  }
  return out;
}

using ResidualPredictor =
    std::function<Image(const Image& i_t, const Image& i_ld, int t)>;

inline Image normal_field(int h, int w, Rng& rng) {
  Image out(h, w);
  for (auto& v : out.data) v = rng.normal();
  return out;
}

// Reverse process down the plan's timesteps; the result is clamped to the
// normalized window [0, 1] at the very end.
inline Image sample_with_predictor(const ResidualPredictor& predict,
                                   const Image& i_ld, const SamplerPlan& plan,
                                   const DiffusionSchedule& sched, Rng& rng) {
  plan.validate(sched.t_steps);
  Image current = i_ld;
  if (plan.stochastic_init && sched.beta_bar[sched.t_steps] > 0.0) {
    const double bb = sched.beta_bar[sched.t_steps];
    auto eps = normal_field(i_ld.height, i_ld.width, rng);
    for (std::size_t i = 0; i < current.size(); ++i)
      current.data[i] += bb * eps.data[i];
  }
  for (int i = 0; i < plan.step_count; ++i) {
    const int t = plan.timesteps[i];
    const int t_next = plan.timesteps[i + 1];
    const Image i_res_hat = predict(current, i_ld, t);
    Image eps_hat;
    if (sched.beta_bar[t] > 0.0)
      eps_hat = estimate_noise(current, i_ld, i_res_hat, t, sched);
    else
      eps_hat = Image(i_ld.height, i_ld.width);
    current = ddim_step(current, t, t_next, i_res_hat, eps_hat, sched, i_ld);
  }
  for (auto& v : current.data) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return current;
}

inline ResidualPredictor make_net_predictor(const dadiff::DenoiserNet& net,
                                            const perception::PerceptionModel& percep,
                                            const Image& i_ld) {
  auto enc = perception::encode_frozen(percep, i_ld);
  const int d_e = static_cast<int>(enc.e_d.size());
  auto e_d = numcore::Tensor::from_values({1, d_e}, enc.e_d);
  auto e_a = numcore::Tensor::from_values({1, d_e}, enc.e_a);
  return [&net, e_d, e_a](const Image& i_t, const Image& i_ld_inner, int t) {
    numcore::NoGradGuard ng;
    auto out = dadiff::denoiser_forward(
        numcore::Tensor::from_values({1, i_t.height, i_t.width}, i_t.data),
        numcore::Tensor::from_values({1, i_ld_inner.height, i_ld_inner.width},
                                     i_ld_inner.data),
        t, e_d, e_a, net);
    Image img(i_t.height, i_t.width);
    img.data = out.values();
    return img;
  };
}

inline Image sample(const dadiff::DenoiserNet& net,
                    const perception::PerceptionModel& percep, const Image& i_ld,
                    const SamplerPlan& plan, const DiffusionSchedule& sched,
                    Rng& rng) {
  return sample_with_predictor(make_net_predictor(net, percep, i_ld), i_ld, plan,
                               sched, rng);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// One Eq.-style residual step: draw t and a noise field per sample, form
// I_t, and regress the predicted residual onto I_ld - I_nd. Embeddings come
// from the frozen perception model; gradients reach the denoiser only.
// Returns the scalar loss; gradients are accumulated into the net's params.
inline double training_step(const dadiff::DenoiserNet& net,
                            const perception::PerceptionModel& percep,
                            const std::vector<ctsim::CtSample>& batch,
                            const DiffusionSchedule& sched, Rng& rng) {
  using numcore::Tensor;
  if (batch.empty()) throw DataError("training_step: empty batch");
  Tensor total;
  for (const auto& s : batch) {
    auto enc = perception::encode_frozen(percep, s.ldct);
    const int d_e = static_cast<int>(enc.e_d.size());
    auto e_d = Tensor::from_values({1, d_e}, enc.e_d);
    auto e_a = Tensor::from_values({1, d_e}, enc.e_a);

    Image res(s.ndct.height, s.ndct.width);
    for (std::size_t i = 0; i < res.size(); ++i)
      res.data[i] = s.ldct.data[i] - s.ndct.data[i];
    const int t = 1 + static_cast<int>(rng.uniform_index(sched.t_steps));
    auto eps = normal_field(s.ndct.height, s.ndct.width, rng);
    auto i_t = forward_sample(s.ndct, res, t, eps, sched);

    auto pred = dadiff::denoiser_forward(
        Tensor::from_values({1, i_t.height, i_t.width}, i_t.data),
        Tensor::from_values({1, s.ldct.height, s.ldct.width}, s.ldct.data), t,
        e_d, e_a, net);
    auto target = Tensor::from_values({1, res.height, res.width}, res.data);
    auto loss = numcore::mean(numcore::mul(numcore::sub(target, pred),
                                           numcore::sub(target, pred)));
    total = total.defined() ? numcore::add(total, loss) : loss;
  }
  auto mean_loss = numcore::scalar_scale(total, 1.0 / batch.size());
  numcore::backward(mean_loss);
  return mean_loss.item();
}

struct TrainDenoiserConfig {
  int steps = 2000;
  int batch = 2;
  double lr = 2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double weight_decay = 1e-9;
};

inline std::vector<double> run_denoiser_steps(dadiff::DenoiserNet& net,
                                              const perception::PerceptionModel& percep,
                                              const std::vector<ctsim::CtSample>& dataset,
                                              const DiffusionSchedule& sched,
                                              const TrainDenoiserConfig& tc, Rng& rng,
                                              int start_step = 0) {
  if (dataset.empty()) throw DataError("train_denoiser: empty dataset");
  Adam opt(net.params(), tc.adam_beta1, tc.adam_beta2, tc.weight_decay);
  const int n = static_cast<int>(dataset.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  int cursor = n;  // triggers a reshuffle on first use

  std::vector<double> trace;
  trace.reserve(tc.steps);
  for (int step = 0; step < tc.steps; ++step) {
    std::vector<ctsim::CtSample> batch;
    for (int b = 0; b < tc.batch; ++b) {
      if (cursor >= n) {
        for (int i = n - 1; i > 0; --i)
          std::swap(order[i], order[rng.uniform_index(i + 1)]);
        cursor = 0;
      }
      batch.push_back(dataset[order[cursor++]]);
    }
    opt.zero_grad();
    const double loss = training_step(net, percep, batch, sched, rng);
    if (!std::isfinite(loss))
      throw DivergenceError("denoiser training diverged at step " +
                            std::to_string(start_step + step));
    opt.step(tc.lr);
    trace.push_back(loss);
  }
  return trace;
}

// Deterministic held-out residual loss on a fixed grid of timesteps with a
// seeded noise stream; used for ablation comparisons.
inline double eval_denoiser_loss(const dadiff::DenoiserNet& net,
                                 const perception::PerceptionModel& percep,
                                 const std::vector<ctsim::CtSample>& dataset,
                                 const DiffusionSchedule& sched,
                                 std::uint64_t seed) {
  if (dataset.empty()) throw DataError("eval_denoiser_loss: empty dataset");
  const std::vector<int> t_grid{sched.t_steps / 4, sched.t_steps / 2,
                                (3 * sched.t_steps) / 4, sched.t_steps};
  numcore::NoGradGuard ng;
  std::vector<double> per_sample(dataset.size(), 0.0);
  parallel_for(static_cast<int>(dataset.size()), [&](int si) {
    const auto& s = dataset[si];
    Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(si));
    auto enc = perception::encode_frozen(percep, s.ldct);
    const int d_e = static_cast<int>(enc.e_d.size());
    auto e_d = numcore::Tensor::from_values({1, d_e}, enc.e_d);
    auto e_a = numcore::Tensor::from_values({1, d_e}, enc.e_a);
    Image res(s.ndct.height, s.ndct.width);
    for (std::size_t i = 0; i < res.size(); ++i)
      res.data[i] = s.ldct.data[i] - s.ndct.data[i];
    double acc = 0.0;
    for (int t : t_grid) {
      auto eps = normal_field(s.ndct.height, s.ndct.width, rng);
      auto i_t = forward_sample(s.ndct, res, t, eps, sched);
      auto pred = dadiff::denoiser_forward(
          numcore::Tensor::from_values({1, i_t.height, i_t.width}, i_t.data),
          numcore::Tensor::from_values({1, s.ldct.height, s.ldct.width}, s.ldct.data),
          t, e_d, e_a, net);
      double mse_acc = 0.0;
      for (std::size_t i = 0; i < res.size(); ++i) {
        const double d = res.data[i] - pred.values()[i];
        mse_acc += d * d;
      }
      acc += mse_acc / static_cast<double>(res.size());
    }
    per_sample[si] = acc / static_cast<double>(t_grid.size());
  });
  double total = 0.0;
  for (double v : per_sample) total += v;
  return total / static_cast<double>(per_sample.size());
}

}  // namespace founddiff::diffusion

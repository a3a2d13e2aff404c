// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "kanpaint/autograd.hpp"
#include "kanpaint/errors.hpp"
#include "kanpaint/ops.hpp"

namespace kanpaint::diffusion {

Schedule Schedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule: need at least one timestep");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  Schedule s;
  const auto n = static_cast<std::size_t>(steps);
  s.beta_.resize(n);
  s.alpha_bar_.resize(n);
  s.sigma_.resize(n);
  s.posterior_var_.resize(n);
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    s.beta_[i] = beta_start + (beta_end - beta_start) * frac;
    const double prev = prod;
    prod *= 1.0 - s.beta_[i];
    s.alpha_bar_[i] = prod;
    s.sigma_[i] = std::sqrt(1.0 - prod);
    s.posterior_var_[i] = s.beta_[i] * (1.0 - prev) / (1.0 - prod);
  }
  return s;
}

std::size_t Schedule::index(int t) const {
  check_timestep(t);
  return static_cast<std::size_t>(t - 1);
}

void Schedule::check_timestep(int t) const {
  if (t < 1 || t > steps()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [1, " +
                        std::to_string(steps()) + "]");
  }
}

double Schedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  return alpha_bar_[index(t)];
}

namespace {

void check_batch(const Tensor& x, std::span<const int> t, const char* op) {
  if (x.rank() < 1 || x.dim(0) != t.size()) {
    throw DimensionError(std::string(op) + ": " + std::to_string(t.size()) +
                         " timesteps for tensor " + shape_str(x.shape()));
  }
}

}  // namespace

Tensor q_sample(const Schedule& schedule, const Tensor& x0, std::span<const int> t,
                const Tensor& eps) {
  if (eps.shape() != x0.shape()) {
    throw DimensionError("q_sample: noise " + shape_str(eps.shape()) + " vs image " +
                         shape_str(x0.shape()));
  }
  check_batch(x0, t, "q_sample");
  const std::size_t inner = x0.numel() / t.size();
  Tensor out(x0.shape());
  auto o = out.mutable_values();
  auto xv = x0.values(), ev = eps.values();
  for (std::size_t n = 0; n < t.size(); ++n) {
    if (t[n] != 0) schedule.check_timestep(t[n]);
    const double ab = schedule.alpha_bar(t[n]);
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    for (std::size_t i = n * inner; i < (n + 1) * inner; ++i) o[i] = a * xv[i] + s * ev[i];
  }
  return out;
}

TargetMode parse_target_mode(std::string_view text) {
  if (text == "epsilon") return TargetMode::Epsilon;
  if (text == "difference" || text == "paper") return TargetMode::ScaledDifference;
  throw ConfigError("unknown target mode '" + std::string(text) + "'");
}

std::string to_string(TargetMode mode) {
  return mode == TargetMode::Epsilon ? "epsilon" : "difference";
}

LossNorm parse_loss_norm(std::string_view text) {
  if (text == "squared") return LossNorm::Squared;
  if (text == "l2") return LossNorm::L2;
  throw ConfigError("unknown loss norm '" + std::string(text) + "'");
}

std::string to_string(LossNorm norm) { return norm == LossNorm::Squared ? "squared" : "l2"; }

Tensor regression_target(const Schedule& schedule, const Tensor& x0, const Tensor& x_t,
                         const Tensor& eps, std::span<const int> t, TargetMode mode) {
  if (mode == TargetMode::Epsilon) return eps.detach();
  check_batch(x0, t, "regression_target");
  const std::size_t inner = x0.numel() / t.size();
  Tensor out(x0.shape());
  auto o = out.mutable_values();
  auto xv = x0.values(), tv = x_t.values();
  for (std::size_t n = 0; n < t.size(); ++n) {
    const double inv_sigma = 1.0 / schedule.sigma(t[n]);
    for (std::size_t i = n * inner; i < (n + 1) * inner; ++i) o[i] = (tv[i] - xv[i]) * inv_sigma;
  }
  return out;
}

Tensor loss_at(const NoisePredictor& net, const Schedule& schedule, const Tensor& x0,
               std::span<const int> t, const Tensor& eps, const LossOptions& options) {
  Tensor x_t = q_sample(schedule, x0, t, eps);
  Tensor target = regression_target(schedule, x0, x_t, eps, t, options.target);
  Tensor prediction = net(x_t, t);
  if (prediction.shape() != target.shape()) {
    throw DimensionError("loss: prediction " + shape_str(prediction.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  Tensor residual_sq = ops::square(ops::sub(prediction, target));
  if (options.norm == LossNorm::Squared) return ops::mean(residual_sq);
  return ops::mean(ops::sqrt(ops::mean_per_sample(residual_sq)));
}

Tensor diffusion_loss(const NoisePredictor& net, const Schedule& schedule, const Tensor& x0,
                      Rng& rng, const LossOptions& options, LossDraw* draw) {
  if (x0.rank() < 1 || x0.dim(0) == 0) throw DimensionError("loss: empty batch");
  std::uniform_int_distribution<int> pick(1, schedule.steps());
  std::vector<int> t(x0.dim(0));
  for (auto& v : t) v = pick(rng);
  Tensor eps = Tensor::randn(x0.shape(), rng);
  Tensor loss = loss_at(net, schedule, x0, t, eps, options);
  if (draw) *draw = {std::move(t), std::move(eps)};
  return loss;
}

Tensor posterior_mean(const Schedule& schedule, const Tensor& x_t, const Tensor& eps_hat, int t) {
  if (eps_hat.shape() != x_t.shape()) {
    throw DimensionError("posterior_mean: prediction " + shape_str(eps_hat.shape()) + " vs x_t " +
                         shape_str(x_t.shape()));
  }
  const double coef = schedule.beta(t) / schedule.sigma(t);
  const double sqrt_alpha = std::sqrt(schedule.alpha(t));
  Tensor out(x_t.shape());
  auto o = out.mutable_values();
  auto xv = x_t.values(), ev = eps_hat.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (xv[i] - coef * ev[i]) / sqrt_alpha;
  return out;
}

Tensor p_sample_step(const NoisePredictor& net, const Schedule& schedule, const Tensor& x_t, int t,
                     Rng& rng) {
  schedule.check_timestep(t);
  NoGradGuard no_grad;
  std::vector<int> steps(x_t.dim(0), t);
  Tensor mu = posterior_mean(schedule, x_t, net(x_t, steps), t);
  if (t == 1) return mu;
  const double sd = std::sqrt(schedule.posterior_var(t));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : mu.mutable_values()) v += sd * normal(rng);
  return mu;
}

EmaState::EmaState(nn::Module& model, double rate) : rate_(rate) {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("EMA rate must lie in (0, 1)");
  for (auto& p : model.parameters()) shadow_.push_back({p.name, p.tensor.detach()});
}

void EmaState::update(nn::Module& model) {
  auto params = model.parameters();
  if (params.size() != shadow_.size()) throw ContractError("EMA: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].tensor.shape() != shadow_[i].tensor.shape()) {
      throw ContractError("EMA: shape mismatch for " + params[i].name);
    }
    auto s = shadow_[i].tensor.mutable_values();
    auto p = params[i].tensor.values();
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = rate_ * s[j] + (1.0 - rate_) * p[j];
  }
}

void EmaState::apply(nn::Module& model, nn::Module& target) const {
  nn::copy_state(model, target);
  auto params = target.parameters();
  if (params.size() != shadow_.size()) throw ContractError("EMA: target architecture differs");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto s = shadow_[i].tensor.values();
    std::copy(s.begin(), s.end(), params[i].tensor.mutable_values().begin());
  }
}

void ema_update(EmaState& ema, nn::Module& model) { ema.update(model); }

Adam::Adam(std::vector<io::NamedTensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      w[j] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
    p.zero_grad();
  }
}

}  // namespace kanpaint::diffusion

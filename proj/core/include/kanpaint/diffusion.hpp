// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kanpaint/io.hpp"
#include "kanpaint/nn.hpp"
#include "kanpaint/tensor.hpp"

namespace kanpaint::diffusion {

/// Linear beta schedule and the derived forward/reverse coefficients.
/// Timesteps are 1-based; alpha_bar(0) is 1 by convention.
class Schedule {
 public:
  static Schedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta_start() const { return beta_.front(); }
  double beta_end() const { return beta_.back(); }

  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const;
  /// sqrt(1 - alpha_bar(t))
  double sigma(int t) const { return sigma_[index(t)]; }
  /// beta_t * (1 - alpha_bar(t-1)) / (1 - alpha_bar(t)); zero at t = 1.
  double posterior_var(int t) const { return posterior_var_[index(t)]; }

  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }
  const std::vector<double>& sigmas() const { return sigma_; }

  /// Throws ContractError unless t is in [1, steps()].
  void check_timestep(int t) const;

 private:
  std::size_t index(int t) const;
  std::vector<double> beta_, alpha_bar_, sigma_, posterior_var_;
};

/// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps, per sample.
/// A timestep of 0 returns x0 unchanged.
Tensor q_sample(const Schedule& schedule, const Tensor& x0, std::span<const int> t,
                const Tensor& eps);

/// What the network regresses onto.
enum class TargetMode {
  Epsilon,           // the injected noise
  ScaledDifference,  // (x_t - x0) / sigma_t
};
enum class LossNorm {
  Squared,  // mean of squared residuals
  L2,       // batch mean of per-sample root-mean-square residual
};

TargetMode parse_target_mode(std::string_view text);
std::string to_string(TargetMode mode);
LossNorm parse_loss_norm(std::string_view text);
std::string to_string(LossNorm norm);

struct LossOptions {
  TargetMode target = TargetMode::Epsilon;
  LossNorm norm = LossNorm::Squared;
};

/// Network prediction for a batch of noisy images at the given timesteps.
/// Conditioning inputs are bound into the callable.
using NoisePredictor = std::function<Tensor(const Tensor& x_t, std::span<const int> t)>;

Tensor regression_target(const Schedule& schedule, const Tensor& x0, const Tensor& x_t,
                         const Tensor& eps, std::span<const int> t, TargetMode mode);

/// Training loss for fixed timesteps and noise.
Tensor loss_at(const NoisePredictor& net, const Schedule& schedule, const Tensor& x0,
               std::span<const int> t, const Tensor& eps, const LossOptions& options);

struct LossDraw {
  std::vector<int> t;
  Tensor eps;
};

/// Draws t ~ Uniform{1..T} per sample and eps ~ N(0, I), then evaluates
/// loss_at. The draw is reported through `draw` when non-null.
Tensor diffusion_loss(const NoisePredictor& net, const Schedule& schedule, const Tensor& x0,
                      Rng& rng, const LossOptions& options, LossDraw* draw = nullptr);

/// One ancestral step x_t -> x_{t-1}. The prediction is used as the noise
/// estimate; no noise is added at t = 1.
Tensor p_sample_step(const NoisePredictor& net, const Schedule& schedule, const Tensor& x_t, int t,
                     Rng& rng);

/// Posterior mean (1/sqrt(alpha_t)) * (x_t - beta_t / sigma_t * eps_hat).
Tensor posterior_mean(const Schedule& schedule, const Tensor& x_t, const Tensor& eps_hat, int t);

/// Exponential moving average of a model's parameters.
class EmaState {
 public:
  EmaState(nn::Module& model, double rate = 0.995);

  void update(nn::Module& model);
  /// Copies `model`'s state into `target`, then overwrites the parameters
  /// with the shadow values.
  void apply(nn::Module& model, nn::Module& target) const;

  double rate() const { return rate_; }
  const std::vector<io::NamedTensor>& shadow() const { return shadow_; }

 private:
  double rate_;
  std::vector<io::NamedTensor> shadow_;
};

/// shadow <- rate * shadow + (1 - rate) * param, for every parameter.
void ema_update(EmaState& ema, nn::Module& model);

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<io::NamedTensor> params, AdamOptions options = {});
  /// Applies one update from the accumulated gradients, then clears them.
  void step();

 private:
  std::vector<io::NamedTensor> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  long step_count_ = 0;
};

}  // namespace kanpaint::diffusion

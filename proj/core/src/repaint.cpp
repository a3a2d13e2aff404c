// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/repaint.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "kanpaint/autograd.hpp"
#include "kanpaint/errors.hpp"

namespace kanpaint::repaint {

namespace {

constexpr std::uint64_t kKnownStreamSalt = 0x9E3779B97F4A7C15ULL;

std::vector<ukan::TumorGeometry> task_geometry(const InpaintTask& task) {
  return {ukan::tumor_geometry(task.mask)};
}

Tensor standard_normal(const Shape& shape, Rng& rng) { return Tensor::randn(shape, rng); }

// x = mask * generated + (1 - mask) * known, computed per pixel.
void blend_into(Tensor& generated, const Tensor& known, const Tensor& mask) {
  auto g = generated.mutable_values();
  auto k = known.values(), m = mask.values();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = m[i] * g[i] + (1.0 - m[i]) * k[i];
}

void clamp_unit(Tensor& x) {
  for (auto& v : x.mutable_values()) v = std::clamp(v, 0.0, 1.0);
}

diffusion::NoisePredictor bind(const ConditionalPredictor& net, const Tensor& scan,
                               const std::vector<ukan::TumorGeometry>& tumor) {
  return [&net, &scan, &tumor](const Tensor& x_t, std::span<const int> t) {
    return net(x_t, t, scan, tumor);
  };
}

}  // namespace

ConditionalPredictor model_predictor(ukan::ConditionalUkan& model) {
  return [&model](const Tensor& x_t, std::span<const int> t, const Tensor& scan,
                  std::span<const ukan::TumorGeometry> tumor) {
    NoGradGuard no_grad;
    return model.predict(x_t, scan, t, tumor);
  };
}

void validate(const InpaintTask& task) {
  if (!task.image.defined() || !task.mask.defined()) throw ConfigError("inpaint: empty task");
  const Shape& s = task.image.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != 1) {
    throw ConfigError("inpaint: image must be [1,1,H,W], got " + shape_str(s));
  }
  if (task.mask.shape() != s) {
    throw ConfigError("inpaint: mask " + shape_str(task.mask.shape()) + " vs image " + shape_str(s));
  }
  for (double m : task.mask.values()) {
    if (m != 0.0 && m != 1.0) throw ConfigError("inpaint: mask must be binary");
  }
  for (double v : task.image.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("inpaint: image intensities must lie in [0,1]");
  }
  if (task.resample_jumps < 1) throw ConfigError("inpaint: resample_jumps must be >= 1");
}

Tensor masked_scan(const InpaintTask& task) {
  Tensor out(task.image.shape());
  auto o = out.mutable_values();
  auto x = task.image.values(), m = task.mask.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * (1.0 - m[i]);
  return out;
}

Tensor generate(const ConditionalPredictor& net, const diffusion::Schedule& schedule,
                const InpaintTask& task, std::uint64_t seed) {
  validate(task);
  const Tensor scan = masked_scan(task);
  const auto tumor = task_geometry(task);
  const auto predictor = bind(net, scan, tumor);
  Rng rng(seed);
  Tensor x = standard_normal(task.image.shape(), rng);
  for (int t = schedule.steps(); t >= 1; --t) x = diffusion::p_sample_step(predictor, schedule, x, t, rng);
  clamp_unit(x);
  return x;
}

Tensor inpaint(const ConditionalPredictor& net, const diffusion::Schedule& schedule,
               const InpaintTask& task, std::uint64_t seed, const InpaintOptions& options) {
  validate(task);
  const Tensor scan = masked_scan(task);
  const auto tumor = task_geometry(task);
  const auto predictor = bind(net, scan, tumor);
  const Shape& shape = task.image.shape();
  // The generative stream matches generate() so an all-ones mask reproduces it.
  Rng rng(seed);
  Rng known_rng(seed ^ kKnownStreamSalt);
  Tensor x = standard_normal(shape, rng);
  for (int t = schedule.steps(); t >= 1; --t) {
    for (int jump = 1; jump <= task.resample_jumps; ++jump) {
      Tensor known = task.image;
      if (!options.noise_free_replacement && t > 1) {
        const int prev = t - 1;
        known = diffusion::q_sample(schedule, task.image, std::span(&prev, 1),
                                    standard_normal(shape, known_rng));
      }
      Tensor next = diffusion::p_sample_step(predictor, schedule, x, t, rng);
      blend_into(next, known, task.mask);
      if (jump < task.resample_jumps && t > 1) {
        // Re-noise x_{t-1} back to level t and repeat the step.
        const double a = std::sqrt(schedule.alpha(t)), b = std::sqrt(schedule.beta(t));
        Tensor z = standard_normal(shape, rng);
        auto nv = next.mutable_values();
        auto zv = z.values();
        for (std::size_t i = 0; i < nv.size(); ++i) nv[i] = a * nv[i] + b * zv[i];
        x = next;
        continue;
      }
      x = next;
      break;
    }
  }
  // Known pixels already equal the image; only generated ones need clamping.
  auto xv = x.mutable_values();
  auto m = task.mask.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (m[i] != 0.0) xv[i] = std::clamp(xv[i], 0.0, 1.0);
  }
  return x;
}

Tensor generate_then_paste(const ConditionalPredictor& net, const diffusion::Schedule& schedule,
                           const InpaintTask& task, std::uint64_t seed) {
  Tensor x = generate(net, schedule, task, seed);
  blend_into(x, task.image, task.mask);
  return x;
}

double boundary_smoothness(const Tensor& image, const Tensor& mask) {
  if (image.rank() < 2 || mask.shape() != image.shape()) {
    throw DimensionError("boundary_smoothness: image " + shape_str(image.shape()) + " vs mask " +
                         shape_str(mask.shape()));
  }
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (image.numel() != h * w) throw DimensionError("boundary_smoothness: expected a single image");
  auto x = image.values(), m = mask.values();
  for (double v : m) {
    if (v != 0.0 && v != 1.0) throw ContractError("boundary_smoothness: mask must be binary");
  }
  double total = 0.0;
  std::size_t pairs = 0;
  auto visit = [&](std::size_t a, std::size_t b) {
    if (m[a] != m[b]) {
      total += std::abs(x[a] - x[b]);
      ++pairs;
    }
  };
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      if (j + 1 < w) visit(i * w + j, i * w + j + 1);
      if (i + 1 < h) visit(i * w + j, (i + 1) * w + j);
    }
  if (pairs == 0) throw ContractError("boundary_smoothness: mask has no boundary");
  return total / static_cast<double>(pairs);
}

}  // namespace kanpaint::repaint

// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/kan.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "kanpaint/errors.hpp"
#include "kanpaint/ops.hpp"
#include "op_support.hpp"

namespace kanpaint::kan {

namespace {
constexpr int kMaxOrder = 8;
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

SplineGrid::SplineGrid(double range_min, double range_max, int intervals, int order)
    : range_min_(range_min), range_max_(range_max), intervals_(intervals), order_(order) {
  if (!(range_min < range_max)) throw ConfigError("spline grid: range_min must be < range_max");
  if (intervals < 1) throw ConfigError("spline grid: need at least one interval");
  if (order < 1 || order > kMaxOrder) {
    throw ConfigError("spline grid: order must be in [1, " + std::to_string(kMaxOrder) + "]");
  }
  step_ = (range_max - range_min) / intervals;
  knots_.resize(static_cast<std::size_t>(intervals + 2 * order + 1));
  for (std::size_t i = 0; i < knots_.size(); ++i) {
    knots_[i] = range_min + (static_cast<double>(i) - order) * step_;
  }
}

double SplineGrid::clamp(double x) const { return std::clamp(x, range_min_, range_max_); }

std::size_t SplineGrid::eval_local(double x, std::span<double> values,
                                   std::span<double> derivs) const {
  const int k = order_;
  const bool outside = x < range_min_ || x > range_max_;
  const double xc = clamp(x);
  int cell = static_cast<int>(std::floor((xc - range_min_) / step_));
  cell = std::clamp(cell, 0, intervals_ - 1);
  const std::size_t span = static_cast<std::size_t>(cell + k);
  const auto& t = knots_;

  std::array<double, kMaxOrder + 1> n{}, left{}, right{}, lower{};
  n[0] = 1.0;
  for (int d = 1; d <= k; ++d) {
    if (d == k) std::copy_n(n.begin(), k, lower.begin());
    left[d] = xc - t[span + 1 - d];
    right[d] = t[span + d] - xc;
    double saved = 0.0;
    for (int r = 0; r < d; ++r) {
      const double temp = n[r] / (right[r + 1] + left[d - r]);
      n[r] = saved + right[r + 1] * temp;
      saved = left[d - r] * temp;
    }
    n[d] = saved;
  }
  std::copy_n(n.begin(), k + 1, values.begin());
  if (!derivs.empty()) {
    for (int r = 0; r <= k; ++r) {
      if (outside) {
        derivs[r] = 0.0;
        continue;
      }
      const double a = r >= 1 ? lower[r - 1] : 0.0;
      const double b = r <= k - 1 ? lower[r] : 0.0;
      derivs[r] = (a - b) / step_;
    }
  }
  return static_cast<std::size_t>(cell);
}

Tensor bspline_basis(const Tensor& x, const SplineGrid& grid) {
  Shape shape = x.shape();
  const std::size_t nb = grid.num_basis();
  shape.push_back(nb);
  Tensor out(shape);
  auto o = out.mutable_values();
  std::array<double, kMaxOrder + 1> local{};
  const auto k1 = static_cast<std::size_t>(grid.order() + 1);
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::size_t first = grid.eval_local(xv[i], std::span(local.data(), k1));
    std::copy_n(local.begin(), k1, o.begin() + i * nb + first);
  }
  return out;
}

Tensor kan_linear(const Tensor& x, const Tensor& base_weight, const Tensor& spline_scale,
                  const Tensor& coeffs, const SplineGrid& grid) {
  detail::require_rank(x, 2, "kan_linear", "input");
  detail::require_rank(base_weight, 2, "kan_linear", "base_weight");
  const std::size_t batch = x.dim(0), in = x.dim(1), out_f = base_weight.dim(0);
  const std::size_t nb = grid.num_basis();
  const auto k1 = static_cast<std::size_t>(grid.order() + 1);
  if (base_weight.dim(1) != in) {
    throw DimensionError("kan_linear: input features (axis 1) = " + std::to_string(in) +
                         " but layer expects " + std::to_string(base_weight.dim(1)));
  }
  if (spline_scale.shape() != base_weight.shape() || coeffs.shape() != Shape{out_f, in, nb}) {
    throw DimensionError("kan_linear: inconsistent parameter shapes " +
                         shape_str(spline_scale.shape()) + ", " + shape_str(coeffs.shape()));
  }

  // Per (b, i): silu, first active basis index, local basis values and derivatives.
  std::vector<double> act(batch * in), basis(batch * in * k1), dbasis(batch * in * k1);
  std::vector<std::size_t> first(batch * in);
  auto xv = x.values();
  for (std::size_t p = 0; p < batch * in; ++p) {
    act[p] = xv[p] * sigmoid(xv[p]);
    first[p] = grid.eval_local(xv[p], std::span(basis.data() + p * k1, k1),
                               std::span(dbasis.data() + p * k1, k1));
  }

  Tensor out(Shape{batch, out_f});
  auto o = out.mutable_values();
  auto bw = base_weight.values(), sc = spline_scale.values(), cf = coeffs.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oo = 0; oo < out_f; ++oo) {
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) {
        const std::size_t p = b * in + i, w = oo * in + i;
        const double* c = cf.data() + w * nb + first[p];
        const double* bs = basis.data() + p * k1;
        double spline = 0.0;
        for (std::size_t r = 0; r < k1; ++r) spline += c[r] * bs[r];
        acc += bw[w] * act[p] + sc[w] * spline;
      }
      o[b * out_f + oo] = acc;
    }

  return detail::finish(
      out, "kan_linear", {&x, &base_weight, &spline_scale, &coeffs},
      [x, base_weight, spline_scale, coeffs, batch, in, out_f, nb, k1, act = std::move(act),
       basis = std::move(basis), dbasis = std::move(dbasis),
       first = std::move(first)](std::span<const double> g) {
        using detail::grad_of;
        using detail::wants_grad;
        auto bw = base_weight.values(), sc = spline_scale.values(), cf = coeffs.values();
        auto xv = x.values();
        const bool gx = wants_grad(x), gb = wants_grad(base_weight),
                   gs = wants_grad(spline_scale), gc = wants_grad(coeffs);
        std::span<double> dx, dbw, dsc, dcf;
        if (gx) dx = grad_of(x);
        if (gb) dbw = grad_of(base_weight);
        if (gs) dsc = grad_of(spline_scale);
        if (gc) dcf = grad_of(coeffs);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t oo = 0; oo < out_f; ++oo) {
            const double go = g[b * out_f + oo];
            if (go == 0.0) continue;
            for (std::size_t i = 0; i < in; ++i) {
              const std::size_t p = b * in + i, w = oo * in + i;
              const std::size_t c0 = w * nb + first[p];
              const double* bs = basis.data() + p * k1;
              if (gb) dbw[w] += go * act[p];
              if (gs) {
                double spline = 0.0;
                for (std::size_t r = 0; r < k1; ++r) spline += cf[c0 + r] * bs[r];
                dsc[w] += go * spline;
              }
              if (gc) {
                for (std::size_t r = 0; r < k1; ++r) dcf[c0 + r] += go * sc[w] * bs[r];
              }
              if (gx) {
                const double s = sigmoid(xv[p]);
                const double dsilu = s * (1.0 + xv[p] * (1.0 - s));
                const double* dbs = dbasis.data() + p * k1;
                double dspline = 0.0;
                for (std::size_t r = 0; r < k1; ++r) dspline += cf[c0 + r] * dbs[r];
                dx[p] += go * (bw[w] * dsilu + sc[w] * dspline);
              }
            }
          }
      });
}

KanLayer::KanLayer(std::size_t in_features, std::size_t out_features, const SplineGrid& grid,
                   Rng& rng)
    : in_(in_features), out_(out_features), grid_(grid) {
  const double inv_sqrt_in = 1.0 / std::sqrt(static_cast<double>(in_features));
  const double nb = static_cast<double>(grid.num_basis());
  coeffs_ = Tensor::randn({out_features, in_features, grid.num_basis()}, rng,
                          0.1 / std::pow(nb, 0.25));
  base_weight_ = Tensor::uniform({out_features, in_features}, rng, -inv_sqrt_in, inv_sqrt_in);
  spline_scale_ = Tensor(Shape{out_features, in_features}, inv_sqrt_in);
  coeffs_.set_requires_grad(true);
  base_weight_.set_requires_grad(true);
  spline_scale_.set_requires_grad(true);
}

Tensor KanLayer::forward(const Tensor& x) const {
  return kan_linear(x, base_weight_, spline_scale_, coeffs_, grid_);
}

void KanLayer::visit(const std::string& prefix, nn::ModuleVisitor& visitor) {
  visitor.module(*this);
  visitor.parameter(prefix + "coeffs", coeffs_);
  visitor.parameter(prefix + "base_weight", base_weight_);
  visitor.parameter(prefix + "spline_scale", spline_scale_);
}

KanBlock::KanBlock(std::size_t in_channels, std::size_t channels, const SplineGrid& grid, Rng& rng,
                   std::size_t kan_depth, std::size_t heads)
    : conv_(in_channels, channels, 3, rng, 1, 1), attention_(channels, heads, rng) {
  if (kan_depth < 1) throw ConfigError("KAN block needs at least one KAN layer");
  kan_.reserve(kan_depth);
  for (std::size_t i = 0; i < kan_depth; ++i) kan_.emplace_back(channels, channels, grid, rng);
}

Tensor KanBlock::pre_attention(const Tensor& x) const {
  Tensor features = conv_.forward(x);
  const std::size_t n = features.dim(0), h = features.dim(2), w = features.dim(3);
  Tensor tokens = ops::to_tokens(features);
  for (const auto& layer : kan_) tokens = layer.forward(tokens);
  return ops::from_tokens(ops::relu(tokens), n, h, w);
}

Tensor KanBlock::forward(const Tensor& x) const { return attention_.forward(pre_attention(x)); }

void KanBlock::visit(const std::string& prefix, nn::ModuleVisitor& visitor) {
  visitor.module(*this);
  conv_.visit(prefix + "conv.", visitor);
  for (std::size_t i = 0; i < kan_.size(); ++i) {
    kan_[i].visit(prefix + "kan" + std::to_string(i) + ".", visitor);
  }
  attention_.visit(prefix + "attention.", visitor);
}

}  // namespace kanpaint::kan

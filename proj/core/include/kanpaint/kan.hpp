// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kanpaint/nn.hpp"
#include "kanpaint/tensor.hpp"

namespace kanpaint::kan {

/// Uniform B-spline grid on [range_min, range_max] with `intervals` cells and
/// `order` padding knots on each side. Spline order k means polynomial
/// degree k; there are intervals + order basis functions.
class SplineGrid {
 public:
  SplineGrid(double range_min = -1.0, double range_max = 1.0, int intervals = 5, int order = 3);

  double range_min() const { return range_min_; }
  double range_max() const { return range_max_; }
  int intervals() const { return intervals_; }
  int order() const { return order_; }
  std::size_t num_basis() const { return static_cast<std::size_t>(intervals_ + order_); }
  const std::vector<double>& knots() const { return knots_; }

  double clamp(double x) const;

  /// Evaluates the order+1 basis functions that can be nonzero at `x` (after
  /// clamping) by Cox-de Boor recursion. Returns the index of the first one;
  /// values[r] is B_{first+r}(x). `derivs`, when non-empty, receives dB/dx
  /// of the clamped argument (zero outside the range).
  std::size_t eval_local(double x, std::span<double> values, std::span<double> derivs = {}) const;

 private:
  double range_min_, range_max_;
  int intervals_, order_;
  double step_;
  std::vector<double> knots_;
};

/// All basis values at each element of `x`: output shape is x.shape() + [G+k].
Tensor bspline_basis(const Tensor& x, const SplineGrid& grid);

/// out[b,o] = sum_i base_weight[o,i]*silu(x[b,i])
///          + spline_scale[o,i] * sum_j coeffs[o,i,j] * B_j(x[b,i])
Tensor kan_linear(const Tensor& x, const Tensor& base_weight, const Tensor& spline_scale,
                  const Tensor& coeffs, const SplineGrid& grid);

class KanLayer : public nn::Module {
 public:
  KanLayer(std::size_t in_features, std::size_t out_features, const SplineGrid& grid, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, nn::ModuleVisitor& visitor) override;

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const SplineGrid& grid() const { return grid_; }
  Tensor& coeffs() { return coeffs_; }
  Tensor& base_weight() { return base_weight_; }
  Tensor& spline_scale() { return spline_scale_; }

 private:
  std::size_t in_, out_;
  SplineGrid grid_;
  Tensor coeffs_;        // [out, in, G+k]
  Tensor base_weight_;   // [out, in]
  Tensor spline_scale_;  // [out, in]
};

/// conv3x3 -> KAN layer(s) per spatial token -> ReLU -> self-attention.
class KanBlock : public nn::Module {
 public:
  KanBlock(std::size_t in_channels, std::size_t channels, const SplineGrid& grid, Rng& rng,
           std::size_t kan_depth = 1, std::size_t heads = 1);
  Tensor forward(const Tensor& x) const;
  /// The feature map fed to the attention layer.
  Tensor pre_attention(const Tensor& x) const;
  void visit(const std::string& prefix, nn::ModuleVisitor& visitor) override;

  nn::Conv2d& conv() { return conv_; }
  std::vector<KanLayer>& kan_layers() { return kan_; }
  nn::Attention2d& attention() { return attention_; }

 private:
  nn::Conv2d conv_;
  std::vector<KanLayer> kan_;
  nn::Attention2d attention_;
};

}  // namespace kanpaint::kan

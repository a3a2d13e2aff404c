// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace kanpaint {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::ptrdiff_t tape_index = -1;  // -1 for leaves

  // Lazily allocates a zeroed gradient buffer.
  std::span<double> grad_buffer();
};

}  // namespace detail

/// Dense row-major array of doubles with optional reverse-mode gradient.
///
/// Tensor is a shared handle: copies alias the same storage. Use clone() or
/// detach() for an independent copy. Values are only mutated in place for
/// leaves outside a recorded computation (initialization, optimizer steps).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Deep copy of the values; the copy is a leaf without gradient.
  Tensor detach() const;
  /// Deep copy preserving requires_grad (as a fresh leaf).
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// When enabled, every recorded op checks its output for NaN/Inf.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace kanpaint

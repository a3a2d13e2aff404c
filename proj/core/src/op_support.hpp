// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <initializer_list>
#include <span>
#include <string>

#include "kanpaint/autograd.hpp"
#include "kanpaint/errors.hpp"
#include "kanpaint/tensor.hpp"

namespace kanpaint::detail {

inline bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

inline bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

inline std::span<double> grad_of(const Tensor& t) { return t.impl()->grad_buffer(); }

inline void check_finite(const Tensor& out, const char* op) {
  if (!finite_checks_enabled()) return;
  for (double v : out.values()) {
    if (!std::isfinite(v)) throw ContractError(std::string("non-finite value produced by ") + op);
  }
}

// Records `fn` for `out` when any input requires grad.
inline Tensor finish(Tensor out, const char* op, std::initializer_list<const Tensor*> inputs,
                     BackwardFn fn) {
  check_finite(out, op);
  if (needs_grad(inputs)) Tape::current().record(out, std::move(fn));
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + name + " must have rank " +
                         std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

}  // namespace kanpaint::detail

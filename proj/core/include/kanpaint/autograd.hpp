// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "kanpaint/tensor.hpp"

namespace kanpaint {

/// Receives the gradient of the loss w.r.t. an op's output and accumulates
/// into the op's inputs.
using BackwardFn = std::function<void(std::span<const double> output_grad)>;

/// Ordered record of differentiable operations for one thread.
///
/// Entries are appended as ops execute, so every entry's inputs were produced
/// by earlier entries (or are leaves). backward() replays the tape in reverse
/// and then clears it.
class Tape {
 public:
  static Tape& current();

  std::size_t size() const noexcept { return entries_.size(); }
  void clear();
  void record(const Tensor& output, BackwardFn fn);

 private:
  friend void backward(const Tensor& loss);

  struct Entry {
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

bool grad_enabled();

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Back-propagates from a scalar loss into every requires_grad leaf, then
/// clears the current tape. Leaf gradients accumulate across calls until
/// zero_grad().
void backward(const Tensor& loss);

}  // namespace kanpaint

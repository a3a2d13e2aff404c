// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/autograd.hpp"

#include "kanpaint/errors.hpp"

namespace kanpaint {

namespace {
thread_local bool t_grad_enabled = true;
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::clear() {
  for (auto& e : entries_) e.output->tape_index = -1;
  entries_.clear();
}

void Tape::record(const Tensor& output, BackwardFn fn) {
  auto& impl = output.impl();
  impl->requires_grad = true;
  impl->tape_index = static_cast<std::ptrdiff_t>(entries_.size());
  entries_.push_back({impl, std::move(fn)});
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward() on an undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto& tape = Tape::current();
  const auto index = loss.impl()->tape_index;
  if (index < 0 || static_cast<std::size_t>(index) >= tape.entries_.size() ||
      tape.entries_[index].output != loss.impl()) {
    throw ContractError("backward() on a loss that is not connected to the current tape");
  }
  loss.impl()->grad_buffer()[0] += 1.0;
  for (auto i = index; i >= 0; --i) {
    auto& entry = tape.entries_[static_cast<std::size_t>(i)];
    if (entry.output->grad.empty()) continue;
    entry.fn(entry.output->grad);
  }
  tape.clear();
}

}  // namespace kanpaint

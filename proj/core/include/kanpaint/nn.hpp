// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kanpaint/io.hpp"
#include "kanpaint/tensor.hpp"

namespace kanpaint::nn {

class Module;

class ModuleVisitor {
 public:
  virtual ~ModuleVisitor() = default;
  virtual void module(Module&) {}
  virtual void parameter(const std::string&, const Tensor&) {}
  virtual void buffer(const std::string&, const Tensor&) {}
};

/// Base for anything owning learnable tensors. Subclasses report their
/// parameters, buffers and children through visit() in a fixed order, which
/// is also the checkpoint order.
class Module {
 public:
  virtual ~Module() = default;
  virtual void visit(const std::string& prefix, ModuleVisitor& visitor) = 0;

  std::vector<io::NamedTensor> parameters();
  std::vector<io::NamedTensor> buffers();
  /// Parameters followed by buffers.
  std::vector<io::NamedTensor> state();

  void set_training(bool training);
  bool training() const { return training_; }
  void zero_grad();

 protected:
  bool training_ = true;
};

/// Exact number of learnable scalars (buffers excluded).
std::size_t count_parameters(Module& module);

/// Copies values (not identity) from `source` into `target`; both must share
/// the same architecture.
void copy_state(Module& source, Module& target);

class Linear : public Module {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, ModuleVisitor& visitor) override;

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }

 private:
  Tensor weight_;  // [out, in]
  Tensor bias_;    // [out] or undefined
};

class Conv2d : public Module {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size, Rng& rng,
         std::size_t stride = 1, std::size_t padding = 0, bool bias = true);
  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, ModuleVisitor& visitor) override;

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_;  // [out, in, k, k]
  Tensor bias_;
  std::size_t stride_;
  std::size_t padding_;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(std::size_t channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x);
  void visit(const std::string& prefix, ModuleVisitor& visitor) override;

 private:
  Tensor gamma_, beta_;
  Tensor running_mean_, running_var_;
  double momentum_, eps_;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(std::size_t channels, double eps = 1e-5);
  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, ModuleVisitor& visitor) override;

 private:
  Tensor gamma_, beta_;
  double eps_;
};

/// Multi-head self-attention over the spatial positions of an NCHW feature
/// map, with a residual connection: x + W_o * attention(W_q x, W_k x, W_v x).
class Attention2d : public Module {
 public:
  Attention2d(std::size_t channels, std::size_t heads, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, ModuleVisitor& visitor) override;

  Linear& query() { return query_; }
  Linear& key() { return key_; }
  Linear& value() { return value_; }
  Linear& output() { return output_; }
  std::size_t heads() const { return heads_; }

 private:
  std::size_t heads_;
  Linear query_, key_, value_, output_;
};

/// Zeroes every parameter of a module (weights and biases).
void zero_parameters(Module& module);

}  // namespace kanpaint::nn

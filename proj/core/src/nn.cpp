// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/nn.hpp"

#include <algorithm>
#include <cmath>

#include "kanpaint/errors.hpp"
#include "kanpaint/ops.hpp"

namespace kanpaint::nn {

namespace {

class Collector : public ModuleVisitor {
 public:
  bool want_params = false, want_buffers = false;
  std::vector<io::NamedTensor> out;
  void parameter(const std::string& name, const Tensor& t) override {
    if (want_params) out.push_back({name, t});
  }
  void buffer(const std::string& name, const Tensor& t) override {
    if (want_buffers) out.push_back({name, t});
  }
};

std::vector<io::NamedTensor> collect(Module& m, bool params, bool buffers) {
  Collector c;
  c.want_params = params;
  c.want_buffers = buffers;
  m.visit("", c);
  return std::move(c.out);
}

Tensor param(Shape shape, Rng& rng, double bound) {
  Tensor t = Tensor::uniform(std::move(shape), rng, -bound, bound);
  t.set_requires_grad(true);
  return t;
}

Tensor constant_param(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

std::vector<io::NamedTensor> Module::parameters() { return collect(*this, true, false); }
std::vector<io::NamedTensor> Module::buffers() { return collect(*this, false, true); }

std::vector<io::NamedTensor> Module::state() {
  auto out = parameters();
  auto bufs = buffers();
  out.insert(out.end(), bufs.begin(), bufs.end());
  return out;
}

void Module::set_training(bool training) {
  struct Setter : ModuleVisitor {
    bool flag;
    void module(Module& m) override { m.training_ = flag; }
  } setter;
  setter.flag = training;
  visit("", setter);
}

void Module::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

std::size_t count_parameters(Module& module) {
  std::size_t n = 0;
  for (const auto& p : module.parameters()) n += p.tensor.numel();
  return n;
}

void copy_state(Module& source, Module& target) {
  auto src = source.state();
  auto dst = target.state();
  if (src.size() != dst.size()) throw ContractError("copy_state: modules differ in tensor count");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw ContractError("copy_state: shape mismatch for " + src[i].name);
    }
    auto s = src[i].tensor.values();
    std::copy(s.begin(), s.end(), dst[i].tensor.mutable_values().begin());
  }
}

void zero_parameters(Module& module) {
  for (auto& p : module.parameters()) {
    auto v = p.tensor.mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  }
}

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& rng, bool bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight_ = param({out_features, in_features}, rng, bound);
  if (bias) bias_ = param({out_features}, rng, bound);
}

Tensor Linear::forward(const Tensor& x) const { return ops::linear(x, weight_, bias_); }

void Linear::visit(const std::string& prefix, ModuleVisitor& visitor) {
  visitor.module(*this);
  visitor.parameter(prefix + "weight", weight_);
  if (bias_.defined()) visitor.parameter(prefix + "bias", bias_);
}

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size,
               Rng& rng, std::size_t stride, std::size_t padding, bool bias)
    : stride_(stride), padding_(padding) {
  const double fan_in = static_cast<double>(in_channels * kernel_size * kernel_size);
  const double bound = 1.0 / std::sqrt(fan_in);
  weight_ = param({out_channels, in_channels, kernel_size, kernel_size}, rng, bound);
  if (bias) bias_ = param({out_channels}, rng, bound);
}

Tensor Conv2d::forward(const Tensor& x) const {
  return ops::conv2d(x, weight_, bias_, stride_, padding_);
}

void Conv2d::visit(const std::string& prefix, ModuleVisitor& visitor) {
  visitor.module(*this);
  visitor.parameter(prefix + "weight", weight_);
  if (bias_.defined()) visitor.parameter(prefix + "bias", bias_);
}

BatchNorm2d::BatchNorm2d(std::size_t channels, double momentum, double eps)
    : gamma_(constant_param({channels}, 1.0)),
      beta_(constant_param({channels}, 0.0)),
      running_mean_(Shape{channels}, 0.0),
      running_var_(Shape{channels}, 1.0),
      momentum_(momentum),
      eps_(eps) {}

Tensor BatchNorm2d::forward(const Tensor& x) {
  return ops::batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, training_, momentum_,
                           eps_);
}

void BatchNorm2d::visit(const std::string& prefix, ModuleVisitor& visitor) {
  visitor.module(*this);
  visitor.parameter(prefix + "gamma", gamma_);
  visitor.parameter(prefix + "beta", beta_);
  visitor.buffer(prefix + "running_mean", running_mean_);
  visitor.buffer(prefix + "running_var", running_var_);
}

LayerNorm::LayerNorm(std::size_t channels, double eps)
    : gamma_(constant_param({channels}, 1.0)), beta_(constant_param({channels}, 0.0)), eps_(eps) {}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma_, beta_, eps_); }

void LayerNorm::visit(const std::string& prefix, ModuleVisitor& visitor) {
  visitor.module(*this);
  visitor.parameter(prefix + "gamma", gamma_);
  visitor.parameter(prefix + "beta", beta_);
}

Attention2d::Attention2d(std::size_t channels, std::size_t heads, Rng& rng)
    : heads_(heads),
      query_(channels, channels, rng),
      key_(channels, channels, rng),
      value_(channels, channels, rng),
      output_(channels, channels, rng) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("attention: " + std::to_string(channels) +
                      " channels are not divisible by " + std::to_string(heads) + " heads");
  }
}

Tensor Attention2d::forward(const Tensor& x) const {
  if (x.rank() != 4) throw DimensionError("attention2d expects NCHW input, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  Tensor tokens = ops::to_tokens(x);
  Tensor attended = ops::scaled_dot_product_attention(query_.forward(tokens), key_.forward(tokens),
                                                      value_.forward(tokens), n, heads_);
  return ops::add(x, ops::from_tokens(output_.forward(attended), n, h, w));
}

void Attention2d::visit(const std::string& prefix, ModuleVisitor& visitor) {
  visitor.module(*this);
  query_.visit(prefix + "query.", visitor);
  key_.visit(prefix + "key.", visitor);
  value_.visit(prefix + "value.", visitor);
  output_.visit(prefix + "output.", visitor);
}

}  // namespace kanpaint::nn

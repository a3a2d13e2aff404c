// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "kanpaint/tensor.hpp"

// Differentiable tensor operations. Every function records itself on the
// current thread's tape when grad mode is on and any input requires grad.
// Image tensors follow the NCHW convention.
namespace kanpaint::ops {

// Elementwise (operands must have identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [N, ...] -> [N], mean over all non-batch elements.
Tensor mean_per_sample(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[B,in] * weight[out,in]^T + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Cross-correlation of input[N,Cin,H,W] with kernel[Cout,Cin,kh,kw];
/// bias[Cout] may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// 2x2 max pooling with stride 2; H and W must be even.
Tensor max_pool2d(const Tensor& x);
Tensor upsample_nearest2x(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// x[N,C,H,W] + e[N,C] broadcast over the spatial axes.
Tensor add_channelwise(const Tensor& x, const Tensor& e);
/// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);

/// Batch normalization over (N,H,W) per channel. In training mode the batch
/// statistics are used and the running buffers are updated in place.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);

/// Normalizes each sample over all of its non-batch elements, then applies a
/// per-channel (axis 1) affine transform.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// [N,C,H,W] -> [N*H*W, C], one row per spatial position.
Tensor to_tokens(const Tensor& x);
/// Inverse of to_tokens.
Tensor from_tokens(const Tensor& tokens, std::size_t batch, std::size_t height, std::size_t width);

/// softmax(Q K^T / sqrt(d)) V per sample and head. q, k, v are [batch*L, C]
/// token matrices; C must be divisible by heads.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    std::size_t batch, std::size_t heads);

}  // namespace kanpaint::ops

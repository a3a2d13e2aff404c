// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "gemm.hpp"
#include "op_support.hpp"

namespace kanpaint::ops {

using detail::finish;
using detail::grad_of;
using detail::require_rank;
using detail::require_same_shape;
using detail::wants_grad;

namespace {

template <typename F>
Tensor unary(const Tensor& a, F&& forward) {
  Tensor out(a.shape());
  auto x = a.values();
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto x = a.values(), y = b.values();
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  return finish(out, "add", {&a, &b}, [a, b](std::span<const double> g) {
    for (const Tensor* t : {&a, &b}) {
      if (!wants_grad(*t)) continue;
      auto d = grad_of(*t);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto x = a.values(), y = b.values();
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  return finish(out, "sub", {&a, &b}, [a, b](std::span<const double> g) {
    if (wants_grad(a)) {
      auto d = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (wants_grad(b)) {
      auto d = grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto x = a.values(), y = b.values();
  auto o = out.mutable_values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  return finish(out, "mul", {&a, &b}, [a, b](std::span<const double> g) {
    if (wants_grad(a)) {
      auto d = grad_of(a);
      auto y = b.values();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
    }
    if (wants_grad(b)) {
      auto d = grad_of(b);
      auto x = a.values();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = unary(a, [factor](double v) { return v * factor; });
  return finish(out, "scale", {&a}, [a, factor](std::span<const double> g) {
    auto d = grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += factor * g[i];
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  Tensor out = unary(a, [value](double v) { return v + value; });
  return finish(out, "add_scalar", {&a}, [a](std::span<const double> g) {
    auto d = grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Tensor square(const Tensor& a) {
  Tensor out = unary(a, [](double v) { return v * v; });
  return finish(out, "square", {&a}, [a](std::span<const double> g) {
    auto d = grad_of(a);
    auto x = a.values();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += 2.0 * x[i] * g[i];
  });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.values())
    if (v < 0.0) throw ContractError("sqrt of a negative value");
  Tensor out = unary(a, [](double v) { return std::sqrt(v); });
  return finish(out, "sqrt", {&a}, [a, out](std::span<const double> g) {
    auto d = grad_of(a);
    auto y = out.values();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] > 0.0) d[i] += 0.5 * g[i] / y[i];
  });
}

Tensor relu(const Tensor& a) {
  Tensor out = unary(a, [](double v) { return v > 0.0 ? v : 0.0; });
  return finish(out, "relu", {&a}, [a](std::span<const double> g) {
    auto d = grad_of(a);
    auto x = a.values();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) d[i] += g[i];
  });
}

Tensor silu(const Tensor& a) {
  Tensor out = unary(a, [](double v) { return v * sigmoid(v); });
  return finish(out, "silu", {&a}, [a](std::span<const double> g) {
    auto d = grad_of(a);
    auto x = a.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = sigmoid(x[i]);
      d[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  Tensor out = Tensor::scalar(total);
  return finish(out, "sum", {&a}, [a](std::span<const double> g) {
    auto d = grad_of(a);
    for (auto& v : d) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  const auto n = a.numel();
  if (n == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor mean_per_sample(const Tensor& a) {
  if (a.rank() < 1 || a.dim(0) == 0) throw DimensionError("mean_per_sample: empty batch axis");
  const std::size_t n = a.dim(0);
  const std::size_t inner = a.numel() / n;
  Tensor out(Shape{n});
  auto x = a.values();
  auto o = out.mutable_values();
  for (std::size_t b = 0; b < n; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += x[b * inner + i];
    o[b] = s / static_cast<double>(inner);
  }
  return finish(out, "mean_per_sample", {&a}, [a, n, inner](std::span<const double> g) {
    auto d = grad_of(a);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < inner; ++i) d[b * inner + i] += g[b] / static_cast<double>(inner);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
  return finish(out, "reshape", {&a}, [a](std::span<const double> g) {
    auto d = grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ (lhs axis 1 = " + std::to_string(k) +
                         ", rhs axis 0 = " + std::to_string(b.dim(0)) + ")");
  }
  Tensor out(Shape{m, n});
  detail::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.mutable_values().data());
  return finish(out, "matmul", {&a, &b}, [a, b, m, n, k](std::span<const double> g) {
    if (wants_grad(a)) detail::gemm_nt(m, k, n, g.data(), b.values().data(), grad_of(a).data());
    if (wants_grad(b)) detail::gemm_tn(k, n, m, a.values().data(), g.data(), grad_of(b).data());
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t batch = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input features (axis 1) = " + std::to_string(in) +
                         " but weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.defined() && bias.shape() != Shape{out_f}) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()));
  }
  Tensor out(Shape{batch, out_f});
  auto o = out.mutable_values();
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t r = 0; r < batch; ++r) std::copy(bv.begin(), bv.end(), o.begin() + r * out_f);
  }
  detail::gemm_nt(batch, out_f, in, x.values().data(), weight.values().data(), o.data());
  return finish(out, "linear", {&x, &weight, &bias},
                [x, weight, bias, batch, in, out_f](std::span<const double> g) {
                  if (wants_grad(x))
                    detail::gemm_nn(batch, in, out_f, g.data(), weight.values().data(),
                                    grad_of(x).data());
                  if (wants_grad(weight))
                    detail::gemm_tn(out_f, in, batch, g.data(), x.values().data(),
                                    grad_of(weight).data());
                  if (wants_grad(bias)) {
                    auto d = grad_of(bias);
                    for (std::size_t r = 0; r < batch; ++r)
                      for (std::size_t j = 0; j < out_f; ++j) d[j] += g[r * out_f + j];
                  }
                });
}

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t col_rows() const { return cin * kh * kw; }
  std::size_t col_cols() const { return ho * wo; }
};

void im2col(const ConvGeometry& g, const double* x, double* col) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(g.h) &&
                                jj < static_cast<std::ptrdiff_t>(g.w);
            row[oi * g.wo + oj] = inside ? x[(c * g.h + ii) * g.w + jj] : 0.0;
          }
        }
      }
}

void col2im(const ConvGeometry& g, const double* col, double* dx) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + ii) * g.w + jj] += row[oi * g.wo + oj];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  ConvGeometry geo{};
  geo.n = input.dim(0);
  geo.cin = input.dim(1);
  geo.h = input.dim(2);
  geo.w = input.dim(3);
  geo.cout = kernel.dim(0);
  geo.kh = kernel.dim(2);
  geo.kw = kernel.dim(3);
  geo.stride = stride;
  geo.pad = padding;
  if (kernel.dim(1) != geo.cin) {
    throw DimensionError("conv2d: input channels (axis 1) = " + std::to_string(geo.cin) +
                         " but kernel axis 1 = " + std::to_string(kernel.dim(1)));
  }
  if (geo.kh % 2 == 0 || geo.kw % 2 == 0) {
    throw DimensionError("conv2d: kernel spatial axes (2,3) must be odd, got " +
                         shape_str(kernel.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t ph = geo.h + 2 * padding, pw = geo.w + 2 * padding;
  if (ph < geo.kh || pw < geo.kw || (ph - geo.kh) % stride != 0 || (pw - geo.kw) % stride != 0) {
    throw DimensionError("conv2d: spatial axes (2,3) of " + shape_str(input.shape()) +
                         " are incompatible with kernel " + shape_str(kernel.shape()) +
                         ", stride " + std::to_string(stride) + ", padding " +
                         std::to_string(padding));
  }
  geo.ho = (ph - geo.kh) / stride + 1;
  geo.wo = (pw - geo.kw) / stride + 1;
  if (bias.defined() && bias.shape() != Shape{geo.cout}) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));
  }

  Tensor out(Shape{geo.n, geo.cout, geo.ho, geo.wo});
  auto o = out.mutable_values();
  const std::size_t in_stride = geo.cin * geo.h * geo.w;
  const std::size_t out_stride = geo.cout * geo.col_cols();
  std::vector<double> col(geo.col_rows() * geo.col_cols());
  for (std::size_t b = 0; b < geo.n; ++b) {
    double* ob = o.data() + b * out_stride;
    if (bias.defined()) {
      auto bv = bias.values();
      for (std::size_t c = 0; c < geo.cout; ++c)
        std::fill(ob + c * geo.col_cols(), ob + (c + 1) * geo.col_cols(), bv[c]);
    }
    im2col(geo, input.values().data() + b * in_stride, col.data());
    detail::gemm_nn(geo.cout, geo.col_cols(), geo.col_rows(), kernel.values().data(), col.data(),
                    ob);
  }
  return finish(out, "conv2d", {&input, &kernel, &bias},
                [input, kernel, bias, geo, in_stride, out_stride](std::span<const double> g) {
                  std::vector<double> col(geo.col_rows() * geo.col_cols());
                  std::vector<double> dcol;
                  if (wants_grad(input)) dcol.resize(col.size());
                  for (std::size_t b = 0; b < geo.n; ++b) {
                    const double* gb = g.data() + b * out_stride;
                    if (wants_grad(kernel)) {
                      im2col(geo, input.values().data() + b * in_stride, col.data());
                      detail::gemm_nt(geo.cout, geo.col_rows(), geo.col_cols(), gb, col.data(),
                                      grad_of(kernel).data());
                    }
                    if (wants_grad(input)) {
                      std::fill(dcol.begin(), dcol.end(), 0.0);
                      detail::gemm_tn(geo.col_rows(), geo.col_cols(), geo.cout,
                                      kernel.values().data(), gb, dcol.data());
                      col2im(geo, dcol.data(), grad_of(input).data() + b * in_stride);
                    }
                    if (wants_grad(bias)) {
                      auto d = grad_of(bias);
                      for (std::size_t c = 0; c < geo.cout; ++c)
                        for (std::size_t p = 0; p < geo.col_cols(); ++p)
                          d[c] += gb[c * geo.col_cols() + p];
                    }
                  }
                });
}

Tensor max_pool2d(const Tensor& x) {
  require_rank(x, 4, "max_pool2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("max_pool2d: spatial axes (2,3) must be even, got " +
                         shape_str(x.shape()));
  }
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out(Shape{n, c, ho, wo});
  std::vector<std::size_t> argmax(out.numel());
  auto xv = x.values();
  auto o = out.mutable_values();
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = plane * h * w + (2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = plane * h * w + (2 * i + di) * w + 2 * j + dj;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t oi = (plane * ho + i) * wo + j;
        o[oi] = xv[best];
        argmax[oi] = best;
      }
  return finish(out, "max_pool2d", {&x}, [x, argmax = std::move(argmax)](std::span<const double> g) {
    auto d = grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) d[argmax[i]] += g[i];
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out(Shape{n, c, 2 * h, 2 * w});
  auto xv = x.values();
  auto o = out.mutable_values();
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        o[(plane * 2 * h + i) * 2 * w + j] = xv[(plane * h + i / 2) * w + j / 2];
  return finish(out, "upsample_nearest2x", {&x}, [x, n, c, h, w](std::span<const double> g) {
    auto d = grad_of(x);
    for (std::size_t plane = 0; plane < n * c; ++plane)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * w; ++j)
          d[(plane * h + i / 2) * w + j / 2] += g[(plane * 2 * h + i) * 2 * w + j];
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels", "lhs");
  require_rank(b, 4, "concat_channels", "rhs");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: axes 0,2,3 must match, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  auto o = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(av.begin() + s * ca * hw, ca * hw, o.begin() + s * (ca + cb) * hw);
    std::copy_n(bv.begin() + s * cb * hw, cb * hw, o.begin() + s * (ca + cb) * hw + ca * hw);
  }
  return finish(out, "concat_channels", {&a, &b}, [a, b, n, ca, cb, hw](std::span<const double> g) {
    if (wants_grad(a)) {
      auto d = grad_of(a);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < ca * hw; ++i) d[s * ca * hw + i] += g[s * (ca + cb) * hw + i];
    }
    if (wants_grad(b)) {
      auto d = grad_of(b);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < cb * hw; ++i)
          d[s * cb * hw + i] += g[s * (ca + cb) * hw + ca * hw + i];
    }
  });
}

Tensor add_channelwise(const Tensor& x, const Tensor& e) {
  require_rank(x, 4, "add_channelwise", "input");
  require_rank(e, 2, "add_channelwise", "embedding");
  if (e.dim(0) != x.dim(0) || e.dim(1) != x.dim(1)) {
    throw DimensionError("add_channelwise: embedding " + shape_str(e.shape()) +
                         " does not match axes 0,1 of " + shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  auto o = out.mutable_values();
  auto xv = x.values(), ev = e.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < hw; ++i) o[p * hw + i] = xv[p * hw + i] + ev[p];
  return finish(out, "add_channelwise", {&x, &e}, [x, e, planes, hw](std::span<const double> g) {
    if (wants_grad(x)) {
      auto d = grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (wants_grad(e)) {
      auto d = grad_of(e);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < hw; ++i) d[p] += g[p * hw + i];
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out(Shape{n, c});
  auto o = out.mutable_values();
  auto xv = x.values();
  for (std::size_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += xv[p * hw + i];
    o[p] = s / static_cast<double>(hw);
  }
  return finish(out, "global_avg_pool", {&x}, [x, hw](std::span<const double> g) {
    auto d = grad_of(x);
    for (std::size_t p = 0; p < g.size(); ++p)
      for (std::size_t i = 0; i < hw; ++i) d[p * hw + i] += g[p] / static_cast<double>(hw);
  });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training, double momentum,
                    double eps) {
  require_rank(x, 4, "batch_norm2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean), static_cast<const Tensor*>(&running_var)}) {
    if (t->shape() != Shape{c}) {
      throw DimensionError("batch_norm2d: per-channel tensor " + shape_str(t->shape()) +
                           " does not match axis 1 of " + shape_str(x.shape()));
    }
  }
  const std::size_t count = n * hw;
  std::vector<double> mu(c), inv_std(c);
  auto xv = x.values();
  if (training) {
    auto rm = running_mean.mutable_values();
    auto rv = running_var.mutable_values();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += xv[(b * c + ch) * hw + i];
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double dlt = xv[(b * c + ch) * hw + i] - m;
          v += dlt * dlt;
        }
      const double var = v / static_cast<double>(count);
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
      rm[ch] = (1.0 - momentum) * rm[ch] + momentum * m;
      rv[ch] = (1.0 - momentum) * rv[ch] + momentum * unbiased;
    }
  } else {
    auto rm = running_mean.values();
    auto rv = running_var.values();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = rm[ch];
      inv_std[ch] = 1.0 / std::sqrt(rv[ch] + eps);
    }
  }
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  auto o = out.mutable_values();
  auto gv = gamma.values(), bv = beta.values();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        xhat[idx] = (xv[idx] - mu[ch]) * inv_std[ch];
        o[idx] = gv[ch] * xhat[idx] + bv[ch];
      }
  return finish(out, "batch_norm2d", {&x, &gamma, &beta},
                [x, gamma, beta, training, n, c, hw, count, inv_std = std::move(inv_std),
                 xhat = std::move(xhat)](std::span<const double> g) {
                  auto gv = gamma.values();
                  std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch)
                      for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t idx = (b * c + ch) * hw + i;
                        sum_dy[ch] += g[idx];
                        sum_dy_xhat[ch] += g[idx] * xhat[idx];
                      }
                  if (wants_grad(gamma)) {
                    auto d = grad_of(gamma);
                    for (std::size_t ch = 0; ch < c; ++ch) d[ch] += sum_dy_xhat[ch];
                  }
                  if (wants_grad(beta)) {
                    auto d = grad_of(beta);
                    for (std::size_t ch = 0; ch < c; ++ch) d[ch] += sum_dy[ch];
                  }
                  if (!wants_grad(x)) return;
                  auto d = grad_of(x);
                  const double m = static_cast<double>(count);
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch)
                      for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t idx = (b * c + ch) * hw + i;
                        if (training) {
                          d[idx] += gv[ch] * inv_std[ch] / m *
                                    (m * g[idx] - sum_dy[ch] - xhat[idx] * sum_dy_xhat[ch]);
                        } else {
                          d[idx] += gv[ch] * inv_std[ch] * g[idx];
                        }
                      }
                });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 2) throw DimensionError("layer_norm: input needs a batch and a channel axis");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t per_sample = x.numel() / n, inner = per_sample / c;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm: affine parameters must be [" + std::to_string(c) + "]");
  }
  auto xv = x.values();
  auto gv = gamma.values(), bv = beta.values();
  Tensor out(x.shape());
  auto o = out.mutable_values();
  std::vector<double> xhat(x.numel()), inv_std(n);
  for (std::size_t b = 0; b < n; ++b) {
    const double* xs = xv.data() + b * per_sample;
    double s = 0.0;
    for (std::size_t i = 0; i < per_sample; ++i) s += xs[i];
    const double m = s / static_cast<double>(per_sample);
    double v = 0.0;
    for (std::size_t i = 0; i < per_sample; ++i) v += (xs[i] - m) * (xs[i] - m);
    inv_std[b] = 1.0 / std::sqrt(v / static_cast<double>(per_sample) + eps);
    for (std::size_t i = 0; i < per_sample; ++i) {
      const std::size_t idx = b * per_sample + i;
      const std::size_t ch = i / inner;
      xhat[idx] = (xs[i] - m) * inv_std[b];
      o[idx] = gv[ch] * xhat[idx] + bv[ch];
    }
  }
  return finish(out, "layer_norm", {&x, &gamma, &beta},
                [x, gamma, beta, n, c, per_sample, inner, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](std::span<const double> g) {
                  auto gv = gamma.values();
                  if (wants_grad(gamma) || wants_grad(beta)) {
                    std::vector<double> dg(c, 0.0), db(c, 0.0);
                    for (std::size_t idx = 0; idx < g.size(); ++idx) {
                      const std::size_t ch = (idx % per_sample) / inner;
                      dg[ch] += g[idx] * xhat[idx];
                      db[ch] += g[idx];
                    }
                    if (wants_grad(gamma)) {
                      auto d = grad_of(gamma);
                      for (std::size_t ch = 0; ch < c; ++ch) d[ch] += dg[ch];
                    }
                    if (wants_grad(beta)) {
                      auto d = grad_of(beta);
                      for (std::size_t ch = 0; ch < c; ++ch) d[ch] += db[ch];
                    }
                  }
                  if (!wants_grad(x)) return;
                  auto d = grad_of(x);
                  const double m = static_cast<double>(per_sample);
                  for (std::size_t b = 0; b < n; ++b) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t i = 0; i < per_sample; ++i) {
                      const std::size_t idx = b * per_sample + i;
                      const double dxh = g[idx] * gv[i / inner];
                      s1 += dxh;
                      s2 += dxh * xhat[idx];
                    }
                    for (std::size_t i = 0; i < per_sample; ++i) {
                      const std::size_t idx = b * per_sample + i;
                      const double dxh = g[idx] * gv[i / inner];
                      d[idx] += inv_std[b] / m * (m * dxh - s1 - xhat[idx] * s2);
                    }
                  }
                });
}

Tensor to_tokens(const Tensor& x) {
  require_rank(x, 4, "to_tokens", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out(Shape{n * hw, c});
  auto xv = x.values();
  auto o = out.mutable_values();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) o[(b * hw + p) * c + ch] = xv[(b * c + ch) * hw + p];
  return finish(out, "to_tokens", {&x}, [x, n, c, hw](std::span<const double> g) {
    auto d = grad_of(x);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) d[(b * c + ch) * hw + p] += g[(b * hw + p) * c + ch];
  });
}

Tensor from_tokens(const Tensor& tokens, std::size_t batch, std::size_t height, std::size_t width) {
  require_rank(tokens, 2, "from_tokens", "tokens");
  const std::size_t hw = height * width, c = tokens.dim(1);
  if (tokens.dim(0) != batch * hw) {
    throw DimensionError("from_tokens: axis 0 = " + std::to_string(tokens.dim(0)) +
                         " is not batch*height*width = " + std::to_string(batch * hw));
  }
  Tensor out(Shape{batch, c, height, width});
  auto tv = tokens.values();
  auto o = out.mutable_values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) o[(b * c + ch) * hw + p] = tv[(b * hw + p) * c + ch];
  return finish(out, "from_tokens", {&tokens}, [tokens, batch, c, hw](std::span<const double> g) {
    auto d = grad_of(tokens);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) d[(b * hw + p) * c + ch] += g[(b * c + ch) * hw + p];
  });
}

namespace {

// Copies head `h` of sample `b` out of a [batch*L, C] token matrix.
void gather_head(const double* src, std::size_t b, std::size_t h, std::size_t len,
                 std::size_t channels, std::size_t head_dim, double* dst) {
  for (std::size_t i = 0; i < len; ++i)
    std::copy_n(src + (b * len + i) * channels + h * head_dim, head_dim, dst + i * head_dim);
}

void scatter_add_head(const double* src, std::size_t b, std::size_t h, std::size_t len,
                      std::size_t channels, std::size_t head_dim, double* dst) {
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < head_dim; ++j)
      dst[(b * len + i) * channels + h * head_dim + j] += src[i * head_dim + j];
}

}  // namespace

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    std::size_t batch, std::size_t heads) {
  require_rank(q, 2, "attention", "query");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t channels = q.dim(1);
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("attention: channel count " + std::to_string(channels) +
                      " is not divisible by head count " + std::to_string(heads));
  }
  if (batch == 0 || q.dim(0) % batch != 0) {
    throw DimensionError("attention: token axis 0 = " + std::to_string(q.dim(0)) +
                         " is not a multiple of batch " + std::to_string(batch));
  }
  const std::size_t len = q.dim(0) / batch, hd = channels / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor out(q.shape());
  std::vector<double> probs(batch * heads * len * len);
  std::vector<double> qh(len * hd), kh(len * hd), vh(len * hd), oh(len * hd);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      gather_head(q.values().data(), b, h, len, channels, hd, qh.data());
      gather_head(k.values().data(), b, h, len, channels, hd, kh.data());
      gather_head(v.values().data(), b, h, len, channels, hd, vh.data());
      double* p = probs.data() + (b * heads + h) * len * len;
      std::fill(p, p + len * len, 0.0);
      detail::gemm_nt(len, len, hd, qh.data(), kh.data(), p);
      for (std::size_t i = 0; i < len; ++i) {
        double* row = p + i * len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          row[j] *= inv_scale;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j < len; ++j) row[j] /= z;
      }
      std::fill(oh.begin(), oh.end(), 0.0);
      detail::gemm_nn(len, hd, len, p, vh.data(), oh.data());
      auto o = out.mutable_values();
      for (std::size_t i = 0; i < len; ++i)
        std::copy_n(oh.data() + i * hd, hd, o.data() + (b * len + i) * channels + h * hd);
    }
  return finish(
      out, "attention", {&q, &k, &v},
      [q, k, v, batch, heads, len, hd, channels, inv_scale,
       probs = std::move(probs)](std::span<const double> g) {
        std::vector<double> qh(len * hd), kh(len * hd), vh(len * hd), gh(len * hd);
        std::vector<double> dq(len * hd), dk(len * hd), dv(len * hd), dp(len * len);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + (b * heads + h) * len * len;
            gather_head(q.values().data(), b, h, len, channels, hd, qh.data());
            gather_head(k.values().data(), b, h, len, channels, hd, kh.data());
            gather_head(v.values().data(), b, h, len, channels, hd, vh.data());
            gather_head(g.data(), b, h, len, channels, hd, gh.data());
            if (wants_grad(v)) {
              std::fill(dv.begin(), dv.end(), 0.0);
              detail::gemm_tn(len, hd, len, p, gh.data(), dv.data());
              scatter_add_head(dv.data(), b, h, len, channels, hd, grad_of(v).data());
            }
            if (!wants_grad(q) && !wants_grad(k)) continue;
            std::fill(dp.begin(), dp.end(), 0.0);
            detail::gemm_nt(len, len, hd, gh.data(), vh.data(), dp.data());
            // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(d) scale.
            for (std::size_t i = 0; i < len; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) dot += dp[i * len + j] * p[i * len + j];
              for (std::size_t j = 0; j < len; ++j)
                dp[i * len + j] = p[i * len + j] * (dp[i * len + j] - dot) * inv_scale;
            }
            if (wants_grad(q)) {
              std::fill(dq.begin(), dq.end(), 0.0);
              detail::gemm_nn(len, hd, len, dp.data(), kh.data(), dq.data());
              scatter_add_head(dq.data(), b, h, len, channels, hd, grad_of(q).data());
            }
            if (wants_grad(k)) {
              std::fill(dk.begin(), dk.end(), 0.0);
              detail::gemm_tn(len, hd, len, dp.data(), qh.data(), dk.data());
              scatter_add_head(dk.data(), b, h, len, channels, hd, grad_of(k).data());
            }
          }
      });
}

}  // namespace kanpaint::ops

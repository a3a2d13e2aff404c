// SPDX-License-Identifier: Apache-2.0
#include "gradcases.hpp"

#include <cmath>

#include "fixtures.hpp"
#include "kanpaint/kan.hpp"
#include "kanpaint/nn.hpp"
#include "kanpaint/ops.hpp"
#include "kanpaint/ukan.hpp"

namespace kanpaint::support {

namespace {

// Weighted sum with fixed random weights so every output element matters.
Tensor project(const Tensor& out, const Tensor& weights) { return ops::sum(ops::mul(out, weights)); }

// Values bounded away from zero so kinks and sqrt stay well-conditioned.
Tensor away_from_zero(Shape shape, Rng& rng, double margin) {
  Tensor t = Tensor::randn(std::move(shape), rng);
  for (auto& v : t.mutable_values()) v = v >= 0 ? v + margin : v - margin;
  return t;
}

using Leaves = std::vector<Tensor>;
using Fn = std::function<Tensor()>;

GradCase unary(std::string name, Tensor (*op)(const Tensor&), bool positive = false) {
  return {std::move(name), [op, positive](Rng& rng, Leaves& leaves, Fn& f) {
            Tensor x = away_from_zero({2, 3, 4}, rng, 0.05);
            if (positive) for (auto& v : x.mutable_values()) v = std::abs(v) + 0.5;
            Tensor w = Tensor::randn({2, 3, 4}, rng);
            leaves = {x};
            f = [=] { return project(op(x), w); };
          }};
}

GradCase binary(std::string name, Tensor (*op)(const Tensor&, const Tensor&)) {
  return {std::move(name), [op](Rng& rng, Leaves& leaves, Fn& f) {
            Tensor a = Tensor::randn({3, 5}, rng), b = Tensor::randn({3, 5}, rng);
            Tensor w = Tensor::randn({3, 5}, rng);
            leaves = {a, b};
            f = [=] { return project(op(a, b), w); };
          }};
}

std::vector<GradCase> build_cases() {
  std::vector<GradCase> cases;
  cases.push_back(binary("add", &ops::add));
  cases.push_back(binary("sub", &ops::sub));
  cases.push_back(binary("mul", &ops::mul));
  cases.push_back(unary("square", &ops::square));
  cases.push_back(unary("sqrt", &ops::sqrt, true));
  cases.push_back(unary("relu", &ops::relu));
  cases.push_back(unary("silu", &ops::silu));
  cases.push_back({"scale_add_scalar", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({4, 3}, rng), w = Tensor::randn({4, 3}, rng);
                     leaves = {x};
                     f = [=] { return project(ops::add_scalar(ops::scale(x, -1.7), 0.3), w); };
                   }});
  cases.push_back({"sum_mean", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({3, 4}, rng);
                     leaves = {x};
                     f = [=] { return ops::add(ops::square(ops::sum(x)), ops::scale(ops::mean(ops::square(x)), 3.0)); };
                   }});
  cases.push_back({"mean_per_sample", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({3, 2, 2}, rng), w = Tensor::randn({3}, rng);
                     leaves = {x};
                     f = [=] { return project(ops::mean_per_sample(ops::square(x)), w); };
                   }});
  cases.push_back({"reshape", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({2, 6}, rng), w = Tensor::randn({3, 4}, rng);
                     leaves = {x};
                     f = [=] { return project(ops::square(ops::reshape(x, {3, 4})), w); };
                   }});
  cases.push_back({"matmul", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor a = Tensor::randn({4, 5}, rng), b = Tensor::randn({5, 3}, rng);
                     Tensor w = Tensor::randn({4, 3}, rng);
                     leaves = {a, b};
                     f = [=] { return project(ops::matmul(a, b), w); };
                   }});
  cases.push_back({"linear", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({3, 4}, rng), wt = Tensor::randn({5, 4}, rng);
                     Tensor b = Tensor::randn({5}, rng), w = Tensor::randn({3, 5}, rng);
                     leaves = {x, wt, b};
                     f = [=] { return project(ops::linear(x, wt, b), w); };
                   }});
  cases.push_back({"conv2d_pad1", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({2, 3, 5, 5}, rng), k = Tensor::randn({4, 3, 3, 3}, rng);
                     Tensor b = Tensor::randn({4}, rng), w = Tensor::randn({2, 4, 5, 5}, rng);
                     leaves = {x, k, b};
                     f = [=] { return project(ops::conv2d(x, k, b, 1, 1), w); };
                   }});
  cases.push_back({"conv2d_stride2", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({1, 2, 7, 7}, rng), k = Tensor::randn({3, 2, 3, 3}, rng);
                     Tensor b = Tensor::randn({3}, rng), w = Tensor::randn({1, 3, 3, 3}, rng);
                     leaves = {x, k, b};
                     f = [=] { return project(ops::conv2d(x, k, b, 2, 0), w); };
                   }});
  cases.push_back({"max_pool2d", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({2, 2, 4, 4}, rng), w = Tensor::randn({2, 2, 2, 2}, rng);
                     leaves = {x};
                     f = [=] { return project(ops::max_pool2d(x), w); };
                   }});
  cases.push_back({"upsample_nearest2x", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({1, 2, 3, 3}, rng), w = Tensor::randn({1, 2, 6, 6}, rng);
                     leaves = {x};
                     f = [=] { return project(ops::upsample_nearest2x(x), w); };
                   }});
  cases.push_back({"concat_channels", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor a = Tensor::randn({2, 1, 3, 3}, rng), b = Tensor::randn({2, 2, 3, 3}, rng);
                     Tensor w = Tensor::randn({2, 3, 3, 3}, rng);
                     leaves = {a, b};
                     f = [=] { return project(ops::concat_channels(a, b), w); };
                   }});
  cases.push_back({"add_channelwise", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({2, 3, 2, 2}, rng), e = Tensor::randn({2, 3}, rng);
                     Tensor w = Tensor::randn({2, 3, 2, 2}, rng);
                     leaves = {x, e};
                     f = [=] { return project(ops::square(ops::add_channelwise(x, e)), w); };
                   }});
  cases.push_back({"global_avg_pool", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({2, 3, 4, 4}, rng), w = Tensor::randn({2, 3}, rng);
                     leaves = {x};
                     f = [=] { return project(ops::global_avg_pool(x), w); };
                   }});
  cases.push_back({"batch_norm2d_train", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({2, 3, 3, 3}, rng);
                     Tensor g = Tensor::uniform({3}, rng, 0.5, 1.5), b = Tensor::randn({3}, rng);
                     Tensor w = Tensor::randn({2, 3, 3, 3}, rng);
                     Tensor rm(Shape{3}, 0.0), rv(Shape{3}, 1.0);
                     leaves = {x, g, b};
                     f = [=]() mutable { return project(ops::batch_norm2d(x, g, b, rm, rv, true), w); };
                   }});
  cases.push_back({"batch_norm2d_eval", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({2, 3, 2, 2}, rng);
                     Tensor g = Tensor::randn({3}, rng), b = Tensor::randn({3}, rng);
                     Tensor rm = Tensor::randn({3}, rng), rv = Tensor::uniform({3}, rng, 0.5, 2.0);
                     Tensor w = Tensor::randn({2, 3, 2, 2}, rng);
                     leaves = {x, g, b};
                     f = [=]() mutable { return project(ops::batch_norm2d(x, g, b, rm, rv, false), w); };
                   }});
  cases.push_back({"layer_norm", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({2, 3, 2, 2}, rng);
                     Tensor g = Tensor::randn({3}, rng), b = Tensor::randn({3}, rng);
                     Tensor w = Tensor::randn({2, 3, 2, 2}, rng);
                     leaves = {x, g, b};
                     f = [=] { return project(ops::layer_norm(x, g, b), w); };
                   }});
  cases.push_back({"tokens_roundtrip", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor x = Tensor::randn({2, 3, 2, 3}, rng), w = Tensor::randn({12, 3}, rng);
                     Tensor w2 = Tensor::randn({2, 3, 2, 3}, rng);
                     leaves = {x};
                     f = [=] {
                       Tensor tok = ops::to_tokens(x);
                       return ops::add(project(ops::square(tok), w),
                                       project(ops::from_tokens(ops::relu(tok), 2, 2, 3), w2));
                     };
                   }});
  cases.push_back({"attention", [](Rng& rng, Leaves& leaves, Fn& f) {
                     Tensor q = Tensor::randn({10, 4}, rng), k = Tensor::randn({10, 4}, rng);
                     Tensor v = Tensor::randn({10, 4}, rng), w = Tensor::randn({10, 4}, rng);
                     leaves = {q, k, v};
                     f = [=] { return project(ops::scaled_dot_product_attention(q, k, v, 2, 2), w); };
                   }});
  cases.push_back({"kan_linear", [](Rng& rng, Leaves& leaves, Fn& f) {
                     const kan::SplineGrid grid(-1.0, 1.0, 5, 3);
                     Tensor x = Tensor::uniform({6, 3}, rng, -1.4, 1.4);
                     // Keep inputs a finite-difference step away from the clamp points.
                     for (auto& v : x.mutable_values()) {
                       if (std::abs(std::abs(v) - 1.0) < 1e-3) v *= 0.9;
                     }
                     Tensor bw = Tensor::randn({4, 3}, rng), sc = Tensor::randn({4, 3}, rng);
                     Tensor cf = Tensor::randn({4, 3, grid.num_basis()}, rng);
                     Tensor w = Tensor::randn({6, 4}, rng);
                     leaves = {x, bw, sc, cf};
                     f = [=] { return project(ops::square(kan::kan_linear(x, bw, sc, cf, grid)), w); };
                   }});
  cases.push_back({"attention2d_module", [](Rng& rng, Leaves& leaves, Fn& f) {
                     auto att = std::make_shared<nn::Attention2d>(4, 2, rng);
                     Tensor x = Tensor::randn({2, 4, 2, 2}, rng), w = Tensor::randn({2, 4, 2, 2}, rng);
                     leaves = {x};
                     for (auto& p : att->parameters()) leaves.push_back(p.tensor);
                     f = [=] { return project(att->forward(x), w); };
                   }});
  cases.push_back({"kan_block", [](Rng& rng, Leaves& leaves, Fn& f) {
                     auto block = std::make_shared<kan::KanBlock>(2, 3, kan::SplineGrid(), rng, 2, 1);
                     Tensor x = Tensor::randn({1, 2, 3, 3}, rng), w = Tensor::randn({1, 3, 3, 3}, rng);
                     leaves = {x};
                     for (auto& p : block->parameters()) leaves.push_back(p.tensor);
                     f = [=] { return project(block->forward(x), w); };
                   }});
  return cases;
}

}  // namespace

const std::vector<GradCase>& op_grad_cases() {
  static const std::vector<GradCase> cases = build_cases();
  return cases;
}

oracle::GradcheckResult run_grad_case(const GradCase& c, Rng& rng) {
  std::vector<Tensor> leaves;
  std::function<Tensor()> f;
  c.build(rng, leaves, f);
  return oracle::gradcheck(f, leaves, rng, 400);
}

oracle::GradcheckResult run_end_to_end_gradcheck(Rng& rng, std::size_t coordinates) {
  ukan::UkanConfig config = tiny_model("CK", 4, 10);
  auto model = std::make_shared<ukan::ConditionalUkan>(config, rng);
  Tensor x = Tensor::randn({2, 1, 8, 8}, rng);
  Tensor scan = Tensor::uniform({2, 1, 8, 8}, rng, 0.0, 1.0);
  const std::vector<int> t{3, 8};
  const std::vector<ukan::TumorGeometry> tumor{{0.2, 0.4, 0.6, {0.1, 0.2, 0.7, 0.9}}, {}};
  std::vector<Tensor> leaves{x};
  for (auto& p : model->parameters()) leaves.push_back(p.tensor);
  auto f = [=] { return ops::mean(ops::square(model->predict(x, scan, t, tumor))); };
  return oracle::gradcheck(f, leaves, rng, coordinates);
}

}  // namespace kanpaint::support

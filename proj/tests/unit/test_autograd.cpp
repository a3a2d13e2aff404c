// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "kanpaint/autograd.hpp"
#include "kanpaint/errors.hpp"
#include "kanpaint/ops.hpp"

using namespace kanpaint;

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t(Shape{2, 3, 4}, 1.5);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.values().size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>(3)), DimensionError);
}

TEST(Tensor, GradBufferMatchesShape) {
  Tensor a(Shape{2, 3}, 2.0);
  a.set_requires_grad(true);
  backward(ops::sum(ops::square(a)));
  ASSERT_TRUE(a.has_grad());
  EXPECT_EQ(a.grad().size(), a.numel());
  for (double g : a.grad()) EXPECT_DOUBLE_EQ(g, 4.0);
}

TEST(Tensor, SeededRandomIsDeterministic) {
  Rng r1(7), r2(7);
  const Tensor a = Tensor::randn({5, 5}, r1), b = Tensor::randn({5, 5}, r2);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST(Autograd, AnalyticExamples) {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  backward(ops::square(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);

  Tensor z(Shape{4}, 0.0);
  z.set_requires_grad(true);
  backward(ops::sum(ops::silu(z)));
  for (double g : z.grad()) EXPECT_DOUBLE_EQ(g, 0.5);
}

TEST(Autograd, LeafGradsAccumulateUntilCleared) {
  Tensor a = Tensor::scalar(3.0);
  a.set_requires_grad(true);
  backward(ops::square(a));
  backward(ops::square(a));
  EXPECT_DOUBLE_EQ(a.grad()[0], 12.0);
  a.zero_grad();
  backward(ops::scale(a, 5.0));
  EXPECT_DOUBLE_EQ(a.grad()[0], 5.0);
}

TEST(Autograd, TapeIsClearedAfterBackward) {
  Tensor a(Shape{3}, 1.0);
  a.set_requires_grad(true);
  Tensor loss = ops::sum(ops::relu(a));
  EXPECT_GT(Tape::current().size(), 0u);
  backward(loss);
  EXPECT_EQ(Tape::current().size(), 0u);
}

TEST(Autograd, SharedSubexpressionVisitedOnce) {
  // loss = sum(b * b) with b = 2a: d/da = 8a.
  Tensor a(Shape{2}, std::vector<double>{1.0, -2.0});
  a.set_requires_grad(true);
  Tensor b = ops::scale(a, 2.0);
  backward(ops::sum(ops::mul(b, b)));
  EXPECT_DOUBLE_EQ(a.grad()[0], 8.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], -16.0);
}

TEST(Autograd, NonScalarLossIsContractError) {
  Tensor a(Shape{2}, 1.0);
  a.set_requires_grad(true);
  Tensor y = ops::scale(a, 2.0);
  EXPECT_THROW(backward(y), ContractError);
  Tape::current().clear();
}

TEST(Autograd, DetachedLossIsContractError) {
  Tensor a(Shape{2}, 1.0);
  a.set_requires_grad(true);
  Tensor loss = ops::sum(a).detach();
  EXPECT_THROW(backward(loss), ContractError);
  Tape::current().clear();
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Tensor a(Shape{4}, 1.0);
  a.set_requires_grad(true);
  {
    NoGradGuard guard;
    Tensor y = ops::sum(ops::square(a));
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(Tape::current().size(), 0u);
  EXPECT_TRUE(grad_enabled());
}

TEST(Autograd, FiniteCheckModeFlagsInfinity) {
  Tensor inf(Shape{1}, std::numeric_limits<double>::infinity());
  EXPECT_TRUE(std::isinf(ops::add(inf, inf).at(0)));
  set_finite_checks(true);
  EXPECT_THROW(ops::add(inf, inf), ContractError);
  set_finite_checks(false);
  Tape::current().clear();
}

TEST(Autograd, SqrtOfNegativeIsContractError) {
  Tensor a(Shape{2}, std::vector<double>{-1.0, 4.0});
  EXPECT_THROW(ops::sqrt(a), ContractError);
}

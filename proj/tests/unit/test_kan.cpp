// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "../support/gradcases.hpp"
#include "../support/oracles.hpp"
#include "kanpaint/errors.hpp"
#include "kanpaint/kan.hpp"
#include "kanpaint/ops.hpp"

using namespace kanpaint;
using kan::SplineGrid;

namespace {

std::vector<double> basis_row(const SplineGrid& grid, double x) {
  const Tensor b = kan::bspline_basis(Tensor(Shape{1}, x), grid);
  return {b.values().begin(), b.values().end()};
}

SplineGrid random_grid(Rng& rng, int order) {
  std::uniform_real_distribution<double> lo(-3.0, 1.0), width(0.1, 4.0);
  std::uniform_int_distribution<int> intervals(1, 12);
  const double a = lo(rng);
  return SplineGrid(a, a + width(rng), intervals(rng), order);
}

}  // namespace

TEST(SplineGrid, KnotVectorShape) {
  const SplineGrid g(0.0, 1.0, 4, 2);
  ASSERT_EQ(g.knots().size(), 4u + 2 * 2 + 1);
  EXPECT_TRUE(std::is_sorted(g.knots().begin(), g.knots().end()));
  EXPECT_DOUBLE_EQ(g.knots()[2], 0.0);
  EXPECT_DOUBLE_EQ(g.knots()[6], 1.0);
  EXPECT_EQ(g.num_basis(), 6u);
  EXPECT_THROW(SplineGrid(1.0, 1.0), ConfigError);
  EXPECT_THROW(SplineGrid(0.0, 1.0, 0, 3), ConfigError);
  EXPECT_THROW(SplineGrid(0.0, 1.0, 5, 0), ConfigError);
}

TEST(Bspline, LinearHatExample) {
  const auto v = basis_row(SplineGrid(0.0, 1.0, 2, 1), 0.25);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_NEAR(v[0], 0.5, 1e-15);
  EXPECT_NEAR(v[1], 0.5, 1e-15);
  EXPECT_EQ(v[2], 0.0);
}

TEST(Bspline, ClampingIsIdempotent) {
  const SplineGrid g(-1.0, 2.0, 5, 3);
  EXPECT_EQ(basis_row(g, -1.0), basis_row(g, -7.0));
  EXPECT_EQ(basis_row(g, 2.0), basis_row(g, 40.0));
  EXPECT_EQ(basis_row(g, 0.3), basis_row(g, 0.3));
  const auto edge = basis_row(g, 2.0);
  EXPECT_NEAR(std::accumulate(edge.begin(), edge.end(), 0.0), 1.0, 1e-12);
}

// Partition of unity, local support, range and agreement with the recursive
// oracle, for orders 1..3 over random grids and points.
TEST(Bspline, InvariantsOverRandomGrids) {
  Rng rng(7);
  for (int draw = 0; draw < 1000; ++draw) {
    const int order = 1 + draw % 3;
    const SplineGrid g = random_grid(rng, order);
    std::uniform_real_distribution<double> inside(g.range_min(), g.range_max());
    const double x = inside(rng);
    const auto v = basis_row(g, x);
    ASSERT_EQ(v.size(), g.num_basis());
    EXPECT_NEAR(std::accumulate(v.begin(), v.end(), 0.0), 1.0, 1e-9);
    std::size_t nonzero = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      EXPECT_GE(v[j], -1e-15);
      EXPECT_LE(v[j], 1.0 + 1e-15);
      const double lo = g.knots()[j], hi = g.knots()[j + static_cast<std::size_t>(order) + 1];
      if (x < lo || x > hi) {
        EXPECT_EQ(v[j], 0.0) << "support of B_" << j;
      }
      if (v[j] != 0.0) ++nonzero;
      EXPECT_NEAR(v[j], oracle::cox_de_boor(j, order, x, g.knots()), 1e-12);
    }
    EXPECT_LE(nonzero, static_cast<std::size_t>(order) + 1);
  }
}

TEST(KanLayer, ZeroCoefficientsGiveSilu) {
  Rng rng(1);
  kan::KanLayer layer(3, 3, SplineGrid(), rng);
  for (auto& c : layer.coeffs().mutable_values()) c = 0.0;
  auto bw = layer.base_weight().mutable_values();
  for (std::size_t i = 0; i < 9; ++i) bw[i] = i % 4 == 0 ? 1.0 : 0.0;
  const Tensor x = Tensor::randn({5, 3}, rng, 2.0);
  const Tensor y = layer.forward(x);
  const Tensor s = ops::silu(x);
  for (std::size_t i = 0; i < 15; ++i) EXPECT_DOUBLE_EQ(y.at(i), s.at(i));
  EXPECT_THROW(layer.forward(Tensor(Shape{5, 2})), DimensionError);
}

// Least-squares fit of coefficients to f(x) = x; cubic splines reproduce
// linear functions, so the fit is exact up to round-off.
TEST(KanLayer, FittedSplineReproducesIdentity) {
  const SplineGrid grid(-1.0, 1.0, 5, 3);
  const std::size_t nb = grid.num_basis();
  std::vector<double> ata(nb * nb, 0.0), atb(nb, 0.0);
  for (int s = 0; s <= 200; ++s) {
    const double x = -1.0 + 2.0 * s / 200.0;
    const auto b = basis_row(grid, x);
    for (std::size_t i = 0; i < nb; ++i) {
      atb[i] += b[i] * x;
      for (std::size_t j = 0; j < nb; ++j) ata[i * nb + j] += b[i] * b[j];
    }
  }
  for (std::size_t c = 0; c < nb; ++c) {  // Gauss-Jordan, SPD so no pivoting
    for (std::size_t r = 0; r < nb; ++r) {
      if (r == c) continue;
      const double f = ata[r * nb + c] / ata[c * nb + c];
      for (std::size_t k = 0; k < nb; ++k) ata[r * nb + k] -= f * ata[c * nb + k];
      atb[r] -= f * atb[c];
    }
  }
  Rng rng(2);
  kan::KanLayer layer(2, 1, grid, rng);
  for (auto& w : layer.base_weight().mutable_values()) w = 0.0;
  for (auto& w : layer.spline_scale().mutable_values()) w = 1.0;
  auto coeffs = layer.coeffs().mutable_values();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < nb; ++j) coeffs[i * nb + j] = atb[j] / ata[j * nb + j];
  const Tensor x = Tensor::uniform({20, 2}, rng, -1.0, 1.0);
  const Tensor y = layer.forward(x);
  for (std::size_t b = 0; b < 20; ++b) EXPECT_NEAR(y.at(b), x.at(2 * b) + x.at(2 * b + 1), 1e-9);
}

TEST(KanLayer, ParameterCounts) {
  Rng rng(3);
  kan::KanLayer layer(2, 3, SplineGrid(-1, 1, 5, 3), rng);
  EXPECT_EQ(nn::count_parameters(layer), 60u);
  EXPECT_EQ(oracle::count::kan_layer(2, 3, 8), 60u);
  nn::Conv2d conv(4, 8, 3, rng);
  EXPECT_EQ(nn::count_parameters(conv), 296u);
  kan::KanBlock block(4, 6, SplineGrid(), rng, 2, 2);
  EXPECT_EQ(nn::count_parameters(block), oracle::count::kan_block(4, 6, 8, 2));
}

TEST(KanBlock, ConstantPropagation) {
  Rng rng(4);
  kan::KanBlock block(2, 3, SplineGrid(), rng);
  nn::zero_parameters(block.conv());
  auto& layer = block.kan_layers().front();
  const double v[3] = {0.7, -0.4, 1.3};
  for (auto& s : layer.spline_scale().mutable_values()) s = 0.5;
  auto coeffs = layer.coeffs().mutable_values();
  const std::size_t nb = layer.grid().num_basis();
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < nb; ++j) coeffs[(o * 3 + i) * nb + j] = v[o] / (3 * 0.5);
  const Tensor pre = block.pre_attention(Tensor::randn({2, 2, 4, 5}, rng));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t p = 0; p < 20; ++p) EXPECT_NEAR(pre.at((n * 3 + o) * 20 + p), std::max(v[o], 0.0), 1e-12);
}

TEST(KanBlock, SinglePixelDegenerateCase) {
  Rng rng(5);
  kan::KanBlock block(3, 4, SplineGrid(), rng);
  const Tensor x = Tensor::randn({2, 3, 1, 1}, rng);
  // With one pixel only the centre tap of the 3x3 kernel sees data.
  const Tensor centre = block.conv().forward(x);
  Tensor k1(Shape{4, 3, 1, 1});
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t c = 0; c < 3; ++c) k1.mutable_values()[o * 3 + c] = block.conv().weight().at((o * 3 + c) * 9 + 4);
  EXPECT_LT(std::abs(ops::conv2d(x, k1, block.conv().bias(), 1, 0).at(5) - centre.at(5)), 1e-14);

  const Tensor pre = block.pre_attention(x);
  auto& att = block.attention();
  const Tensor tok = ops::to_tokens(pre);
  const Tensor expected = ops::add(tok, att.output().forward(att.value().forward(tok)));
  const Tensor y = ops::to_tokens(block.forward(x));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.at(i), expected.at(i), 1e-12);
}

TEST(KanBlock, MatchesCompositionOfParts) {
  Rng rng(6);
  kan::KanBlock block(4, 4, SplineGrid(), rng);
  const Tensor x = Tensor::randn({1, 4, 6, 6}, rng);
  const Tensor y = block.forward(x);
  EXPECT_EQ(y.shape(), x.shape());
  const Tensor tokens = ops::to_tokens(block.conv().forward(x));
  const Tensor act = ops::relu(block.kan_layers().front().forward(tokens));
  const Tensor ref = block.attention().forward(ops::from_tokens(act, 1, 6, 6));
  for (std::size_t i = 0; i < y.numel(); ++i) {
    ASSERT_TRUE(std::isfinite(y.at(i)));
    EXPECT_EQ(y.at(i), ref.at(i));
  }
}

TEST(KanBlock, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  for (const auto& c : support::op_grad_cases()) {
    if (c.name != "kan_linear" && c.name != "kan_block") continue;
    for (int trial = 0; trial < 3; ++trial) EXPECT_LT(support::run_grad_case(c, rng).rel_error, 1e-4) << c.name;
  }
}

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "../support/fixtures.hpp"
#include "../support/gradcases.hpp"
#include "../support/oracles.hpp"
#include "kanpaint/autograd.hpp"
#include "kanpaint/errors.hpp"
#include "kanpaint/ops.hpp"
#include "kanpaint/ukan.hpp"

using namespace kanpaint;
using ukan::BlockKind;

namespace {

Tensor square_mask(std::size_t h, std::size_t w, std::size_t x0, std::size_t x1, std::size_t y0,
                   std::size_t y1) {
  Tensor m(Shape{h, w}, 0.0);
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) m.mutable_values()[y * w + x] = 1.0;
  return m;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

}  // namespace

TEST(ArchString, Parsing) {
  EXPECT_EQ(ukan::parse_arch("CCKKK").blocks,
            (std::vector<BlockKind>{BlockKind::Conv, BlockKind::Conv, BlockKind::Kan, BlockKind::Kan,
                                    BlockKind::Kan}));
  EXPECT_EQ(ukan::parse_arch("C").blocks, std::vector<BlockKind>{BlockKind::Conv});
  EXPECT_EQ(ukan::parse_arch("CKCK").str(), "CKCK");
  try {
    ukan::parse_arch("CXK");
    FAIL() << "CXK accepted";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 1u);
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
  }
  EXPECT_THROW(ukan::parse_arch(""), ParseError);
  EXPECT_THROW(ukan::parse_arch("cck"), ParseError);
}

TEST(TumorGeometry, Examples) {
  const auto full = ukan::tumor_geometry(Tensor(Shape{192, 192}, 1.0));
  EXPECT_DOUBLE_EQ(full.area, 1.0);
  EXPECT_DOUBLE_EQ(full.centroid_x, 0.5);
  EXPECT_DOUBLE_EQ(full.centroid_y, 0.5);
  EXPECT_EQ(full.bbox, (std::array<double, 4>{0.0, 0.0, 1.0, 1.0}));

  EXPECT_EQ(ukan::tumor_geometry(Tensor(Shape{192, 192}, 0.0)), ukan::TumorGeometry{});

  const auto left = ukan::tumor_geometry(square_mask(192, 192, 0, 96, 0, 192));
  EXPECT_DOUBLE_EQ(left.area, 0.5);
  EXPECT_NEAR(left.centroid_x, 47.5 / 191.0, 1e-15);
  EXPECT_NEAR(left.centroid_y, 0.5, 1e-15);
  EXPECT_NEAR(left.bbox[2], 95.0 / 191.0, 1e-15);

  // Leading unit axes are accepted; features stay in [0,1].
  const auto box = ukan::tumor_geometry(ops::reshape(square_mask(8, 8, 2, 5, 1, 3), {1, 1, 8, 8}));
  EXPECT_DOUBLE_EQ(box.area, 6.0 / 64.0);
  for (double f : box.features()) {
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
  }
  EXPECT_THROW(ukan::tumor_geometry(Tensor(Shape{2, 8, 8}, 0.0)), DimensionError);
  EXPECT_THROW(ukan::tumor_geometry(Tensor(Shape{4, 4}, 0.5)), DataError);
}

TEST(UkanDenoiser, OutputShape) {
  Rng rng(1);
  ukan::UkanConfig config = support::tiny_model("CCK", 4, 100);
  ukan::UkanDenoiser net(config, rng);
  const Tensor x = Tensor::randn({2, 1, 32, 32}, rng), scan = Tensor::randn({2, 1, 32, 32}, rng);
  const std::vector<int> t{5, 50};
  const Tensor y = net.forward(x, scan, t, {{}, {{}, {}}});
  EXPECT_EQ(y.shape(), (Shape{2, 1, 32, 32}));
  for (double v : y.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(UkanDenoiser, TimestepChangesOutput) {
  Rng rng(2);
  ukan::UkanDenoiser net(support::tiny_model("CK", 4, 100), rng);
  const Tensor x = Tensor::randn({1, 1, 8, 8}, rng), scan = Tensor::randn({1, 1, 8, 8}, rng);
  const ukan::Condition cond{{}, {ukan::TumorGeometry{}}};
  const std::vector<int> t1{3}, t2{70};
  EXPECT_FALSE(same(net.forward(x, scan, t1, cond), net.forward(x, scan, t2, cond)));
}

TEST(UkanDenoiser, DeadTumorPath) {
  Rng rng(3);
  ukan::UkanDenoiser net(support::tiny_model("CK", 4, 100), rng);
  const Tensor x = Tensor::randn({1, 1, 8, 8}, rng), scan = Tensor::randn({1, 1, 8, 8}, rng);
  const std::vector<int> t{9};
  const ukan::Condition a{{}, {ukan::TumorGeometry{0.1, 0.2, 0.3, {0.1, 0.1, 0.4, 0.5}}}};
  const ukan::Condition b{{}, {ukan::TumorGeometry{0.9, 0.8, 0.7, {0.5, 0.6, 1.0, 1.0}}}};
  EXPECT_FALSE(same(net.forward(x, scan, t, a), net.forward(x, scan, t, b)));
  for (auto& w : net.tumor_embed().weight().mutable_values()) w = 0.0;
  EXPECT_TRUE(same(net.forward(x, scan, t, a), net.forward(x, scan, t, b)));
}

TEST(ImageEncoder, Examples) {
  Rng rng(4);
  const auto config = support::tiny_model("CK", 4, 10);
  ukan::ImageEncoder enc(config, rng);
  for (std::size_t hw : {4u, 8u, 12u}) {
    EXPECT_EQ(enc.forward(Tensor::randn({2, 1, hw, hw}, rng)).shape(), (Shape{2, config.embed_dim}));
  }
  const Tensor a = enc.forward(Tensor::randn({1, 1, 8, 8}, rng));
  const Tensor b = enc.forward(Tensor::randn({1, 1, 8, 8}, rng));
  EXPECT_FALSE(same(a, b));
  nn::zero_parameters(enc.projection());
  const Tensor latent = enc.forward(Tensor(Shape{1, 1, 8, 8}, 0.0));
  for (double v : latent.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(enc.forward(Tensor(Shape{1, 2, 8, 8})), DimensionError);
}

TEST(ConditionalUkan, ParameterCountsMatchOracle) {
  for (const char* arch : {"C", "K", "CK", "CCK", "CCKKK", "CCCCC", "CKKKK"}) {
    for (std::size_t base : {4u, 8u}) {
      ukan::UkanConfig config = support::tiny_model(arch, base, 10);
      config.encoder_depth = 2;
      config.kan_depth = base == 8 ? 2 : 1;
      Rng rng(5);
      ukan::ConditionalUkan model(config, rng);
      EXPECT_EQ(nn::count_parameters(model), oracle::count::conditional_ukan(config)) << arch << " " << base;
      EXPECT_EQ(nn::count_parameters(model.encoder()), oracle::count::image_encoder(config));
    }
  }
}

// Swapping stage s from C to K changes the count by exactly the block
// difference at that stage's encoder and decoder widths.
TEST(ConditionalUkan, StageSwapDifference) {
  auto count = [](const char* arch) {
    ukan::UkanConfig c = support::tiny_model(arch, 8, 10);
    ukan::ConditionalUkan model(c, std::uint64_t{1});
    return static_cast<long>(nn::count_parameters(model));
  };
  const long nb = 8;
  auto kan_minus_conv = [&](long in, long out) {
    return static_cast<long>(oracle::count::kan_block(in, out, nb, 1)) -
           static_cast<long>(oracle::count::conv_block(in, out));
  };
  // Stage 1 of a two-stage net: encoder 8->16, decoder 32->16.
  EXPECT_EQ(count("CK") - count("CC"), kan_minus_conv(8, 16) + kan_minus_conv(32, 16));
}

TEST(ConditionalUkan, SeedDeterminism) {
  const auto config = support::tiny_model("CK", 4, 10);
  ukan::ConditionalUkan a(config, 42), b(config, 42), c(config, 43);
  Rng rng(6);
  const Tensor x = Tensor::randn({1, 1, 8, 8}, rng), scan = Tensor::uniform({1, 1, 8, 8}, rng, 0, 1);
  const std::vector<int> t{4};
  const std::vector<ukan::TumorGeometry> g{{}};
  NoGradGuard guard;
  EXPECT_EQ(support::checksum(a.predict(x, scan, t, g)), support::checksum(b.predict(x, scan, t, g)));
  EXPECT_NE(support::checksum(a.predict(x, scan, t, g)), support::checksum(c.predict(x, scan, t, g)));
}

TEST(ConditionalUkan, ContractErrors) {
  auto config = support::tiny_model("CK", 4, 10);
  ukan::ConditionalUkan model(config, 1);
  const std::vector<ukan::TumorGeometry> g{{}};
  const std::vector<int> ok{1}, zero{0}, high{11};
  const Tensor x(Shape{1, 1, 8, 8}), scan(Shape{1, 1, 8, 8});
  EXPECT_THROW(model.predict(x, scan, zero, g), ContractError);
  EXPECT_THROW(model.predict(x, scan, high, g), ContractError);
  EXPECT_THROW(model.predict(Tensor(Shape{1, 1, 6, 6}), Tensor(Shape{1, 1, 6, 6}), ok, g), ConfigError);
  EXPECT_THROW(model.predict(x, Tensor(Shape{1, 1, 8, 4}), ok, g), DimensionError);
  EXPECT_THROW(model.predict(x, scan, std::vector<int>{1, 2}, g), DimensionError);

  config.heads = 3;
  EXPECT_THROW(config.validate(), ConfigError);
  config.heads = 1;
  config.base_channels = 0;
  EXPECT_THROW(config.validate(), ConfigError);
}

TEST(ConditionalUkan, EndToEndGradcheck) {
  Rng rng(7);
  const auto r = support::run_end_to_end_gradcheck(rng, 300);
  EXPECT_LT(r.rel_error, 1e-3);
  EXPECT_EQ(r.coordinates, 300u);
}

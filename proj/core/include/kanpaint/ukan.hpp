// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kanpaint/kan.hpp"
#include "kanpaint/nn.hpp"
#include "kanpaint/tensor.hpp"

namespace kanpaint::ukan {

enum class BlockKind { Conv, Kan };

/// Encoder stage composition, one letter per stage: C (convolution block) or
/// K (KAN block). The decoder mirrors it.
struct ArchString {
  std::vector<BlockKind> blocks;

  std::size_t size() const { return blocks.size(); }
  std::string str() const;
  bool operator==(const ArchString&) const = default;
};

/// Throws ParseError naming the first offending position.
ArchString parse_arch(std::string_view text);

/// Geometry summary of a binary region mask, every field in [0,1].
struct TumorGeometry {
  double area = 0.0;  // fraction of pixels inside the mask
  double centroid_x = 0.0, centroid_y = 0.0;
  std::array<double, 4> bbox{};  // x_min, y_min, x_max, y_max

  static constexpr std::size_t kFeatures = 7;
  std::array<double, kFeatures> features() const;
  bool operator==(const TumorGeometry&) const = default;
};

/// Summarizes a binary mask given as [H,W] (or with leading unit axes).
/// An empty mask yields the all-zero geometry.
TumorGeometry tumor_geometry(const Tensor& mask);

struct Condition {
  Tensor image_latent;               // [N, D]; undefined means zeros
  std::vector<TumorGeometry> tumor;  // one per sample
};

/// [N] timesteps -> [N, dim] sinusoidal features.
Tensor timestep_embedding(std::span<const int> t, std::size_t dim);

struct UkanConfig {
  ArchString arch = parse_arch("CCKKK");
  std::size_t base_channels = 16;
  std::size_t embed_dim = 128;
  std::size_t heads = 1;
  std::size_t kan_depth = 1;
  double spline_min = -1.0, spline_max = 1.0;
  int spline_intervals = 5;
  int spline_order = 3;
  std::size_t encoder_depth = 2;
  int max_timestep = 1000;

  kan::SplineGrid grid() const {
    return kan::SplineGrid(spline_min, spline_max, spline_intervals, spline_order);
  }
  std::size_t stage_channels(std::size_t stage) const { return base_channels << stage; }
  /// Throws ConfigError for invalid combinations.
  void validate() const;
};

/// Two conv3x3 + batch-norm + ReLU layers.
class ConvBlock : public nn::Module {
 public:
  ConvBlock(std::size_t in_channels, std::size_t out_channels, Rng& rng);
  Tensor forward(const Tensor& x);
  void visit(const std::string& prefix, nn::ModuleVisitor& visitor) override;

 private:
  nn::Conv2d conv1_;
  nn::BatchNorm2d norm1_;
  nn::Conv2d conv2_;
  nn::BatchNorm2d norm2_;
};

/// A C or K stage: its block plus the projection that injects the
/// conditioning embedding into the block output.
class Stage : public nn::Module {
 public:
  Stage(BlockKind kind, std::size_t in_channels, std::size_t out_channels, const UkanConfig& config,
        Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& embedding);
  void visit(const std::string& prefix, nn::ModuleVisitor& visitor) override;

  BlockKind kind() const { return kind_; }

 private:
  BlockKind kind_;
  std::unique_ptr<ConvBlock> conv_;
  std::unique_ptr<kan::KanBlock> kan_;
  nn::Linear embed_proj_;
};

class ResidualBlock : public nn::Module {
 public:
  ResidualBlock(std::size_t in_channels, std::size_t out_channels, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void visit(const std::string& prefix, nn::ModuleVisitor& visitor) override;

 private:
  nn::Conv2d conv1_;
  nn::LayerNorm norm1_;
  nn::Conv2d conv2_;
  nn::LayerNorm norm2_;
  std::unique_ptr<nn::Conv2d> shortcut_;
};

/// Residual-block encoder of the masked scan: [N,1,H,W] -> [N, embed_dim].
class ImageEncoder : public nn::Module {
 public:
  ImageEncoder(const UkanConfig& config, Rng& rng);
  Tensor forward(const Tensor& image) const;
  void visit(const std::string& prefix, nn::ModuleVisitor& visitor) override;

  nn::Linear& projection() { return projection_; }
  std::size_t latent_dim() const { return projection_.out_features(); }

 private:
  std::size_t depth_;
  nn::Conv2d stem_;
  std::vector<ResidualBlock> blocks_;
  nn::Linear projection_;
};

/// The U-shaped denoiser. Input is the noisy image concatenated with the
/// masked scan; output is the one-channel regression prediction.
class UkanDenoiser : public nn::Module {
 public:
  UkanDenoiser(const UkanConfig& config, Rng& rng);

  Tensor forward(const Tensor& x_t, const Tensor& masked_scan, std::span<const int> t,
                 const Condition& cond);
  /// The summed conditioning embedding [N, D] before the SiLU.
  Tensor embedding(std::span<const int> t, const Condition& cond, std::size_t batch) const;
  void visit(const std::string& prefix, nn::ModuleVisitor& visitor) override;

  const UkanConfig& config() const { return config_; }
  nn::Linear& tumor_embed() { return tumor_embed_; }
  nn::Linear& latent_proj() { return latent_proj_; }

 private:
  UkanConfig config_;
  nn::Linear time_fc1_, time_fc2_;
  nn::Linear tumor_embed_;
  nn::Linear latent_proj_;
  std::vector<Stage> encoder_;
  std::vector<Stage> decoder_;  // decoder_[i] mirrors encoder_[i]
  nn::Conv2d head_;
};

/// Image encoder and denoiser trained jointly; the object sampled from.
class ConditionalUkan : public nn::Module {
 public:
  ConditionalUkan(const UkanConfig& config, Rng& rng);
  explicit ConditionalUkan(const UkanConfig& config, std::uint64_t seed = 0);

  /// Encodes the masked scan and runs the denoiser.
  Tensor predict(const Tensor& x_t, const Tensor& masked_scan, std::span<const int> t,
                 std::span<const TumorGeometry> tumor);
  void visit(const std::string& prefix, nn::ModuleVisitor& visitor) override;

  const UkanConfig& config() const { return denoiser_.config(); }
  ImageEncoder& encoder() { return encoder_; }
  UkanDenoiser& denoiser() { return denoiser_; }

 private:
  ImageEncoder encoder_;
  UkanDenoiser denoiser_;

  ConditionalUkan(const UkanConfig& config, Rng&& rng) : ConditionalUkan(config, rng) {}
};

}  // namespace kanpaint::ukan

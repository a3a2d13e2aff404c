// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/ukan.hpp"

#include <algorithm>
#include <cmath>

#include "kanpaint/errors.hpp"
#include "kanpaint/ops.hpp"

namespace kanpaint::ukan {

std::string ArchString::str() const {
  std::string s;
  for (auto b : blocks) s.push_back(b == BlockKind::Conv ? 'C' : 'K');
  return s;
}

ArchString parse_arch(std::string_view text) {
  if (text.empty()) throw ParseError("architecture string is empty", 0);
  ArchString arch;
  for (std::size_t i = 0; i < text.size(); ++i) {
    switch (text[i]) {
      case 'C':
        arch.blocks.push_back(BlockKind::Conv);
        break;
      case 'K':
        arch.blocks.push_back(BlockKind::Kan);
        break;
      default:
        throw ParseError("architecture string \"" + std::string(text) + "\": invalid character '" +
                             text[i] + "' at index " + std::to_string(i) + " (expected C or K)",
                         i);
    }
  }
  return arch;
}

std::array<double, TumorGeometry::kFeatures> TumorGeometry::features() const {
  return {area, centroid_x, centroid_y, bbox[0], bbox[1], bbox[2], bbox[3]};
}

TumorGeometry tumor_geometry(const Tensor& mask) {
  if (mask.rank() < 2) throw DimensionError("tumor_geometry: mask needs at least two axes");
  const std::size_t h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1);
  if (mask.numel() != h * w) {
    throw DimensionError("tumor_geometry: expected a single [H,W] mask, got " +
                         shape_str(mask.shape()));
  }
  auto m = mask.values();
  double count = 0.0, sx = 0.0, sy = 0.0;
  std::size_t x0 = w, y0 = h, x1 = 0, y1 = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double v = m[y * w + x];
      if (v != 0.0 && v != 1.0) {
        throw DataError("tumor_geometry: mask value " + std::to_string(v) + " at (" +
                        std::to_string(y) + "," + std::to_string(x) + ") is not binary");
      }
      if (v == 0.0) continue;
      count += 1.0;
      sx += static_cast<double>(x);
      sy += static_cast<double>(y);
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  TumorGeometry g;
  if (count == 0.0) return g;
  const double nx = w > 1 ? static_cast<double>(w - 1) : 1.0;
  const double ny = h > 1 ? static_cast<double>(h - 1) : 1.0;
  g.area = count / static_cast<double>(h * w);
  g.centroid_x = sx / count / nx;
  g.centroid_y = sy / count / ny;
  g.bbox = {static_cast<double>(x0) / nx, static_cast<double>(y0) / ny,
            static_cast<double>(x1) / nx, static_cast<double>(y1) / ny};
  return g;
}

Tensor timestep_embedding(std::span<const int> t, std::size_t dim) {
  Tensor out(Shape{t.size(), dim});
  auto o = out.mutable_values();
  const std::size_t half = dim / 2;
  for (std::size_t n = 0; n < t.size(); ++n)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[n]) * freq;
      o[n * dim + i] = std::sin(arg);
      o[n * dim + half + i] = std::cos(arg);
    }
  return out;
}

void UkanConfig::validate() const {
  if (arch.blocks.empty()) throw ConfigError("architecture must have at least one stage");
  if (base_channels == 0) throw ConfigError("base_channels must be positive");
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  if (kan_depth == 0) throw ConfigError("kan_depth must be at least 1");
  if (max_timestep < 1) throw ConfigError("max_timestep must be at least 1");
  for (std::size_t s = 0; s < arch.size(); ++s) {
    if (heads == 0 || stage_channels(s) % heads != 0) {
      throw ConfigError("stage " + std::to_string(s) + " width " +
                        std::to_string(stage_channels(s)) + " is not divisible by " +
                        std::to_string(heads) + " attention heads");
    }
  }
  grid();  // validates the spline parameters
}

ConvBlock::ConvBlock(std::size_t in_channels, std::size_t out_channels, Rng& rng)
    : conv1_(in_channels, out_channels, 3, rng, 1, 1),
      norm1_(out_channels),
      conv2_(out_channels, out_channels, 3, rng, 1, 1),
      norm2_(out_channels) {}

Tensor ConvBlock::forward(const Tensor& x) {
  Tensor h = ops::relu(norm1_.forward(conv1_.forward(x)));
  return ops::relu(norm2_.forward(conv2_.forward(h)));
}

void ConvBlock::visit(const std::string& prefix, nn::ModuleVisitor& visitor) {
  visitor.module(*this);
  conv1_.visit(prefix + "conv1.", visitor);
  norm1_.visit(prefix + "norm1.", visitor);
  conv2_.visit(prefix + "conv2.", visitor);
  norm2_.visit(prefix + "norm2.", visitor);
}

Stage::Stage(BlockKind kind, std::size_t in_channels, std::size_t out_channels,
             const UkanConfig& config, Rng& rng)
    : kind_(kind),
      conv_(kind == BlockKind::Conv ? std::make_unique<ConvBlock>(in_channels, out_channels, rng)
                                    : nullptr),
      kan_(kind == BlockKind::Kan
               ? std::make_unique<kan::KanBlock>(in_channels, out_channels, config.grid(), rng,
                                                 config.kan_depth, config.heads)
               : nullptr),
      embed_proj_(config.embed_dim, out_channels, rng) {}

Tensor Stage::forward(const Tensor& x, const Tensor& embedding) {
  Tensor h = kind_ == BlockKind::Conv ? conv_->forward(x) : kan_->forward(x);
  return ops::add_channelwise(h, embed_proj_.forward(embedding));
}

void Stage::visit(const std::string& prefix, nn::ModuleVisitor& visitor) {
  visitor.module(*this);
  if (conv_) conv_->visit(prefix + "conv_block.", visitor);
  if (kan_) kan_->visit(prefix + "kan_block.", visitor);
  embed_proj_.visit(prefix + "embed_proj.", visitor);
}

ResidualBlock::ResidualBlock(std::size_t in_channels, std::size_t out_channels, Rng& rng)
    : conv1_(in_channels, out_channels, 3, rng, 1, 1),
      norm1_(out_channels),
      conv2_(out_channels, out_channels, 3, rng, 1, 1),
      norm2_(out_channels),
      shortcut_(in_channels == out_channels
                    ? nullptr
                    : std::make_unique<nn::Conv2d>(in_channels, out_channels, 1, rng)) {}

Tensor ResidualBlock::forward(const Tensor& x) const {
  Tensor h = ops::relu(norm1_.forward(conv1_.forward(x)));
  h = norm2_.forward(conv2_.forward(h));
  return ops::relu(ops::add(h, shortcut_ ? shortcut_->forward(x) : x));
}

void ResidualBlock::visit(const std::string& prefix, nn::ModuleVisitor& visitor) {
  visitor.module(*this);
  conv1_.visit(prefix + "conv1.", visitor);
  norm1_.visit(prefix + "norm1.", visitor);
  conv2_.visit(prefix + "conv2.", visitor);
  norm2_.visit(prefix + "norm2.", visitor);
  if (shortcut_) shortcut_->visit(prefix + "shortcut.", visitor);
}

ImageEncoder::ImageEncoder(const UkanConfig& config, Rng& rng)
    : depth_(config.encoder_depth),
      stem_(1, config.base_channels, 3, rng, 1, 1),
      projection_(config.base_channels << (config.encoder_depth > 0 ? config.encoder_depth - 1 : 0),
                  config.embed_dim, rng) {
  std::size_t channels = config.base_channels;
  blocks_.reserve(depth_);
  for (std::size_t j = 0; j < depth_; ++j) {
    const std::size_t out = config.base_channels << j;
    blocks_.emplace_back(channels, out, rng);
    channels = out;
  }
}

Tensor ImageEncoder::forward(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != 1) {
    throw DimensionError("image encoder expects [N,1,H,W], got " + shape_str(image.shape()));
  }
  const std::size_t factor = std::size_t{1} << depth_;
  if (image.dim(2) % factor != 0 || image.dim(3) % factor != 0) {
    throw DimensionError("image encoder: spatial axes (2,3) of " + shape_str(image.shape()) +
                         " must be divisible by " + std::to_string(factor));
  }
  Tensor h = stem_.forward(image);
  for (const auto& block : blocks_) h = ops::max_pool2d(block.forward(h));
  return projection_.forward(ops::global_avg_pool(h));
}

void ImageEncoder::visit(const std::string& prefix, nn::ModuleVisitor& visitor) {
  visitor.module(*this);
  stem_.visit(prefix + "stem.", visitor);
  for (std::size_t j = 0; j < blocks_.size(); ++j) {
    blocks_[j].visit(prefix + "res" + std::to_string(j) + ".", visitor);
  }
  projection_.visit(prefix + "projection.", visitor);
}

UkanDenoiser::UkanDenoiser(const UkanConfig& config, Rng& rng)
    : config_((config.validate(), config)),
      time_fc1_(config.embed_dim, config.embed_dim, rng),
      time_fc2_(config.embed_dim, config.embed_dim, rng),
      tumor_embed_(TumorGeometry::kFeatures, config.embed_dim, rng),
      latent_proj_(config.embed_dim, config.embed_dim, rng),
      head_(config.base_channels, 1, 1, rng) {
  const std::size_t stages = config.arch.size();
  std::size_t in = 2;
  encoder_.reserve(stages);
  for (std::size_t s = 0; s < stages; ++s) {
    encoder_.emplace_back(config.arch.blocks[s], in, config.stage_channels(s), config, rng);
    in = config.stage_channels(s);
  }
  // Built deepest-first so parameter initialization follows execution order.
  std::vector<Stage> reversed;
  reversed.reserve(stages);
  for (std::size_t s = stages; s-- > 0;) {
    const std::size_t below = s + 1 == stages ? config.stage_channels(s) : config.stage_channels(s + 1);
    reversed.emplace_back(config.arch.blocks[s], below + config.stage_channels(s),
                          config.stage_channels(s), config, rng);
  }
  for (auto it = reversed.rbegin(); it != reversed.rend(); ++it) decoder_.push_back(std::move(*it));
}

Tensor UkanDenoiser::embedding(std::span<const int> t, const Condition& cond,
                               std::size_t batch) const {
  if (t.size() != batch) {
    throw DimensionError("denoiser: " + std::to_string(t.size()) + " timesteps for batch " +
                         std::to_string(batch));
  }
  for (int step : t) {
    if (step < 1 || step > config_.max_timestep) {
      throw ContractError("denoiser: timestep " + std::to_string(step) + " outside [1, " +
                          std::to_string(config_.max_timestep) + "]");
    }
  }
  Tensor e = time_fc2_.forward(ops::silu(time_fc1_.forward(timestep_embedding(t, config_.embed_dim))));

  Tensor geometry(Shape{batch, TumorGeometry::kFeatures});
  if (!cond.tumor.empty()) {
    if (cond.tumor.size() != batch) {
      throw DimensionError("denoiser: " + std::to_string(cond.tumor.size()) +
                           " tumor geometries for batch " + std::to_string(batch));
    }
    auto g = geometry.mutable_values();
    for (std::size_t n = 0; n < batch; ++n) {
      auto f = cond.tumor[n].features();
      std::copy(f.begin(), f.end(), g.begin() + n * TumorGeometry::kFeatures);
    }
  }
  e = ops::add(e, tumor_embed_.forward(geometry));

  if (cond.image_latent.defined()) {
    if (cond.image_latent.shape() != Shape{batch, config_.embed_dim}) {
      throw DimensionError("denoiser: image latent " + shape_str(cond.image_latent.shape()) +
                           " should be [" + std::to_string(batch) + "," +
                           std::to_string(config_.embed_dim) + "]");
    }
    e = ops::add(e, latent_proj_.forward(cond.image_latent));
  }
  return e;
}

Tensor UkanDenoiser::forward(const Tensor& x_t, const Tensor& masked_scan, std::span<const int> t,
                             const Condition& cond) {
  if (x_t.rank() != 4 || x_t.dim(1) != 1) {
    throw DimensionError("denoiser expects x_t as [N,1,H,W], got " + shape_str(x_t.shape()));
  }
  if (masked_scan.shape() != x_t.shape()) {
    throw DimensionError("denoiser: masked scan " + shape_str(masked_scan.shape()) +
                         " does not match x_t " + shape_str(x_t.shape()));
  }
  const std::size_t factor = std::size_t{1} << encoder_.size();
  if (x_t.dim(2) % factor != 0 || x_t.dim(3) % factor != 0) {
    throw ConfigError("denoiser: image size " + std::to_string(x_t.dim(2)) + "x" +
                      std::to_string(x_t.dim(3)) + " is not divisible by 2^" +
                      std::to_string(encoder_.size()));
  }
  const std::size_t batch = x_t.dim(0);
  Tensor s = ops::silu(embedding(t, cond, batch));

  Tensor h = ops::concat_channels(x_t, masked_scan);
  std::vector<Tensor> skips;
  skips.reserve(encoder_.size());
  for (auto& stage : encoder_) {
    skips.push_back(stage.forward(h, s));
    h = ops::max_pool2d(skips.back());
  }
  for (std::size_t i = decoder_.size(); i-- > 0;) {
    h = ops::concat_channels(ops::upsample_nearest2x(h), skips[i]);
    h = decoder_[i].forward(h, s);
  }
  return head_.forward(h);
}

void UkanDenoiser::visit(const std::string& prefix, nn::ModuleVisitor& visitor) {
  visitor.module(*this);
  time_fc1_.visit(prefix + "time_fc1.", visitor);
  time_fc2_.visit(prefix + "time_fc2.", visitor);
  tumor_embed_.visit(prefix + "tumor_embed.", visitor);
  latent_proj_.visit(prefix + "latent_proj.", visitor);
  for (std::size_t s = 0; s < encoder_.size(); ++s) {
    encoder_[s].visit(prefix + "enc" + std::to_string(s) + ".", visitor);
  }
  for (std::size_t s = 0; s < decoder_.size(); ++s) {
    decoder_[s].visit(prefix + "dec" + std::to_string(s) + ".", visitor);
  }
  head_.visit(prefix + "head.", visitor);
}

ConditionalUkan::ConditionalUkan(const UkanConfig& config, Rng& rng)
    : encoder_((config.validate(), config), rng), denoiser_(config, rng) {}

ConditionalUkan::ConditionalUkan(const UkanConfig& config, std::uint64_t seed)
    : ConditionalUkan(config, Rng(seed)) {}

Tensor ConditionalUkan::predict(const Tensor& x_t, const Tensor& masked_scan,
                                std::span<const int> t, std::span<const TumorGeometry> tumor) {
  Condition cond;
  cond.image_latent = encoder_.forward(masked_scan);
  cond.tumor.assign(tumor.begin(), tumor.end());
  return denoiser_.forward(x_t, masked_scan, t, cond);
}

void ConditionalUkan::visit(const std::string& prefix, nn::ModuleVisitor& visitor) {
  visitor.module(*this);
  encoder_.visit(prefix + "encoder.", visitor);
  denoiser_.visit(prefix + "denoiser.", visitor);
}

}  // namespace kanpaint::ukan

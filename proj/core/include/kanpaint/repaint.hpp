// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "kanpaint/diffusion.hpp"
#include "kanpaint/tensor.hpp"
#include "kanpaint/ukan.hpp"

namespace kanpaint::repaint {

struct InpaintTask {
  Tensor image;  // [1,1,H,W], intensities in [0,1]
  Tensor mask;   // [1,1,H,W], 1 marks pixels to generate
  int resample_jumps = 1;
};

struct InpaintOptions {
  /// Replace known pixels with the clean image at every step instead of
  /// the image noised to the current level.
  bool noise_free_replacement = false;
};

/// Noise prediction with the masked scan and tumor geometry passed explicitly.
using ConditionalPredictor =
    std::function<Tensor(const Tensor& x_t, std::span<const int> t, const Tensor& masked_scan,
                         std::span<const ukan::TumorGeometry> tumor)>;

/// Wraps a model's predict() for sampling (no gradient recording).
ConditionalPredictor model_predictor(ukan::ConditionalUkan& model);

/// Throws ConfigError if shapes, mask values or intensities are invalid.
void validate(const InpaintTask& task);

/// The conditioning channel (1 - mask) * image.
Tensor masked_scan(const InpaintTask& task);

/// Plain conditional ancestral sampling from pure noise, clamped to [0,1].
Tensor generate(const ConditionalPredictor& net, const diffusion::Schedule& schedule,
                const InpaintTask& task, std::uint64_t seed);

/// Masked sampling: known pixels are overwritten at every reverse step so
/// only the masked region is generated.
Tensor inpaint(const ConditionalPredictor& net, const diffusion::Schedule& schedule,
               const InpaintTask& task, std::uint64_t seed, const InpaintOptions& options = {});

/// Baseline: generate a whole image, then paste the known pixels back.
Tensor generate_then_paste(const ConditionalPredictor& net, const diffusion::Schedule& schedule,
                           const InpaintTask& task, std::uint64_t seed);

/// Mean absolute intensity step across 4-neighbour pixel pairs that straddle
/// the mask boundary. Uses the last two axes of both tensors.
double boundary_smoothness(const Tensor& image, const Tensor& mask);

}  // namespace kanpaint::repaint

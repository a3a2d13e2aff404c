// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include "kanpaint/config.hpp"
#include "kanpaint/data.hpp"
#include "kanpaint/diffusion.hpp"
#include "kanpaint/ukan.hpp"

namespace kanpaint::training {

struct TrainResult {
  std::vector<double> losses;  // one per optimizer step
  std::size_t epoch_steps = 0;
  double first_epoch_mean = 0.0;
  /// Mean over the last max(epoch_steps, steps / 10) steps.
  double final_mean = 0.0;
  double seconds = 0.0;
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

/// Trains `model` on the records with the diffusion loss, Adam and an EMA of
/// the weights, then writes the EMA weights (and the model's buffers) into
/// `ema_model`, which is left in evaluation mode. Each batch uses the healthy
/// mask as the inpainting region. Fully determined by `seed`.
TrainResult train(ukan::ConditionalUkan& model, ukan::ConditionalUkan& ema_model,
                  const std::vector<data::SliceRecord>& records,
                  const diffusion::Schedule& schedule, const TrainConfig& options,
                  std::uint64_t seed, const ProgressFn& progress = {});

double first_epoch_mean(const std::vector<double>& losses, std::size_t epoch_steps);
double final_mean(const std::vector<double>& losses, std::size_t epoch_steps);

/// Writes config.txt, manifest.txt and weights.dkt (float32) into `dir`.
void save_checkpoint(const std::filesystem::path& dir, ukan::ConditionalUkan& model,
                     const RunConfig& config);

/// Loads a checkpoint whose model and schedule settings must match
/// `expected` (IncompatibilityError otherwise). A missing checkpoint is a
/// DataError. The model is returned in evaluation mode.
std::unique_ptr<ukan::ConditionalUkan> load_checkpoint(const std::filesystem::path& dir,
                                                       const RunConfig& expected);

}  // namespace kanpaint::training

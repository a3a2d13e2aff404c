// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "kanpaint/data.hpp"
#include "kanpaint/diffusion.hpp"
#include "kanpaint/ukan.hpp"

namespace kanpaint {

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  /// Multiply both betas by 1000/steps so short chains still end near pure
  /// noise. A 1000-step schedule is unaffected.
  bool scale_betas = true;

  diffusion::Schedule build() const {
    const double k = scale_betas ? 1000.0 / static_cast<double>(steps) : 1.0;
    return diffusion::Schedule::linear(steps, k * beta_start, k * beta_end);
  }
  bool operator==(const ScheduleConfig&) const = default;
};

struct TrainConfig {
  diffusion::TargetMode target = diffusion::TargetMode::Epsilon;
  diffusion::LossNorm norm = diffusion::LossNorm::Squared;
  double lr = 1e-4;
  std::size_t batch = 2;
  std::size_t steps = 500;
  double ema_rate = 0.995;
  /// Probability of zeroing a sample's tumor geometry during training.
  double condition_dropout = 0.0;
  std::size_t log_every = 50;
};

struct DataConfig {
  std::filesystem::path dir = "data";
  /// When set, gen-data slices the volumes found here instead of
  /// generating phantoms.
  std::filesystem::path volumes;
  std::size_t crop = 192;
  data::PhantomSetSpec phantoms;
};

struct InpaintConfig {
  std::filesystem::path tasks;       // default: <data.dir>/tasks
  std::filesystem::path checkpoint;  // default: <out>/checkpoint
  int resample_jumps = 1;
  bool noise_free_replacement = false;
  std::size_t limit = 0;  // 0 = every task
};

/// Everything a command needs; every field has a default.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/default";
  ukan::UkanConfig model;
  ScheduleConfig schedule;
  TrainConfig train;
  DataConfig data;
  InpaintConfig inpaint;
  std::vector<std::string> ablate_archs = {"CCCCK", "CCCKK", "CCKKK", "CKKKK"};

  std::filesystem::path tasks_dir() const;
  std::filesystem::path checkpoint_dir() const;
  /// Throws ConfigError for inconsistent values.
  void validate() const;
};

/// Parses "key.path = value" lines; '#' starts a comment. Unknown keys and
/// malformed values throw ParseError carrying the 1-based line number.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/// Serializes every key; parse_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& config);

/// Keys that must agree between a checkpoint and the config that loads it.
std::string model_signature(const RunConfig& config);

}  // namespace kanpaint

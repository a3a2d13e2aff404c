// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the unit and acceptance tests.
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "kanpaint/config.hpp"
#include "kanpaint/data.hpp"
#include "kanpaint/diffusion.hpp"
#include "kanpaint/repaint.hpp"
#include "kanpaint/tensor.hpp"
#include "kanpaint/ukan.hpp"

namespace kanpaint::support {

/// A fresh, empty directory under the system temp directory.
std::filesystem::path fresh_dir(const std::string& name);

/// FNV-1a over the bit patterns of the tensor's shape and values.
std::uint64_t checksum(const Tensor& t);

ukan::UkanConfig tiny_model(const std::string& arch = "CK", std::size_t base = 4, int steps = 10);

/// A network that ignores its inputs and predicts `value` everywhere.
repaint::ConditionalPredictor constant_predictor(double value);

/// Small end-to-end run configuration rooted at `root`.
RunConfig small_run(const std::filesystem::path& root, const std::string& arch = "CK",
                    std::size_t size = 16, std::size_t subjects = 4, std::size_t steps = 4);

/// A tiny model briefly trained on 16x16 phantoms, built once per process.
struct ToyModel {
  ukan::UkanConfig config;
  diffusion::Schedule schedule;
  std::vector<data::SliceRecord> records;
  std::unique_ptr<ukan::ConditionalUkan> model;
};
ToyModel& toy_trained_model();

/// The inpainting task for a record: its image with the healthy mask.
repaint::InpaintTask task_for(const data::SliceRecord& record);

}  // namespace kanpaint::support

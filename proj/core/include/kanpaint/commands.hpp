// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <exception>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "kanpaint/config.hpp"
#include "kanpaint/metrics.hpp"
#include "kanpaint/training.hpp"

namespace kanpaint::commands {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kIncompatible = 4,
};

/// Runs `body`, reporting any exception on `err`, and maps it to an exit code.
int guarded(const std::function<void()>& body, std::ostream& err);
int exit_code_for(const std::exception& e);

struct GenDataSummary {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t tasks = 0;
};

/// Writes the dataset to data.dir and one inpainting task per evaluation
/// slice to <data.dir>/tasks/<id>/{image,mask}.dkt. Evaluation slices are the
/// validation split, or the training split when it is empty.
GenDataSummary cmd_gen_data(const RunConfig& config, std::ostream& log);

struct TrainSummary {
  training::TrainResult result;
  std::size_t parameters = 0;
  std::filesystem::path checkpoint;
};

/// Trains on the training split of data.dir and writes the EMA checkpoint,
/// loss.csv, config.txt and run_manifest.json under `out`.
TrainSummary cmd_train(const RunConfig& config, std::ostream& log);

struct InpaintSummary {
  std::vector<std::string> ids;
  std::filesystem::path out_dir;
  double seconds = 0.0;
};

/// Inpaints every task in the tasks directory with the checkpoint, writing
/// <id>.dkt, <id>.png and <id>.json to `out_dir` (default <out>/inpaint).
/// Task i is sampled with seed `config.seed + i`.
InpaintSummary cmd_inpaint(const RunConfig& config, std::ostream& log,
                           std::filesystem::path out_dir = {});

/// Scores predictions <pred>/<id>.dkt against <ref>/<id>.dkt or
/// <ref>/<id>/image.dkt; a <ref>/<id>/mask.dkt restricts PSNR, MSE and MAE to
/// the mask. Writes eval.csv and summary.txt into `out_dir`. Ids present on
/// only one side abort with a DataError listing them; a non-empty `only_ids`
/// restricts the reference side to those ids.
metrics::EvalReport cmd_evaluate(const std::filesystem::path& pred_dir,
                                 const std::filesystem::path& ref_dir,
                                 const std::filesystem::path& out_dir, const std::string& method,
                                 bool paper_reference, std::ostream& log,
                                 const std::vector<std::string>& only_ids = {});

struct AblationRow {
  std::string arch;
  std::size_t parameters = 0;
  double train_seconds = 0.0;
  double inpaint_seconds = 0.0;
  double first_epoch_loss = 0.0;
  double final_loss = 0.0;
  metrics::ImageScores scores;  // mean over the tasks
};

/// For every architecture in ablate.archs: train, inpaint and evaluate under
/// <out>/ablate/<arch>, then write ablation.csv and ablation.txt under `out`.
std::vector<AblationRow> cmd_ablate(const RunConfig& config, std::ostream& log);

/// The configuration cmd_ablate uses for one architecture.
RunConfig ablation_config(const RunConfig& config, const std::string& arch);

}  // namespace kanpaint::commands

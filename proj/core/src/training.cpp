// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "kanpaint/autograd.hpp"
#include "kanpaint/errors.hpp"
#include "kanpaint/io.hpp"

namespace kanpaint::training {

namespace {

constexpr std::uint64_t kTrainStreamSalt = 0xD1B54A32D192ED03ULL;

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  if (begin >= end) return 0.0;
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(begin),
                         v.begin() + static_cast<std::ptrdiff_t>(end), 0.0) /
         static_cast<double>(end - begin);
}

}  // namespace

double first_epoch_mean(const std::vector<double>& losses, std::size_t epoch_steps) {
  return mean_of(losses, 0, std::min(epoch_steps, losses.size()));
}

double final_mean(const std::vector<double>& losses, std::size_t epoch_steps) {
  const std::size_t window = std::min(losses.size(), std::max(epoch_steps, losses.size() / 10));
  return mean_of(losses, losses.size() - window, losses.size());
}

TrainResult train(ukan::ConditionalUkan& model, ukan::ConditionalUkan& ema_model,
                  const std::vector<data::SliceRecord>& records,
                  const diffusion::Schedule& schedule, const TrainConfig& options,
                  std::uint64_t seed, const ProgressFn& progress) {
  if (records.empty()) throw DataError("training set is empty");
  if (options.batch == 0) throw ConfigError("batch size must be positive");
  const std::size_t stages = model.config().arch.size();
  for (const auto& r : records) {
    data::validate(r);
    const std::size_t h = r.image.dim(1), w = r.image.dim(2);
    if (h % (std::size_t{1} << stages) || w % (std::size_t{1} << stages)) {
      throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) +
                        " is not divisible by 2^" + std::to_string(stages));
    }
  }

  const auto start = std::chrono::steady_clock::now();
  Rng rng(seed ^ kTrainStreamSalt);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  model.set_training(true);
  diffusion::Adam adam(model.parameters(), {.lr = options.lr});
  diffusion::EmaState ema(model, options.ema_rate);
  const diffusion::LossOptions loss_options{options.target, options.norm};

  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_index = [&] {
    if (cursor == order.size()) {
      order.resize(records.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return order[cursor++];
  };

  TrainResult result;
  result.epoch_steps = (records.size() + options.batch - 1) / options.batch;
  result.losses.reserve(options.steps);
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<const data::SliceRecord*> batch;
    std::vector<ukan::TumorGeometry> tumor;
    for (std::size_t b = 0; b < options.batch; ++b) {
      const auto* r = &records[next_index()];
      batch.push_back(r);
      const bool drop = options.condition_dropout > 0.0 && coin(rng) < options.condition_dropout;
      tumor.push_back(drop ? ukan::TumorGeometry{} : ukan::tumor_geometry(r->healthy_mask));
    }
    const Tensor x0 = data::stack_images(batch);
    const Tensor scan = data::stack_masked_scans(batch);
    const diffusion::NoisePredictor net = [&](const Tensor& x_t, std::span<const int> t) {
      return model.predict(x_t, scan, t, tumor);
    };
    Tensor loss = diffusion::diffusion_loss(net, schedule, x0, rng, loss_options);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      Tape::current().clear();
      throw ContractError("training diverged at step " + std::to_string(step + 1));
    }
    backward(loss);
    adam.step();
    ema.update(model);
    result.losses.push_back(value);
    if (progress) progress(step + 1, value);
  }

  ema.apply(model, ema_model);
  ema_model.set_training(false);
  result.first_epoch_mean = first_epoch_mean(result.losses, result.epoch_steps);
  result.final_mean = final_mean(result.losses, result.epoch_steps);
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void save_checkpoint(const std::filesystem::path& dir, ukan::ConditionalUkan& model,
                     const RunConfig& config) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream cfg(dir / "config.txt");
    cfg << to_text(config);
    if (!cfg) throw DataError("cannot write " + (dir / "config.txt").string());
  }
  std::vector<io::NamedTensor> state;
  for (auto& s : model.state()) state.push_back({s.name, io::quantize_f32(s.tensor)});
  io::save_tensor_bundle(dir / "weights.dkt", dir / "manifest.txt", state);
}

std::unique_ptr<ukan::ConditionalUkan> load_checkpoint(const std::filesystem::path& dir,
                                                       const RunConfig& expected) {
  if (!std::filesystem::is_directory(dir) || !std::filesystem::exists(dir / "config.txt")) {
    throw DataError("checkpoint not found: " + dir.string());
  }
  const RunConfig stored = load_config(dir / "config.txt");
  const std::string want = model_signature(expected), have = model_signature(stored);
  if (want != have) {
    throw IncompatibilityError("checkpoint " + dir.string() +
                               " was trained with different model settings:\n" + have +
                               "requested:\n" + want);
  }
  auto model = std::make_unique<ukan::ConditionalUkan>(stored.model, stored.seed);
  const auto tensors = io::load_tensor_bundle(dir / "weights.dkt", dir / "manifest.txt");
  auto state = model->state();
  if (tensors.size() != state.size()) {
    throw IncompatibilityError("checkpoint holds " + std::to_string(tensors.size()) +
                               " tensors, model expects " + std::to_string(state.size()));
  }
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (tensors[i].name != state[i].name || tensors[i].tensor.shape() != state[i].tensor.shape()) {
      throw IncompatibilityError("checkpoint tensor '" + tensors[i].name + "' " +
                                 shape_str(tensors[i].tensor.shape()) + " does not match '" +
                                 state[i].name + "' " + shape_str(state[i].tensor.shape()));
    }
    auto src = tensors[i].tensor.values();
    std::copy(src.begin(), src.end(), state[i].tensor.mutable_values().begin());
  }
  model->set_training(false);
  return model;
}

}  // namespace kanpaint::training

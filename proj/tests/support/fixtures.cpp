// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <bit>
#include <cstring>

#include "kanpaint/ops.hpp"
#include "kanpaint/training.hpp"

namespace kanpaint::support {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "kanpaint_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::uint64_t checksum(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ULL;
    }
  };
  for (auto d : t.shape()) mix(d);
  for (double v : t.values()) mix(std::bit_cast<std::uint64_t>(v));
  return h;
}

ukan::UkanConfig tiny_model(const std::string& arch, std::size_t base, int steps) {
  ukan::UkanConfig c;
  c.arch = ukan::parse_arch(arch);
  c.base_channels = base;
  c.embed_dim = 16;
  c.encoder_depth = 1;
  c.max_timestep = steps;
  return c;
}

repaint::ConditionalPredictor constant_predictor(double value) {
  return [value](const Tensor& x_t, std::span<const int>, const Tensor&,
                 std::span<const ukan::TumorGeometry>) { return Tensor(x_t.shape(), value); };
}

RunConfig small_run(const std::filesystem::path& root, const std::string& arch, std::size_t size,
                    std::size_t subjects, std::size_t steps) {
  RunConfig c;
  c.seed = 11;
  c.out = root / "run";
  c.model = tiny_model(arch, 4, 10);
  c.schedule.steps = 10;
  c.schedule.scale_betas = false;  // ten scaled steps would push beta past 1
  c.train.steps = steps;
  c.train.log_every = 0;
  c.data.dir = root / "data";
  c.data.phantoms.subjects = subjects;
  c.data.phantoms.phantom.height = size;
  c.data.phantoms.phantom.width = size;
  c.data.phantoms.phantom.seed = 5;
  return c;
}

ToyModel& toy_trained_model() {
  static ToyModel toy = [] {
    ScheduleConfig schedule;
    schedule.steps = 40;
    ToyModel t{tiny_model("CK", 4, schedule.steps), schedule.build(), {}, nullptr};
    data::PhantomSetSpec spec;
    spec.phantom.height = spec.phantom.width = 16;
    spec.phantom.seed = 21;
    spec.subjects = 8;
    t.records = data::generate_phantom_set(spec).train;
    TrainConfig train;
    train.lr = 2e-3;
    train.steps = 300;
    train.batch = 4;
    train.ema_rate = 0.9;
    ukan::ConditionalUkan model(t.config, std::uint64_t{3});
    t.model = std::make_unique<ukan::ConditionalUkan>(t.config, std::uint64_t{3});
    training::train(model, *t.model, t.records, t.schedule, train, 3);
    return t;
  }();
  return toy;
}

repaint::InpaintTask task_for(const data::SliceRecord& record) {
  const Shape shape{1, 1, record.image.dim(1), record.image.dim(2)};
  return {ops::reshape(record.image, shape), ops::reshape(record.healthy_mask, shape), 1};
}

}  // namespace kanpaint::support

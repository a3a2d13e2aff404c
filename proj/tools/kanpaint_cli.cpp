// SPDX-License-Identifier: Apache-2.0
// Command-line front end: gen-data, train, inpaint, evaluate, ablate.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "kanpaint/commands.hpp"
#include "kanpaint/config.hpp"

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

kanpaint::RunConfig resolve(const Common& c) {
  kanpaint::RunConfig config;
  if (!c.config_path.empty()) config = kanpaint::load_config(c.config_path);
  if (c.seed) config.seed = *c.seed;
  if (!c.out.empty()) config.out = c.out;
  return config;
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Run configuration file (key.path = value)");
  cmd->add_option("--seed", c.seed, "Override the configured seed");
  cmd->add_option("--out", c.out, "Override the output directory");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace kanpaint;
  CLI::App app{"Conditional U-KAN diffusion inpainting"};
  app.require_subcommand(1);

  Common common;
  std::string checkpoint, tasks, pred, ref, method = "kanpaint";
  bool paper_reference = false;

  auto* gen = app.add_subcommand("gen-data", "Generate or ingest the dataset and inpainting tasks");
  add_common(gen, common);
  auto* train = app.add_subcommand("train", "Train a model and write an EMA checkpoint");
  add_common(train, common);
  auto* inpaint = app.add_subcommand("inpaint", "Inpaint every task with a checkpoint");
  add_common(inpaint, common);
  inpaint->add_option("--checkpoint", checkpoint, "Checkpoint directory (default <out>/checkpoint)");
  inpaint->add_option("--tasks", tasks, "Task directory (default <data.dir>/tasks)");
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions against references");
  add_common(evaluate, common);
  evaluate->add_option("--pred", pred, "Prediction directory (default <out>/inpaint)");
  evaluate->add_option("--ref", ref, "Reference directory (default <data.dir>/tasks)");
  evaluate->add_option("--method", method, "Method label for the report");
  evaluate->add_flag("--paper-reference", paper_reference,
                     "Append published comparison rows, labelled as not reproduced");
  auto* ablate = app.add_subcommand("ablate", "Train, inpaint and evaluate each ablate.archs entry");
  add_common(ablate, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : commands::kConfigError;
  }

  return commands::guarded(
      [&] {
        RunConfig config = resolve(common);
        if (!checkpoint.empty()) config.inpaint.checkpoint = checkpoint;
        if (!tasks.empty()) config.inpaint.tasks = tasks;
        if (gen->parsed()) {
          commands::cmd_gen_data(config, std::cout);
        } else if (train->parsed()) {
          commands::cmd_train(config, std::cout);
        } else if (inpaint->parsed()) {
          commands::cmd_inpaint(config, std::cout);
        } else if (evaluate->parsed()) {
          const std::filesystem::path p = pred.empty() ? config.out / "inpaint" : std::filesystem::path(pred);
          const std::filesystem::path r = ref.empty() ? config.tasks_dir() : std::filesystem::path(ref);
          commands::cmd_evaluate(p, r, config.out / "eval", method, paper_reference, std::cout);
        } else if (ablate->parsed()) {
          commands::cmd_ablate(config, std::cout);
        }
      },
      std::cerr);
}

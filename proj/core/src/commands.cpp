// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "kanpaint/errors.hpp"
#include "kanpaint/io.hpp"
#include "kanpaint/png.hpp"
#include "kanpaint/repaint.hpp"

namespace kanpaint::commands {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

std::string task_id(const data::SliceRecord& r) {
  return r.subject_id + "_s" + std::to_string(r.slice_index);
}

Tensor as_batch(const Tensor& slice) {
  return Tensor(Shape{1, 1, slice.dim(1), slice.dim(2)},
                std::vector<double>(slice.values().begin(), slice.values().end()));
}

json metric_json(const metrics::ImageScores& s) {
  json j;
  if (std::isfinite(s.psnr)) {
    j["psnr"] = s.psnr;
  } else {
    j["psnr"] = metrics::format_value(s.psnr);
  }
  j["ssim"] = s.ssim;
  j["mse"] = s.mse;
  j["mae"] = s.mae;
  return j;
}

std::vector<fs::path> task_dirs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("task directory not found: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfigError;
  if (dynamic_cast<const DataError*>(&e)) return kDataError;
  if (dynamic_cast<const IncompatibilityError*>(&e)) return kIncompatible;
  return kFailure;
}

int guarded(const std::function<void()>& body, std::ostream& err) {
  try {
    body();
    return kOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

GenDataSummary cmd_gen_data(const RunConfig& config, std::ostream& log) {
  config.validate();
  data::Dataset dataset;
  if (!config.data.volumes.empty()) {
    dataset = data::split_by_subject(data::ingest_volumes(config.data.volumes, config.data.crop),
                                     config.data.phantoms.validation_subjects);
  } else {
    dataset = data::generate_phantom_set(config.data.phantoms);
  }
  data::save_dataset(config.data.dir, dataset);

  const auto& eval = dataset.validation.empty() ? dataset.train : dataset.validation;
  const fs::path tasks = config.data.dir / "tasks";
  fs::create_directories(tasks);
  for (const auto& r : eval) {
    const fs::path dir = tasks / task_id(r);
    fs::create_directories(dir);
    io::save_dkt(dir / "image.dkt", as_batch(r.image));
    io::save_dkt(dir / "mask.dkt", as_batch(r.healthy_mask));
  }
  write_text(config.data.dir / "config.txt", to_text(config));
  log << "gen-data: " << dataset.train.size() << " training and " << dataset.validation.size()
      << " validation slices, " << eval.size() << " tasks in " << config.data.dir.string() << '\n';
  return {dataset.train.size(), dataset.validation.size(), eval.size()};
}

TrainSummary cmd_train(const RunConfig& config, std::ostream& log) {
  config.validate();
  if (!fs::exists(config.data.dir / "manifest.txt")) {
    throw ConfigError("dataset not found in " + config.data.dir.string() + " (run gen-data first)");
  }
  const data::Dataset dataset = data::load_dataset(config.data.dir);
  if (dataset.train.empty()) throw ConfigError("dataset " + config.data.dir.string() + " has no training slices");
  const diffusion::Schedule schedule = config.schedule.build();

  ukan::ConditionalUkan model(config.model, config.seed);
  ukan::ConditionalUkan ema_model(config.model, config.seed);
  TrainSummary summary;
  summary.parameters = nn::count_parameters(model);
  log << "train: " << config.model.arch.str() << ", " << summary.parameters << " parameters, "
      << config.train.steps << " steps on " << dataset.train.size() << " slices\n";

  fs::create_directories(config.out);
  const std::size_t log_every = config.train.log_every;
  summary.result = training::train(
      model, ema_model, dataset.train, schedule, config.train, config.seed,
      [&](std::size_t step, double loss) {
        if (log_every && step % log_every == 0) log << "  step " << step << "  loss " << loss << '\n';
      });

  summary.checkpoint = config.out / "checkpoint";
  training::save_checkpoint(summary.checkpoint, ema_model, config);
  {
    std::ofstream csv(config.out / "loss.csv");
    csv << "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < summary.result.losses.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, summary.result.losses[i]);
      csv << buf;
    }
    if (!csv) throw DataError("cannot write loss.csv");
  }
  write_text(config.out / "config.txt", to_text(config));

  json manifest;
  manifest["command"] = "train";
  manifest["seed"] = config.seed;
  manifest["arch"] = config.model.arch.str();
  manifest["parameters"] = summary.parameters;
  manifest["schedule"] = {{"steps", config.schedule.steps},
                          {"beta_start", config.schedule.beta_start},
                          {"beta_end", config.schedule.beta_end},
                          {"scale_betas", config.schedule.scale_betas}};
  manifest["dataset"] = config.data.dir.string();
  manifest["training_slices"] = dataset.train.size();
  manifest["steps"] = summary.result.losses.size();
  manifest["first_epoch_mean_loss"] = summary.result.first_epoch_mean;
  manifest["final_mean_loss"] = summary.result.final_mean;
  manifest["seconds"] = summary.result.seconds;
  manifest["checkpoint"] = summary.checkpoint.string();
  manifest["config"] = to_text(config);
  write_text(config.out / "run_manifest.json", manifest.dump(2) + "\n");

  log << "train: loss " << summary.result.first_epoch_mean << " -> " << summary.result.final_mean
      << " in " << summary.result.seconds << " s; checkpoint " << summary.checkpoint.string() << '\n';
  return summary;
}

InpaintSummary cmd_inpaint(const RunConfig& config, std::ostream& log, fs::path out_dir) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  auto model = training::load_checkpoint(config.checkpoint_dir(), config);
  const diffusion::Schedule schedule = config.schedule.build();
  const auto predictor = repaint::model_predictor(*model);
  const repaint::InpaintOptions options{config.inpaint.noise_free_replacement};

  auto dirs = task_dirs(config.tasks_dir());
  if (config.inpaint.limit && dirs.size() > config.inpaint.limit) dirs.resize(config.inpaint.limit);
  if (out_dir.empty()) out_dir = config.out / "inpaint";
  fs::create_directories(out_dir);

  InpaintSummary summary;
  summary.out_dir = out_dir;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const std::string id = dirs[i].filename().string();
    repaint::InpaintTask task{io::load_dkt(dirs[i] / "image.dkt"), io::load_dkt(dirs[i] / "mask.dkt"),
                              config.inpaint.resample_jumps};
    const std::uint64_t seed = config.seed + i;
    const Tensor result = repaint::inpaint(predictor, schedule, task, seed, options);
    io::save_dkt(out_dir / (id + ".dkt"), result);
    io::write_png(out_dir / (id + ".png"), result);

    json record;
    record["id"] = id;
    record["seed"] = seed;
    record["checkpoint"] = config.checkpoint_dir().string();
    record["resample_jumps"] = config.inpaint.resample_jumps;
    record["noise_free_replacement"] = config.inpaint.noise_free_replacement;
    const bool has_mask = std::any_of(task.mask.values().begin(), task.mask.values().end(),
                                      [](double v) { return v != 0.0; });
    record["metrics"] = metric_json(metrics::score(id, result, task.image, has_mask ? &task.mask : nullptr));
    record["config"] = to_text(config);
    write_text(out_dir / (id + ".json"), record.dump(2) + "\n");
    summary.ids.push_back(id);
  }
  summary.seconds = seconds_since(start);
  log << "inpaint: " << summary.ids.size() << " tasks -> " << out_dir.string() << " in "
      << summary.seconds << " s\n";
  return summary;
}

metrics::EvalReport cmd_evaluate(const fs::path& pred_dir, const fs::path& ref_dir,
                                 const fs::path& out_dir, const std::string& method,
                                 bool paper_reference, std::ostream& log,
                                 const std::vector<std::string>& only_ids) {
  if (!fs::is_directory(pred_dir)) throw DataError("prediction directory not found: " + pred_dir.string());
  if (!fs::is_directory(ref_dir)) throw DataError("reference directory not found: " + ref_dir.string());

  std::set<std::string> preds, refs;
  for (const auto& e : fs::directory_iterator(pred_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".dkt") preds.insert(e.path().stem().string());
  }
  for (const auto& e : fs::directory_iterator(ref_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".dkt") refs.insert(e.path().stem().string());
    if (e.is_directory() && fs::exists(e.path() / "image.dkt")) refs.insert(e.path().filename().string());
  }
  if (!only_ids.empty()) {
    const std::set<std::string> keep(only_ids.begin(), only_ids.end());
    std::erase_if(refs, [&](const std::string& id) { return !keep.count(id); });
  }
  std::vector<std::string> unmatched;
  for (const auto& id : preds) if (!refs.count(id)) unmatched.push_back(id + " (no reference)");
  for (const auto& id : refs) if (!preds.count(id)) unmatched.push_back(id + " (no prediction)");
  if (!unmatched.empty()) {
    std::string msg = "evaluate: unmatched ids:";
    for (const auto& u : unmatched) msg += "\n  " + u;
    throw DataError(msg);
  }
  if (preds.empty()) throw DataError("evaluate: no predictions in " + pred_dir.string());

  metrics::EvalReport report;
  report.method = method;
  for (const auto& id : preds) {
    const Tensor pred = io::load_dkt(pred_dir / (id + ".dkt"));
    const bool nested = fs::is_directory(ref_dir / id);
    const Tensor ref = io::load_dkt(nested ? ref_dir / id / "image.dkt" : ref_dir / (id + ".dkt"));
    Tensor mask;
    if (nested && fs::exists(ref_dir / id / "mask.dkt")) mask = io::load_dkt(ref_dir / id / "mask.dkt");
    const bool use_mask = mask.defined() && std::any_of(mask.values().begin(), mask.values().end(),
                                                        [](double v) { return v != 0.0; });
    report.rows.push_back(metrics::score(id, pred, ref, use_mask ? &mask : nullptr));
  }
  if (paper_reference) report.references = metrics::published_reference_rows();

  fs::create_directories(out_dir);
  write_text(out_dir / "eval.csv", metrics::to_csv(report));
  const std::string table = metrics::summary_table({report});
  write_text(out_dir / "summary.txt", table);
  log << table;
  return report;
}

RunConfig ablation_config(const RunConfig& config, const std::string& arch) {
  RunConfig c = config;
  c.model.arch = ukan::parse_arch(arch);
  c.out = config.out / "ablate" / arch;
  c.inpaint.checkpoint.clear();
  c.ablate_archs = {arch};
  return c;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& config, std::ostream& log) {
  config.validate();
  std::vector<RunConfig> runs;
  for (const auto& arch : config.ablate_archs) runs.push_back(ablation_config(config, arch));
  for (const auto& r : runs) r.validate();

  std::vector<AblationRow> rows;
  for (const auto& run : runs) {
    AblationRow row;
    row.arch = run.model.arch.str();
    log << "ablate: " << row.arch << '\n';
    const TrainSummary trained = cmd_train(run, log);
    const InpaintSummary painted = cmd_inpaint(run, log);
    const metrics::EvalReport report =
        cmd_evaluate(painted.out_dir, run.tasks_dir(), run.out / "eval", row.arch, false, log,
                     painted.ids);
    row.parameters = trained.parameters;
    row.train_seconds = trained.result.seconds;
    row.inpaint_seconds = painted.seconds;
    row.first_epoch_loss = trained.result.first_epoch_mean;
    row.final_loss = trained.result.final_mean;
    row.scores = report.mean();
    rows.push_back(row);
  }

  std::string csv = "arch,parameters,train_seconds,inpaint_seconds,first_epoch_loss,final_loss,psnr,ssim,mse,mae\n";
  std::string table;
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %12s %10s %10s %10s %8s %10s %10s\n", "Setup", "Params",
                "Train s", "Inpaint s", "PSNR", "SSIM", "MSE", "MAE");
  table += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%zu,%.3f,%.3f,%.17g,%.17g,%s,%.17g,%.17g,%.17g\n",
                  r.arch.c_str(), r.parameters, r.train_seconds, r.inpaint_seconds,
                  r.first_epoch_loss, r.final_loss, metrics::format_value(r.scores.psnr, 6).c_str(),
                  r.scores.ssim, r.scores.mse, r.scores.mae);
    csv += line;
    std::snprintf(line, sizeof line, "%-8s %12zu %10.1f %10.1f %10s %8s %10s %10s\n", r.arch.c_str(),
                  r.parameters, r.train_seconds, r.inpaint_seconds,
                  metrics::format_value(r.scores.psnr).c_str(), metrics::format_value(r.scores.ssim).c_str(),
                  metrics::format_value(r.scores.mse).c_str(), metrics::format_value(r.scores.mae).c_str());
    table += line;
  }
  fs::create_directories(config.out);
  write_text(config.out / "ablation.csv", csv);
  write_text(config.out / "ablation.txt", table);
  log << table;
  return rows;
}

}  // namespace kanpaint::commands

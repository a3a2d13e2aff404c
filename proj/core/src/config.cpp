// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "kanpaint/errors.hpp"

namespace kanpaint {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("expected a number, got '" + std::string(v) + "'");
  }
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + std::string(v) + "'");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string fmt_int(T v) {
  return std::to_string(v);
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
  bool model = false;  // part of the checkpoint signature
};

#define KP_DOUBLE(KEY, MEMBER, MODEL)                                                      \
  Field {                                                                                  \
    KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_number<double>(v); },     \
        [](const RunConfig& c) { return fmt(c.MEMBER); }, MODEL                            \
  }
#define KP_INT(KEY, MEMBER, TYPE, MODEL)                                                   \
  Field {                                                                                  \
    KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_number<TYPE>(v); },       \
        [](const RunConfig& c) { return fmt_int(c.MEMBER); }, MODEL                        \
  }
#define KP_PATH(KEY, MEMBER)                                                               \
  Field {                                                                                  \
    KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = std::string(v); },              \
        [](const RunConfig& c) { return c.MEMBER.string(); }, false                        \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      KP_INT("seed", seed, std::uint64_t, false),
      KP_PATH("out", out),
      Field{"model.arch",
            [](RunConfig& c, std::string_view v) { c.model.arch = ukan::parse_arch(v); },
            [](const RunConfig& c) { return c.model.arch.str(); }, true},
      KP_INT("model.base_channels", model.base_channels, std::size_t, true),
      KP_INT("model.embed_dim", model.embed_dim, std::size_t, true),
      KP_INT("model.heads", model.heads, std::size_t, true),
      KP_INT("model.kan_depth", model.kan_depth, std::size_t, true),
      KP_INT("model.encoder_depth", model.encoder_depth, std::size_t, true),
      KP_DOUBLE("spline.min", model.spline_min, true),
      KP_DOUBLE("spline.max", model.spline_max, true),
      KP_INT("spline.intervals", model.spline_intervals, int, true),
      KP_INT("spline.order", model.spline_order, int, true),
      KP_INT("schedule.steps", schedule.steps, int, true),
      KP_DOUBLE("schedule.beta_start", schedule.beta_start, true),
      KP_DOUBLE("schedule.beta_end", schedule.beta_end, true),
      Field{"schedule.scale_betas",
            [](RunConfig& c, std::string_view v) { c.schedule.scale_betas = parse_bool(v); },
            [](const RunConfig& c) { return std::string(c.schedule.scale_betas ? "true" : "false"); },
            true},
      Field{"train.target",
            [](RunConfig& c, std::string_view v) { c.train.target = diffusion::parse_target_mode(v); },
            [](const RunConfig& c) { return diffusion::to_string(c.train.target); }},
      Field{"train.norm",
            [](RunConfig& c, std::string_view v) { c.train.norm = diffusion::parse_loss_norm(v); },
            [](const RunConfig& c) { return diffusion::to_string(c.train.norm); }},
      KP_DOUBLE("train.lr", train.lr, false),
      KP_INT("train.batch", train.batch, std::size_t, false),
      KP_INT("train.steps", train.steps, std::size_t, false),
      KP_DOUBLE("train.ema_rate", train.ema_rate, false),
      KP_DOUBLE("train.condition_dropout", train.condition_dropout, false),
      KP_INT("train.log_every", train.log_every, std::size_t, false),
      KP_PATH("data.dir", data.dir),
      KP_PATH("data.volumes", data.volumes),
      KP_INT("data.crop", data.crop, std::size_t, false),
      KP_INT("data.subjects", data.phantoms.subjects, std::size_t, false),
      KP_INT("data.slices_per_subject", data.phantoms.slices_per_subject, std::size_t, false),
      KP_INT("data.validation_subjects", data.phantoms.validation_subjects, std::size_t, false),
      KP_INT("data.seed", data.phantoms.phantom.seed, std::uint64_t, false),
      KP_INT("data.height", data.phantoms.phantom.height, std::size_t, false),
      KP_INT("data.width", data.phantoms.phantom.width, std::size_t, false),
      KP_INT("data.min_ellipses", data.phantoms.phantom.min_ellipses, int, false),
      KP_INT("data.max_ellipses", data.phantoms.phantom.max_ellipses, int, false),
      KP_DOUBLE("data.mask_radius_min", data.phantoms.phantom.mask_radius_min, false),
      KP_DOUBLE("data.mask_radius_max", data.phantoms.phantom.mask_radius_max, false),
      KP_PATH("inpaint.tasks", inpaint.tasks),
      KP_PATH("inpaint.checkpoint", inpaint.checkpoint),
      KP_INT("inpaint.resample_jumps", inpaint.resample_jumps, int, false),
      Field{"inpaint.noise_free_replacement",
            [](RunConfig& c, std::string_view v) { c.inpaint.noise_free_replacement = parse_bool(v); },
            [](const RunConfig& c) {
              return std::string(c.inpaint.noise_free_replacement ? "true" : "false");
            }},
      KP_INT("inpaint.limit", inpaint.limit, std::size_t, false),
      Field{"ablate.archs",
            [](RunConfig& c, std::string_view v) {
              c.ablate_archs.clear();
              std::size_t start = 0;
              while (start <= v.size()) {
                const auto comma = v.find(',', start);
                const auto item = trim(v.substr(start, comma == std::string_view::npos
                                                           ? std::string_view::npos
                                                           : comma - start));
                if (item.empty()) throw ConfigError("empty architecture in list");
                c.ablate_archs.emplace_back(item);
                if (comma == std::string_view::npos) break;
                start = comma + 1;
              }
            },
            [](const RunConfig& c) {
              std::string out;
              for (const auto& a : c.ablate_archs) out += (out.empty() ? "" : ",") + a;
              return out;
            }},
  };
  return table;
}

#undef KP_DOUBLE
#undef KP_INT
#undef KP_PATH

}  // namespace

std::filesystem::path RunConfig::tasks_dir() const {
  return inpaint.tasks.empty() ? data.dir / "tasks" : inpaint.tasks;
}

std::filesystem::path RunConfig::checkpoint_dir() const {
  return inpaint.checkpoint.empty() ? out / "checkpoint" : inpaint.checkpoint;
}

void RunConfig::validate() const {
  model.validate();
  (void)schedule.build();
  if (model.max_timestep != schedule.steps) {
    throw ConfigError("model.max_timestep must equal schedule.steps");
  }
  if (train.batch == 0) throw ConfigError("train.batch must be positive");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(train.ema_rate > 0.0 && train.ema_rate < 1.0)) throw ConfigError("train.ema_rate must lie in (0,1)");
  if (!(train.condition_dropout >= 0.0 && train.condition_dropout <= 1.0)) {
    throw ConfigError("train.condition_dropout must lie in [0,1]");
  }
  if (inpaint.resample_jumps < 1) throw ConfigError("inpaint.resample_jumps must be >= 1");
  data.phantoms.phantom.validate();
  if (ablate_archs.empty()) throw ConfigError("ablate.archs must list at least one architecture");
  for (const auto& a : ablate_archs) (void)ukan::parse_arch(a);
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  RunConfig config = std::move(base);
  std::set<std::string_view> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find('\n', pos);
    std::string_view line = text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos);
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError("config line " + std::to_string(line_no) + ": expected key = value", line_no);
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields()) {
      if (key == f.key) field = &f;
    }
    if (!field) throw ParseError("config line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'", line_no);
    if (!seen.insert(field->key).second) {
      throw ParseError("config line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) + "'", line_no);
    }
    try {
      field->set(config, value);
    } catch (const ParseError& e) {
      throw ParseError("config line " + std::to_string(line_no) + ": " + field->key + ": " + e.what(), line_no);
    } catch (const ConfigError& e) {
      throw ParseError("config line " + std::to_string(line_no) + ": " + field->key + ": " + e.what(), line_no);
    }
  }
  config.model.max_timestep = config.schedule.steps;
  return config;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

std::string model_signature(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) {
    if (f.model) out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

}  // namespace kanpaint

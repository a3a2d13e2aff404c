// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <utility>

#include "kanpaint/errors.hpp"
#include "kanpaint/io.hpp"

namespace kanpaint::data {

namespace {

constexpr double kNormEps = 1e-8;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool is_binary(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](double v) { return v == 0.0 || v == 1.0; });
}

struct Disk {
  double cy, cx, r;  // pixel units
};

// Draws a disk that fits in the image and lies inside the brain ellipse, or
// nothing when this draw misses.
std::optional<Disk> draw_disk(Rng& rng, const PhantomSpec& spec, double brain_cy, double brain_cx,
                              double brain_a, double brain_b) {
  const double h = static_cast<double>(spec.height), w = static_cast<double>(spec.width);
  const double side = std::min(h, w);
  const double r = uniform(rng, spec.mask_radius_min, spec.mask_radius_max) * side;
  if (2 * r + 2 >= side) return std::nullopt;
  const Disk d{uniform(rng, r + 1, h - r - 1), uniform(rng, r + 1, w - r - 1), r};
  const double ny = (d.cy - brain_cy) / brain_b, nx = (d.cx - brain_cx) / brain_a;
  if (std::hypot(nx, ny) > 0.6) return std::nullopt;
  return d;
}

// Tumor and healthy disks drawn jointly, at least two pixels apart.
std::pair<Disk, Disk> place_disks(Rng& rng, const PhantomSpec& spec, double brain_cy, double brain_cx,
                                  double brain_a, double brain_b) {
  for (int attempt = 0; attempt < 20000; ++attempt) {
    const auto tumor = draw_disk(rng, spec, brain_cy, brain_cx, brain_a, brain_b);
    if (!tumor) continue;
    const auto healthy = draw_disk(rng, spec, brain_cy, brain_cx, brain_a, brain_b);
    if (!healthy) continue;
    if (std::hypot(tumor->cy - healthy->cy, tumor->cx - healthy->cx) >= tumor->r + healthy->r + 2.0) {
      return {*tumor, *healthy};
    }
  }
  throw ConfigError("phantom: cannot place non-overlapping mask disks; reduce mask_radius_max");
}

Tensor disk_mask(const Disk& d, std::size_t h, std::size_t w) {
  Tensor m(Shape{1, h, w});
  auto mv = m.mutable_values();
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double dy = static_cast<double>(i) - d.cy, dx = static_cast<double>(j) - d.cx;
      if (dy * dy + dx * dx <= d.r * d.r) mv[i * w + j] = 1.0;
    }
  return m;
}

std::vector<std::string> subject_order(const std::vector<SliceRecord>& records) {
  std::vector<std::string> order;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (seen.insert(r.subject_id).second) order.push_back(r.subject_id);
  }
  return order;
}

Tensor slice_of(const Tensor& stack, std::size_t index) {
  const std::size_t h = stack.dim(1), w = stack.dim(2);
  auto v = stack.values().subspan(index * h * w, h * w);
  return Tensor(Shape{1, h, w}, std::vector<double>(v.begin(), v.end()));
}

Tensor stack_field(const std::vector<const SliceRecord*>& records, Tensor SliceRecord::*field) {
  if (records.empty()) throw DimensionError("stack: no records");
  const Shape& s = (records.front()->*field).shape();
  std::vector<double> values;
  values.reserve(records.size() * shape_numel(s));
  for (const auto* r : records) {
    const Tensor& t = r->*field;
    if (t.shape() != s) throw DimensionError("stack: mixed record shapes");
    values.insert(values.end(), t.values().begin(), t.values().end());
  }
  return Tensor(Shape{records.size(), 1, s[1], s[2]}, std::move(values));
}

}  // namespace

void validate(const SliceRecord& record) {
  const Shape& s = record.image.shape();
  if (s.size() != 3 || s[0] != 1) throw DataError("slice record: image must be [1,H,W]");
  if (record.tumor_mask.shape() != s || record.healthy_mask.shape() != s) {
    throw DataError("slice record " + record.subject_id + ": mask shape differs from image");
  }
  if (!is_binary(record.tumor_mask) || !is_binary(record.healthy_mask)) {
    throw DataError("slice record " + record.subject_id + ": masks must be binary");
  }
  for (double v : record.image.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError("slice record " + record.subject_id + ": intensity outside [0,1]");
    }
  }
}

void PhantomSpec::validate() const {
  if (height < 8 || width < 8) throw ConfigError("phantom: height and width must be >= 8");
  if (min_ellipses < 0 || max_ellipses < min_ellipses) {
    throw ConfigError("phantom: need 0 <= min_ellipses <= max_ellipses");
  }
  if (!(0.0 <= tissue_low && tissue_low <= tissue_high && tissue_high <= 1.0) ||
      !(0.0 <= tumor_low && tumor_low <= tumor_high && tumor_high <= 1.0)) {
    throw ConfigError("phantom: intensity bands must lie in [0,1]");
  }
  if (!(0.0 < mask_radius_min && mask_radius_min <= mask_radius_max && mask_radius_max < 0.25)) {
    throw ConfigError("phantom: need 0 < mask_radius_min <= mask_radius_max < 0.25");
  }
}

SliceRecord generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t h = spec.height, w = spec.width;
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);

  // Brain outline in normalized coordinates.
  const double cy = 0.5 + uniform(rng, -0.03, 0.03), cx = 0.5 + uniform(rng, -0.03, 0.03);
  const double a = uniform(rng, 0.36, 0.42), b = uniform(rng, 0.38, 0.45);
  const double base = uniform(rng, 0.2, 0.3);
  const double edge = 0.03;

  struct Ellipse {
    double cy, cx, a, b, cos_t, sin_t, intensity;
  };
  std::vector<Ellipse> inner;
  const int count = std::uniform_int_distribution<int>(spec.min_ellipses, spec.max_ellipses)(rng);
  for (int e = 0; e < count; ++e) {
    const double theta = uniform(rng, 0.0, std::numbers::pi);
    inner.push_back({cy + uniform(rng, -0.15, 0.15), cx + uniform(rng, -0.15, 0.15),
                     uniform(rng, 0.08, 0.25), uniform(rng, 0.08, 0.25), std::cos(theta),
                     std::sin(theta), uniform(rng, spec.tissue_low, spec.tissue_high)});
  }
  const double freq = uniform(rng, 3.0, 6.0);
  const double phase_x = uniform(rng, 0.0, 2 * std::numbers::pi);
  const double phase_y = uniform(rng, 0.0, 2 * std::numbers::pi);
  const double amplitude = 0.06;

  Tensor image(Shape{1, h, w});
  auto iv = image.mutable_values();
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double v = (static_cast<double>(i) + 0.5) / hd, u = (static_cast<double>(j) + 0.5) / wd;
      const double brain = sigmoid((1.0 - std::hypot((u - cx) / a, (v - cy) / b)) / edge);
      double value = base;
      for (const auto& e : inner) {
        const double du = u - e.cx, dv = v - e.cy;
        const double ru = e.cos_t * du + e.sin_t * dv, rv = -e.sin_t * du + e.cos_t * dv;
        const double s = sigmoid((1.0 - std::hypot(ru / e.a, rv / e.b)) / edge);
        value = value * (1.0 - s) + e.intensity * s;
      }
      value += amplitude * std::sin(2 * std::numbers::pi * freq * u + phase_x) *
               std::sin(2 * std::numbers::pi * freq * v + phase_y);
      iv[i * w + j] = brain * value;
    }

  const double bcy = cy * hd, bcx = cx * wd, ba = a * wd, bb = b * hd;
  const auto [tumor, healthy] = place_disks(rng, spec, bcy, bcx, ba, bb);
  const double tumor_intensity = uniform(rng, spec.tumor_low, spec.tumor_high);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double dist =
          std::hypot(static_cast<double>(i) - tumor.cy, static_cast<double>(j) - tumor.cx);
      const double s = sigmoid((tumor.r - dist) / 0.75);
      double& px = iv[i * w + j];
      px = std::clamp(px * (1.0 - s) + tumor_intensity * s, 0.0, 1.0);
    }

  SliceRecord record;
  record.image = image;
  record.tumor_mask = disk_mask(tumor, h, w);
  record.healthy_mask = disk_mask(healthy, h, w);
  record.subject_id = "phantom";
  record.slice_index = 0;
  return record;
}

std::vector<SliceRecord> slice_volume(const Tensor& volume, const Tensor& tumor_mask,
                                      const Tensor& healthy_mask, std::size_t crop,
                                      const std::string& subject_id) {
  if (volume.rank() != 3) throw DimensionError("slice_volume: expected [D,H,W], got " + shape_str(volume.shape()));
  if (tumor_mask.shape() != volume.shape() || healthy_mask.shape() != volume.shape()) {
    throw DimensionError("slice_volume: mask shapes differ from volume " + shape_str(volume.shape()));
  }
  const std::size_t d = volume.dim(0), h = volume.dim(1), w = volume.dim(2);
  if (crop == 0 || crop > std::min(h, w)) {
    throw ConfigError("slice_volume: crop " + std::to_string(crop) + " exceeds slice " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  if (!is_binary(tumor_mask) || !is_binary(healthy_mask)) {
    throw DataError("slice_volume: masks must be binary");
  }
  auto vv = volume.values();
  const auto [lo_it, hi_it] = std::minmax_element(vv.begin(), vv.end());
  const double lo = *lo_it, range = *hi_it - *lo_it + kNormEps;
  const std::size_t y0 = (h - crop) / 2, x0 = (w - crop) / 2;
  auto tv = tumor_mask.values(), hv = healthy_mask.values();

  std::vector<SliceRecord> out;
  for (std::size_t z = 0; z < d; ++z) {
    SliceRecord r;
    r.image = Tensor(Shape{1, crop, crop});
    r.tumor_mask = Tensor(Shape{1, crop, crop});
    r.healthy_mask = Tensor(Shape{1, crop, crop});
    auto im = r.image.mutable_values(), tm = r.tumor_mask.mutable_values(),
         hm = r.healthy_mask.mutable_values();
    bool any = false;
    for (std::size_t i = 0; i < crop; ++i)
      for (std::size_t j = 0; j < crop; ++j) {
        const std::size_t src = (z * h + y0 + i) * w + x0 + j, dst = i * crop + j;
        im[dst] = std::clamp((vv[src] - lo) / range, 0.0, 1.0);
        tm[dst] = tv[src];
        hm[dst] = hv[src];
        any = any || tv[src] != 0.0 || hv[src] != 0.0;
      }
    if (!any) continue;
    r.subject_id = subject_id;
    r.slice_index = static_cast<int>(z);
    out.push_back(std::move(r));
  }
  return out;
}

Tensor mask_apply(const SliceRecord& record) {
  Tensor out(record.image.shape());
  auto o = out.mutable_values();
  auto x = record.image.values(), m = record.healthy_mask.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * (1.0 - m[i]);
  return out;
}

Dataset generate_phantom_set(const PhantomSetSpec& spec) {
  if (spec.subjects == 0 || spec.slices_per_subject == 0) {
    throw ConfigError("phantom set: need at least one subject and one slice");
  }
  if (spec.validation_subjects >= spec.subjects && spec.validation_subjects > 0) {
    throw ConfigError("phantom set: validation_subjects must leave training subjects");
  }
  Rng seeds(spec.phantom.seed);
  std::vector<SliceRecord> records;
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%03zu", s);
    for (std::size_t k = 0; k < spec.slices_per_subject; ++k) {
      PhantomSpec p = spec.phantom;
      p.seed = seeds();
      SliceRecord r = generate_phantom(p);
      r.subject_id = id;
      r.slice_index = static_cast<int>(k);
      records.push_back(std::move(r));
    }
  }
  return split_by_subject(std::move(records), spec.validation_subjects);
}

Dataset split_by_subject(std::vector<SliceRecord> records, std::size_t validation_subjects) {
  std::vector<std::string> subjects = subject_order(records);
  std::sort(subjects.begin(), subjects.end());
  if (validation_subjects > subjects.size()) {
    throw ConfigError("split: " + std::to_string(validation_subjects) + " validation subjects but only " +
                      std::to_string(subjects.size()) + " available");
  }
  const std::set<std::string> held_out(subjects.end() - static_cast<std::ptrdiff_t>(validation_subjects),
                                       subjects.end());
  Dataset out;
  for (auto& r : records) {
    (held_out.count(r.subject_id) ? out.validation : out.train).push_back(std::move(r));
  }
  return out;
}

std::vector<SliceRecord> ingest_volumes(const std::filesystem::path& dir, std::size_t crop) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("volume directory not found: " + dir.string());
  std::vector<fs::path> subjects;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) subjects.push_back(entry.path());
  }
  std::sort(subjects.begin(), subjects.end());
  std::vector<SliceRecord> out;
  for (const auto& s : subjects) {
    auto slices = slice_volume(io::load_dkt(s / "volume.dkt"), io::load_dkt(s / "tumor_mask.dkt"),
                               io::load_dkt(s / "healthy_mask.dkt"), crop, s.filename().string());
    for (auto& r : slices) out.push_back(std::move(r));
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  namespace fs = std::filesystem;
  std::vector<std::pair<const SliceRecord*, Split>> all;
  for (const auto& r : dataset.train) all.emplace_back(&r, Split::Train);
  for (const auto& r : dataset.validation) all.emplace_back(&r, Split::Validation);

  std::map<std::string, Split> subject_split;
  std::map<std::string, std::vector<const SliceRecord*>> groups;
  std::vector<std::string> order;
  for (const auto& [r, split] : all) {
    validate(*r);
    auto [it, inserted] = subject_split.emplace(r->subject_id, split);
    if (!inserted && it->second != split) {
      throw DataError("dataset: subject " + r->subject_id + " appears in both splits");
    }
    if (inserted) order.push_back(r->subject_id);
    groups[r->subject_id].push_back(r);
  }

  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw DataError("cannot write " + (dir / "manifest.txt").string());
  for (const auto& id : order) {
    const auto& recs = groups[id];
    const std::size_t h = recs.front()->image.dim(1), w = recs.front()->image.dim(2);
    auto stack = [&](Tensor SliceRecord::*field) {
      std::vector<double> values;
      for (const auto* r : recs) {
        if ((r->*field).shape() != Shape{1, h, w}) throw DataError("dataset: mixed slice sizes in " + id);
        values.insert(values.end(), (r->*field).values().begin(), (r->*field).values().end());
      }
      return Tensor(Shape{recs.size(), h, w}, std::move(values));
    };
    fs::create_directories(dir / id);
    io::save_dkt(dir / id / "image.dkt", stack(&SliceRecord::image));
    io::save_dkt(dir / id / "tumor_mask.dkt", stack(&SliceRecord::tumor_mask));
    io::save_dkt(dir / id / "healthy_mask.dkt", stack(&SliceRecord::healthy_mask));
    for (const auto* r : recs) {
      manifest << id << ' ' << r->slice_index << ' '
               << (subject_split[id] == Split::Train ? "train" : "validation") << '\n';
    }
  }
  if (!manifest) throw DataError("cannot write " + (dir / "manifest.txt").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw DataError("dataset manifest not found: " + (dir / "manifest.txt").string());
  struct Line {
    std::string id;
    int slice;
    Split split;
  };
  std::vector<Line> lines;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(manifest, text)) {
    ++line_no;
    if (text.empty()) continue;
    std::istringstream ss(text);
    Line l;
    std::string split;
    if (!(ss >> l.id >> l.slice >> split) || (split != "train" && split != "validation")) {
      throw DataError("dataset manifest line " + std::to_string(line_no) + " is malformed");
    }
    l.split = split == "train" ? Split::Train : Split::Validation;
    lines.push_back(l);
  }

  std::map<std::string, std::array<Tensor, 3>> stacks;
  std::map<std::string, std::size_t> cursor;
  Dataset out;
  for (const auto& l : lines) {
    auto it = stacks.find(l.id);
    if (it == stacks.end()) {
      const auto sub = dir / l.id;
      std::array<Tensor, 3> s{io::load_dkt(sub / "image.dkt"), io::load_dkt(sub / "tumor_mask.dkt"),
                              io::load_dkt(sub / "healthy_mask.dkt")};
      for (const auto& t : s) {
        if (t.rank() != 3 || t.shape() != s[0].shape()) {
          throw DataError("dataset: inconsistent stacks for subject " + l.id);
        }
      }
      it = stacks.emplace(l.id, std::move(s)).first;
    }
    const std::size_t index = cursor[l.id]++;
    if (index >= it->second[0].dim(0)) throw DataError("dataset: manifest lists more slices than stored for " + l.id);
    SliceRecord r{slice_of(it->second[0], index), slice_of(it->second[1], index),
                  slice_of(it->second[2], index), l.id, l.slice};
    validate(r);
    (l.split == Split::Train ? out.train : out.validation).push_back(std::move(r));
  }
  return out;
}

Tensor stack_images(const std::vector<const SliceRecord*>& records) {
  return stack_field(records, &SliceRecord::image);
}

Tensor stack_masked_scans(const std::vector<const SliceRecord*>& records) {
  std::vector<SliceRecord> scans;
  std::vector<const SliceRecord*> ptrs;
  scans.reserve(records.size());
  for (const auto* r : records) {
    SliceRecord s;
    s.image = mask_apply(*r);
    scans.push_back(std::move(s));
  }
  for (const auto& s : scans) ptrs.push_back(&s);
  return stack_field(ptrs, &SliceRecord::image);
}

}  // namespace kanpaint::data

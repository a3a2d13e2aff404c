// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "../support/fixtures.hpp"
#include "kanpaint/data.hpp"
#include "kanpaint/errors.hpp"
#include "kanpaint/io.hpp"

using namespace kanpaint;

namespace {

double mask_pixels(const Tensor& m) {
  double n = 0;
  for (double v : m.values()) n += v;
  return n;
}

void expect_same(const data::SliceRecord& a, const data::SliceRecord& b) {
  EXPECT_EQ(a.subject_id, b.subject_id);
  EXPECT_EQ(a.slice_index, b.slice_index);
  EXPECT_EQ(support::checksum(a.image), support::checksum(b.image));
  EXPECT_EQ(support::checksum(a.tumor_mask), support::checksum(b.tumor_mask));
  EXPECT_EQ(support::checksum(a.healthy_mask), support::checksum(b.healthy_mask));
}

}  // namespace

TEST(Phantom, GoldenChecksum) {
  data::PhantomSpec spec;
  spec.seed = 42;
  const auto a = data::generate_phantom(spec);
  expect_same(a, data::generate_phantom(spec));
  EXPECT_EQ(support::checksum(a.image), 0xad6fdfa3bbc35123ULL) << std::hex << support::checksum(a.image);
  spec.seed = 43;
  EXPECT_NE(support::checksum(a.image), support::checksum(data::generate_phantom(spec).image));
}

// Each disk of radius r covers between pi (r - 1/sqrt2)^2 and pi (r + 1/sqrt2)^2
// lattice points.
TEST(Phantom, InvariantsOverSeeds) {
  data::PhantomSpec spec;
  const double side = static_cast<double>(std::min(spec.height, spec.width));
  const double rmin = spec.mask_radius_min * side - std::numbers::sqrt2 / 2;
  const double rmax = spec.mask_radius_max * side + std::numbers::sqrt2 / 2;
  const double lo = std::numbers::pi * rmin * rmin, hi = std::numbers::pi * rmax * rmax;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    spec.seed = seed;
    const auto r = data::generate_phantom(spec);
    ASSERT_NO_THROW(data::validate(r));
    ASSERT_EQ(r.image.shape(), (Shape{1, 64, 64}));
    for (const Tensor* m : {&r.tumor_mask, &r.healthy_mask}) {
      const double area = mask_pixels(*m);
      EXPECT_GE(area, lo) << seed;
      EXPECT_LE(area, hi) << seed;
    }
    for (std::size_t i = 0; i < r.image.numel(); ++i) {
      ASSERT_GE(r.image.at(i), 0.0);
      ASSERT_LE(r.image.at(i), 1.0);
      ASSERT_FALSE(r.tumor_mask.at(i) == 1.0 && r.healthy_mask.at(i) == 1.0) << "masks overlap, seed " << seed;
    }
  }
}

TEST(Phantom, SpecValidation) {
  data::PhantomSpec spec;
  spec.height = 4;
  EXPECT_THROW(data::generate_phantom(spec), ConfigError);
  spec = {};
  spec.mask_radius_max = 0.3;
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(SliceVolume, CropAndFilter) {
  const std::size_t d = 155, h = 240, w = 240;
  Tensor volume(Shape{d, h, w}), tumor(Shape{d, h, w}), healthy(Shape{d, h, w});
  auto vol = volume.mutable_values();
  for (std::size_t i = 0; i < vol.size(); ++i) vol[i] = static_cast<double>(i % 997) - 300.0;
  for (std::size_t z : {10u, 80u, 81u}) tumor.mutable_values()[(z * h + 120) * w + 120] = 1.0;
  healthy.mutable_values()[(100 * h + 60) * w + 60] = 1.0;
  const auto slices = data::slice_volume(volume, tumor, healthy, 192, "s1");
  ASSERT_EQ(slices.size(), 4u);
  EXPECT_EQ(slices[0].slice_index, 10);
  EXPECT_EQ(slices[3].slice_index, 100);
  for (const auto& s : slices) {
    EXPECT_EQ(s.image.shape(), (Shape{1, 192, 192}));
    EXPECT_NO_THROW(data::validate(s));
  }
  // Center crop: slice pixel (0,0) is volume pixel (24,24); min-max over the volume.
  const double raw = static_cast<double>(((10 * h + 24) * w + 24) % 997) - 300.0;
  EXPECT_NEAR(slices[0].image.at(0), (raw + 300.0) / (996.0 + 1e-8), 1e-12);
  EXPECT_EQ(slices[0].tumor_mask.at(96 * 192 + 96), 1.0);

  // Pure function of its inputs.
  const auto again = data::slice_volume(volume, tumor, healthy, 192, "s1");
  for (std::size_t i = 0; i < slices.size(); ++i) expect_same(slices[i], again[i]);
}

TEST(SliceVolume, DegenerateInputs) {
  Tensor volume(Shape{3, 8, 8}, 5.0), zero(Shape{3, 8, 8}, 0.0), one(Shape{3, 8, 8}, 0.0);
  EXPECT_TRUE(data::slice_volume(volume, zero, zero, 8, "s").empty());
  one.mutable_values()[100] = 1.0;
  const auto s = data::slice_volume(volume, one, zero, 4, "s");
  ASSERT_EQ(s.size(), 1u);
  for (double v : s[0].image.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(data::slice_volume(volume, one, zero, 9, "s"), ConfigError);
  EXPECT_THROW(data::slice_volume(volume, one, zero, 0, "s"), ConfigError);
  one.mutable_values()[3] = 0.5;
  EXPECT_THROW(data::slice_volume(volume, one, zero, 4, "s"), DataError);
}

TEST(MaskApply, Cases) {
  data::PhantomSpec spec;
  spec.seed = 3;
  auto r = data::generate_phantom(spec);
  for (auto& v : r.healthy_mask.mutable_values()) v = 0.0;
  EXPECT_EQ(support::checksum(data::mask_apply(r)), support::checksum(r.image));
  for (auto& v : r.healthy_mask.mutable_values()) v = 1.0;
  const Tensor cleared = data::mask_apply(r);
  for (double v : cleared.values()) EXPECT_EQ(v, 0.0);
  auto hm = r.healthy_mask.mutable_values();
  for (std::size_t i = 0; i < hm.size(); ++i) hm[i] = (i % 64) < 32 ? 1.0 : 0.0;
  const Tensor half = data::mask_apply(r);
  for (std::size_t i = 0; i < hm.size(); ++i) {
    EXPECT_EQ(half.at(i), (i % 64) < 32 ? 0.0 : r.image.at(i));
  }
}

TEST(Dataset, SplitIsDisjointBySubject) {
  data::PhantomSetSpec spec;
  spec.phantom.height = spec.phantom.width = 16;
  spec.subjects = 6;
  spec.slices_per_subject = 3;
  spec.validation_subjects = 2;
  const auto ds = data::generate_phantom_set(spec);
  EXPECT_EQ(ds.train.size(), 12u);
  EXPECT_EQ(ds.validation.size(), 6u);
  std::set<std::string> train_ids, val_ids;
  for (const auto& r : ds.train) train_ids.insert(r.subject_id);
  for (const auto& r : ds.validation) val_ids.insert(r.subject_id);
  for (const auto& id : val_ids) EXPECT_FALSE(train_ids.contains(id));
  EXPECT_EQ(val_ids, (std::set<std::string>{"phantom_004", "phantom_005"}));

  std::vector<data::SliceRecord> all = ds.train;
  all.insert(all.end(), ds.validation.begin(), ds.validation.end());
  const auto resplit = data::split_by_subject(all, 2);
  ASSERT_EQ(resplit.validation.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) expect_same(resplit.validation[i], ds.validation[i]);
  EXPECT_THROW(data::split_by_subject(all, 7), ConfigError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  data::PhantomSetSpec spec;
  spec.phantom.height = spec.phantom.width = 16;
  spec.subjects = 3;
  spec.slices_per_subject = 2;
  spec.validation_subjects = 1;
  const auto ds = data::generate_phantom_set(spec);
  const auto dir = support::fresh_dir("data_roundtrip");
  data::save_dataset(dir, ds);
  const auto back = data::load_dataset(dir);
  ASSERT_EQ(back.train.size(), ds.train.size());
  ASSERT_EQ(back.validation.size(), ds.validation.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    data::SliceRecord q = ds.train[i];
    q.image = io::quantize_f32(q.image);
    expect_same(back.train[i], q);
  }
  EXPECT_THROW(data::load_dataset(dir / "missing"), DataError);
}

TEST(Dataset, IngestVolumes) {
  const auto dir = support::fresh_dir("data_ingest");
  Rng rng(4);
  Tensor tumor(Shape{4, 10, 10}), healthy(Shape{4, 10, 10});
  tumor.mutable_values()[155] = 1.0;
  healthy.mutable_values()[355] = 1.0;
  std::filesystem::create_directories(dir / "subj_a");
  io::save_dkt(dir / "subj_a" / "volume.dkt", Tensor::uniform({4, 10, 10}, rng, 0.0, 100.0));
  io::save_dkt(dir / "subj_a" / "tumor_mask.dkt", tumor);
  io::save_dkt(dir / "subj_a" / "healthy_mask.dkt", healthy);
  const auto records = data::ingest_volumes(dir, 8);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0].subject_id, "subj_a");
  EXPECT_EQ(records[0].slice_index, 1);
  EXPECT_EQ(records[1].slice_index, 3);
  EXPECT_EQ(records[0].image.shape(), (Shape{1, 8, 8}));
  std::filesystem::remove(dir / "subj_a" / "healthy_mask.dkt");
  EXPECT_THROW(data::ingest_volumes(dir, 8), DataError);
}

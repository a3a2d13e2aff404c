// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kanpaint/tensor.hpp"

namespace kanpaint::data {

struct SliceRecord {
  Tensor image;         // [1,H,W] in [0,1]
  Tensor tumor_mask;    // [1,H,W] binary
  Tensor healthy_mask;  // [1,H,W] binary
  std::string subject_id;
  int slice_index = 0;
};

/// Throws DataError when a record breaks its invariants.
void validate(const SliceRecord& record);

struct PhantomSpec {
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  int min_ellipses = 2;
  int max_ellipses = 4;
  double tissue_low = 0.35;  // intensity band of inner structures
  double tissue_high = 0.75;
  double tumor_low = 0.85;
  double tumor_high = 1.0;
  /// Disk radii as fractions of min(height, width).
  double mask_radius_min = 0.08;
  double mask_radius_max = 0.16;

  /// Throws ConfigError for degenerate values.
  void validate() const;
};

/// Smooth nested ellipses with a sinusoidal texture, one bright tumor disk
/// and one disjoint healthy-tissue disk. Deterministic in `spec.seed`.
SliceRecord generate_phantom(const PhantomSpec& spec);

/// Axial slices of a [D,H,W] volume, min-max normalized over the volume,
/// center-cropped to crop x crop, keeping slices where either mask is nonzero.
std::vector<SliceRecord> slice_volume(const Tensor& volume, const Tensor& tumor_mask,
                                      const Tensor& healthy_mask, std::size_t crop,
                                      const std::string& subject_id);

/// image * (1 - healthy_mask), shaped like the image.
Tensor mask_apply(const SliceRecord& record);

enum class Split { Train, Validation };

struct Dataset {
  std::vector<SliceRecord> train;
  std::vector<SliceRecord> validation;
};

struct PhantomSetSpec {
  PhantomSpec phantom;  // seed here is the set seed
  std::size_t subjects = 8;
  std::size_t slices_per_subject = 1;
  std::size_t validation_subjects = 0;
};

/// Phantoms grouped into subjects; the last `validation_subjects` subjects
/// form the validation split.
Dataset generate_phantom_set(const PhantomSetSpec& spec);

/// Splits by subject so no subject appears in both parts. Subjects are
/// ordered by id and the last `validation_subjects` go to validation.
Dataset split_by_subject(std::vector<SliceRecord> records, std::size_t validation_subjects);

/// Reads `<dir>/<subject>/{volume,tumor_mask,healthy_mask}.dkt` for every
/// subject directory and slices each volume.
std::vector<SliceRecord> ingest_volumes(const std::filesystem::path& dir, std::size_t crop);

/// One directory per subject with [S,H,W] stacks image.dkt, tumor_mask.dkt
/// and healthy_mask.dkt, plus a root manifest.txt of
/// "subject_id slice_index split" lines in stack order.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

/// Stacks records into an [N,1,H,W] batch using the given field.
Tensor stack_images(const std::vector<const SliceRecord*>& records);
Tensor stack_masked_scans(const std::vector<const SliceRecord*>& records);

}  // namespace kanpaint::data

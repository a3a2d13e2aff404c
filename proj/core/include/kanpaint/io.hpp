// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "kanpaint/tensor.hpp"

namespace kanpaint::io {

/// DKT1 record: magic "DKT1", u32 rank, rank x u64 dims, then the values as
/// little-endian f32 in row-major order.
void write_dkt(std::ostream& os, const Tensor& tensor);
Tensor read_dkt(std::istream& is);

void save_dkt(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_dkt(const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Writes `tensors` as consecutive DKT1 records to `weights` and an ordered
/// "name dim0 dim1 ..." listing to `manifest`.
void save_tensor_bundle(const std::filesystem::path& weights, const std::filesystem::path& manifest,
                        const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensor_bundle(const std::filesystem::path& weights,
                                            const std::filesystem::path& manifest);

/// Rounds every value through f32, matching what a DKT1 round trip stores.
Tensor quantize_f32(const Tensor& tensor);

}  // namespace kanpaint::io

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "kanpaint/tensor.hpp"

namespace kanpaint::io {

/// Writes the last two axes of `image` as an 8-bit grayscale PNG. Values are
/// clamped to [0,1] and scaled to 0..255.
void write_png(const std::filesystem::path& path, const Tensor& image);

}  // namespace kanpaint::io

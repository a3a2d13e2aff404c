// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/png.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "kanpaint/errors.hpp"

namespace kanpaint::io {

void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() < 2) throw DimensionError("write_png: need at least two axes");
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (h * w != image.numel()) throw DimensionError("write_png: expected a single image");

  std::vector<png_byte> pixels(h * w);
  auto v = image.values();
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<png_byte>(std::lround(std::clamp(v[i], 0.0, 1.0) * 255.0));
  }

  std::unique_ptr<std::FILE, int (*)(std::FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) throw DataError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t i = 0; i < h; ++i) png_write_row(png, pixels.data() + i * w);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace kanpaint::io

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "ulab/tensor.hpp"

namespace ulab {

// side x side x 3, row-major HWC, values in [0,1].
struct Image {
  std::size_t side = 0;
  std::vector<double> pixels;

  Image() = default;
  explicit Image(std::size_t s) : side(s), pixels(s * s * 3, 0.0) {}
  double& at(std::size_t y, std::size_t x, std::size_t ch) { return pixels[(y * side + x) * 3 + ch]; }
  double at(std::size_t y, std::size_t x, std::size_t ch) const { return pixels[(y * side + x) * 3 + ch]; }
  bool operator==(const Image&) const = default;
};

// HWC images -> NCHW tensor, and back (values clamped to [0,1]).
Tensor images_to_tensor(std::span<const Image> images);
std::vector<Image> tensor_to_images(const Tensor& t);

// 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);
// Tiles images into a grid with a 1-pixel white gutter.
void write_png_grid(const std::filesystem::path& path, std::span<const Image> images, std::size_t cols);

}  // namespace ulab

// SPDX-License-Identifier: Apache-2.0
#include "ulab/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "ulab/errors.hpp"

namespace ulab {

Tensor images_to_tensor(std::span<const Image> images) {
  require(!images.empty(), "images_to_tensor: empty batch");
  const std::size_t s = images[0].side, hw = s * s;
  std::vector<double> v(images.size() * 3 * hw);
  for (std::size_t n = 0; n < images.size(); ++n) {
    require(images[n].side == s && images[n].pixels.size() == hw * 3, "images_to_tensor: mixed image sizes");
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < 3; ++c) v[(n * 3 + c) * hw + p] = images[n].pixels[p * 3 + c];
  }
  return Tensor::from({images.size(), 3, s, s}, std::move(v));
}

std::vector<Image> tensor_to_images(const Tensor& t) {
  require(t.rank() == 4 && t.dim(1) == 3 && t.dim(2) == t.dim(3), "tensor_to_images: expects [n,3,s,s]");
  const std::size_t s = t.dim(2), hw = s * s;
  std::vector<Image> out;
  for (std::size_t n = 0; n < t.dim(0); ++n) {
    Image im(s);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < 3; ++c) im.pixels[p * 3 + c] = std::clamp(t[(n * 3 + c) * hw + p], 0.0, 1.0);
    out.push_back(std::move(im));
  }
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

void write_rgb(const std::filesystem::path& path, std::size_t w, std::size_t h, const std::vector<unsigned char>& rgb) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw RuntimeFailure("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeFailure("png write failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) png_write_row(png, const_cast<png_bytep>(rgb.data() + y * w * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  std::vector<unsigned char> rgb(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), rgb.begin(), to_byte);
  write_rgb(path, image.side, image.side, rgb);
}

Image read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw RuntimeFailure("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw RuntimeFailure("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeFailure("png read failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const auto w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB || png_get_bit_depth(png, info) != 8 || w != h) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RuntimeFailure("unsupported png layout in " + path.string());
  }
  std::vector<unsigned char> row(w * 3);
  Image im(w);
  for (std::size_t y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (std::size_t i = 0; i < w * 3; ++i) im.pixels[y * w * 3 + i] = row[i] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return im;
}

void write_png_grid(const std::filesystem::path& path, std::span<const Image> images, std::size_t cols) {
  require(!images.empty() && cols >= 1, "write_png_grid: empty grid");
  const std::size_t s = images[0].side;
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t w = cols * (s + 1) + 1, h = rows * (s + 1) + 1;
  std::vector<unsigned char> rgb(w * h * 3, 255);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t ox = (i % cols) * (s + 1) + 1, oy = (i / cols) * (s + 1) + 1;
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x)
        for (std::size_t c = 0; c < 3; ++c) rgb[((oy + y) * w + ox + x) * 3 + c] = to_byte(images[i].at(y, x, c));
  }
  write_rgb(path, w, h, rgb);
}

}  // namespace ulab

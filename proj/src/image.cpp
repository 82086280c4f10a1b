// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#include "ffa/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace ffa {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

}  // namespace

Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw Error("to_gray: expected 1 or 3 channels");
  Image out(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.at(y, x, 0) = 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
  return out;
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (height == img.height && width == img.width) return img;
  Image out(height, width, img.channels);
  const float sy = static_cast<float>(img.height) / height;
  const float sx = static_cast<float>(img.width) / width;
  for (int y = 0; y < height; ++y) {
    const float fy = std::clamp((y + 0.5f) * sy - 0.5f, 0.f, static_cast<float>(img.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const float wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const float fx = std::clamp((x + 0.5f) * sx - 0.5f, 0.f, static_cast<float>(img.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const float wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const float top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
        const float bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = to_byte(v) / 255.f;
  return out;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) throw Error("write_png: unsupported channel count");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng init failed");
  }
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(img.height) * img.width * img.channels);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = to_byte(img.data[i]);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng write failed for '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) png_write_row(png, rows.data() + y * stride);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw MissingDataError("cannot open image '" + path.string() + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng init failed");
  }
  Image img;
  std::vector<std::uint8_t> buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("'" + path.string() + "' is not a readable PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  buf.resize(static_cast<std::size_t>(w) * h * channels);
  const std::size_t stride = static_cast<std::size_t>(w) * channels;
  for (int y = 0; y < h; ++y) png_read_row(png, buf.data() + y * stride, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  // Grayscale files are expanded to 3 channels so the rest of the pipeline sees RGB.
  img = Image(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src_c = channels >= 3 ? c : 0;
        img.at(y, x, c) = buf[(static_cast<std::size_t>(y) * w + x) * channels + src_c] / 255.f;
      }
  return img;
}

template <typename T>
Tensor<T> images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw Error("images_to_tensor: empty batch");
  const Image& first = images.front();
  Tensor<T> t({static_cast<int>(images.size()), first.channels, first.height, first.width});
  const std::size_t hw = static_cast<std::size_t>(first.height) * first.width;
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& im = images[n];
    if (!im.same_shape(first)) throw Error("images_to_tensor: mixed image shapes in batch");
    for (int c = 0; c < im.channels; ++c)
      for (std::size_t p = 0; p < hw; ++p)
        t[(n * im.channels + c) * hw + p] = static_cast<T>(im.data[p * im.channels + c]);
  }
  return t;
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t, int index) {
  if (t.rank() != 4) throw Error("tensor_to_image: expected NCHW");
  const int c = t.dim(1), h = t.dim(2), w = t.dim(3);
  Image im(h, w, c);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < c; ++ci)
    for (std::size_t p = 0; p < hw; ++p)
      im.data[p * c + ci] = static_cast<float>(t[(static_cast<std::size_t>(index) * c + ci) * hw + p]);
  return im;
}

template Tensor<float> images_to_tensor<float>(std::span<const Image>);
template Tensor<double> images_to_tensor<double>(std::span<const Image>);
template Image tensor_to_image<float>(const Tensor<float>&, int);
template Image tensor_to_image<double>(const Tensor<double>&, int);

}  // namespace ffa

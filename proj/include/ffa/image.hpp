// Copyright 2026 The ffasynth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "ffa/tensor.hpp"

namespace ffa {

/// Interleaved HWC float image, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width && channels == o.channels; }
  bool operator==(const Image& o) const = default;
};

/// Luma (0.299, 0.587, 0.114) for 3-channel images; identity for 1-channel ones.
Image to_gray(const Image& img);

/// Bilinear resampling with pixel-centre alignment.
Image resize_bilinear(const Image& img, int height, int width);

/// 8-bit PNG; values are clamped and quantized as round(255 * v).
void write_png(const Image& img, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

/// Quantizes to 8 bits and back, matching a PNG round trip.
Image quantize8(const Image& img);

template <typename T>
Tensor<T> images_to_tensor(std::span<const Image> images);

template <typename T>
Image tensor_to_image(const Tensor<T>& t, int index);

}  // namespace ffa

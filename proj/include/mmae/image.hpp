// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/common.hpp"
#include "mmae/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mmae {

// 8-bit RGB image, interleaved row-major.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(int w, int h, std::uint8_t fill = 255)
      : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, fill) {}

  long num_pixels() const { return static_cast<long>(width) * height; }
  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
};

// RGB triplet of one source image and its two recovered stain channels.
struct StainTriplet {
  ImageU8 rgb;
  ImageU8 h_channel;
  ImageU8 e_channel;
};

ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);
void write_png_gray(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& gray);

// Planar [3 x H x W] tensor with values in [0, 1].
Tensor image_to_tensor(const ImageU8& img);
// Inverse of image_to_tensor; values clamped to [0, 1] and rounded half-up.
ImageU8 tensor_to_image(const Tensor& t);

inline std::uint8_t quantize_u8(double v) {
  double clamped = std::min(255.0, std::max(0.0, v));
  return static_cast<std::uint8_t>(std::floor(clamped + 0.5));
}

}  // namespace mmae

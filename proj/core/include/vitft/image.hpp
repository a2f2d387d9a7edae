// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace vitft {

/// 8-bit interleaved RGB image (row-major, HWC).
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  static constexpr int kChannels = 3;

  Image() = default;
  Image(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * kChannels, fill) {}

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
  }
  bool empty() const { return pixels.empty(); }
  bool operator==(const Image&) const = default;
};

/// Bilinear resize to (out_h, out_w).
Image resize_bilinear(const Image& src, int out_h, int out_w);

/// Bilinear resample of the box [x0, x0 + w) x [y0, y0 + h) (sub-pixel
/// coordinates) onto an out_h x out_w grid.
Image crop_resize(const Image& src, double x0, double y0, double w, double h, int out_h,
                  int out_w);

/// Integer crop; the box must lie inside the image.
Image crop(const Image& src, int x0, int y0, int w, int h);

/// Shorter side scaled to `shorter`, aspect preserved.
Image resize_shorter(const Image& src, int shorter);

Image center_crop(const Image& src, int out_h, int out_w);

/// Per-channel normalisation into a CHW float buffer of size 3*H*W.
struct Normalization {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stdev{0.25, 0.25, 0.25};
};
void to_chw(const Image& img, const Normalization& norm, std::span<float> out);

}  // namespace vitft

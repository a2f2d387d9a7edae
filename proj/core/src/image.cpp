// SPDX-License-Identifier: Apache-2.0
#include "vitft/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <opencv2/imgproc.hpp>

namespace vitft {

namespace {

cv::Mat view(const Image& img) {
  return cv::Mat(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.pixels.data()));
}

void check_size(int h, int w) {
  if (h <= 0 || w <= 0) {
    throw std::invalid_argument("image size must be positive, got " + std::to_string(h) + "x" +
                                std::to_string(w));
  }
}

}  // namespace

Image resize_bilinear(const Image& src, int out_h, int out_w) {
  check_size(out_h, out_w);
  if (src.empty()) throw std::invalid_argument("resize_bilinear: empty image");
  Image out(out_h, out_w);
  if (out_h == src.height && out_w == src.width) {
    out.pixels = src.pixels;
    return out;
  }
  cv::Mat dst = view(out);
  cv::resize(view(src), dst, cv::Size(out_w, out_h), 0, 0, cv::INTER_LINEAR);
  return out;
}

Image crop_resize(const Image& src, double x0, double y0, double w, double h, int out_h,
                  int out_w) {
  check_size(out_h, out_w);
  if (!(w > 0 && h > 0)) throw std::invalid_argument("crop_resize: empty box");
  // Pixel centres of the output map onto the box with half-pixel alignment.
  const double sx = w / out_w, sy = h / out_h;
  cv::Matx23d m(sx, 0, x0 + 0.5 * sx - 0.5, 0, sy, y0 + 0.5 * sy - 0.5);
  Image out(out_h, out_w);
  cv::Mat dst = view(out);
  cv::warpAffine(view(src), dst, m, dst.size(), cv::INTER_LINEAR | cv::WARP_INVERSE_MAP,
                 cv::BORDER_REPLICATE);
  return out;
}

Image crop(const Image& src, int x0, int y0, int w, int h) {
  check_size(h, w);
  if (x0 < 0 || y0 < 0 || x0 + w > src.width || y0 + h > src.height) {
    throw std::out_of_range("crop: box outside image");
  }
  Image out(h, w);
  const std::size_t row = static_cast<std::size_t>(w) * Image::kChannels;
  for (int y = 0; y < h; ++y) {
    std::copy_n(&src.pixels[(static_cast<std::size_t>(y0 + y) * src.width + x0) * Image::kChannels],
                row, &out.pixels[static_cast<std::size_t>(y) * row]);
  }
  return out;
}

Image resize_shorter(const Image& src, int shorter) {
  check_size(shorter, shorter);
  const int s = std::min(src.height, src.width);
  const int h = static_cast<int>(std::lround(static_cast<double>(src.height) * shorter / s));
  const int w = static_cast<int>(std::lround(static_cast<double>(src.width) * shorter / s));
  return resize_bilinear(src, std::max(h, shorter), std::max(w, shorter));
}

Image center_crop(const Image& src, int out_h, int out_w) {
  if (out_h > src.height || out_w > src.width) {
    throw std::invalid_argument("center_crop: crop larger than image");
  }
  return crop(src, (src.width - out_w) / 2, (src.height - out_h) / 2, out_w, out_h);
}

void to_chw(const Image& img, const Normalization& norm, std::span<float> out) {
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  if (out.size() != plane * Image::kChannels) throw std::invalid_argument("to_chw: size mismatch");
  for (int c = 0; c < Image::kChannels; ++c) {
    const float scale = static_cast<float>(1.0 / (255.0 * norm.stdev[c]));
    const float shift = static_cast<float>(norm.mean[c] / norm.stdev[c]);
    float* dst = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      dst[i] = static_cast<float>(img.pixels[i * Image::kChannels + c]) * scale - shift;
    }
  }
}

}  // namespace vitft

// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

#include "vitft/augment.hpp"

namespace vitft {

namespace {

constexpr double kMaxLevel = 10.0;
const cv::Scalar kFill(128, 128, 128);

cv::Mat view(Image& img) { return cv::Mat(img.height, img.width, CV_8UC3, img.pixels.data()); }
cv::Mat view(const Image& img) {
  return cv::Mat(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.pixels.data()));
}

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return static_cast<std::uint8_t>((r * 19595 + g * 38470 + b * 7471 + 0x8000) >> 16);
}

using Lut = std::array<std::uint8_t, 256>;

void apply_lut(Image& img, int channel, const Lut& lut) {
  for (std::size_t i = static_cast<std::size_t>(channel); i < img.pixels.size(); i += 3) {
    img.pixels[i] = lut[img.pixels[i]];
  }
}

void apply_lut_all(Image& img, const Lut& lut) {
  for (auto& p : img.pixels) p = lut[p];
}

std::array<std::int64_t, 256> histogram(const Image& img, int channel) {
  std::array<std::int64_t, 256> h{};
  for (std::size_t i = static_cast<std::size_t>(channel); i < img.pixels.size(); i += 3) {
    ++h[img.pixels[i]];
  }
  return h;
}

Image affine(const Image& img, const cv::Matx23d& inverse) {
  Image out(img.height, img.width);
  cv::Mat dst = view(out);
  cv::warpAffine(view(img), dst, inverse, dst.size(), cv::INTER_LINEAR | cv::WARP_INVERSE_MAP,
                 cv::BORDER_CONSTANT, kFill);
  return out;
}

// out = degenerate + factor * (img - degenerate)
Image blend(const Image& degenerate, const Image& img, double factor) {
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double d = degenerate.pixels[i];
    out.pixels[i] = clamp_u8(d + factor * (img.pixels[i] - d));
  }
  return out;
}

Image grayscale(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    const auto l = luma(img.pixels[i], img.pixels[i + 1], img.pixels[i + 2]);
    out.pixels[i] = out.pixels[i + 1] = out.pixels[i + 2] = l;
  }
  return out;
}

Image auto_contrast(const Image& img) {
  Image out = img;
  for (int c = 0; c < 3; ++c) {
    const auto h = histogram(img, c);
    int lo = 0, hi = 255;
    while (lo < 256 && h[static_cast<std::size_t>(lo)] == 0) ++lo;
    while (hi >= 0 && h[static_cast<std::size_t>(hi)] == 0) --hi;
    if (hi <= lo) continue;
    const double scale = 255.0 / (hi - lo);
    const double offset = -lo * scale;
    Lut lut;
    for (int i = 0; i < 256; ++i) {
      lut[static_cast<std::size_t>(i)] =
          static_cast<std::uint8_t>(std::clamp(static_cast<int>(i * scale + offset), 0, 255));
    }
    apply_lut(out, c, lut);
  }
  return out;
}

Image equalize(const Image& img) {
  Image out = img;
  for (int c = 0; c < 3; ++c) {
    const auto h = histogram(img, c);
    std::int64_t total = 0, last = 0, nonzero = 0;
    for (auto v : h) {
      if (v) {
        total += v;
        last = v;
        ++nonzero;
      }
    }
    if (nonzero <= 1) continue;
    const std::int64_t step = (total - last) / 255;
    if (step == 0) continue;
    Lut lut;
    std::int64_t n = step / 2;
    for (std::size_t i = 0; i < 256; ++i) {
      lut[i] = static_cast<std::uint8_t>(std::min<std::int64_t>(n / step, 255));
      n += h[i];
    }
    apply_lut(out, c, lut);
  }
  return out;
}

Image solarize(const Image& img, int threshold) {
  Image out = img;
  Lut lut;
  for (int i = 0; i < 256; ++i) {
    lut[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i < threshold ? i : 255 - i);
  }
  apply_lut_all(out, lut);
  return out;
}

Image solarize_add(const Image& img, int add, int threshold = 128) {
  Image out = img;
  Lut lut;
  for (int i = 0; i < 256; ++i) {
    lut[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(i < threshold ? std::min(255, i + add) : i);
  }
  apply_lut_all(out, lut);
  return out;
}

Image posterize(const Image& img, int bits) {
  if (bits >= 8) return img;
  Image out = img;
  const auto mask = static_cast<std::uint8_t>(~((1 << (8 - bits)) - 1));
  for (auto& p : out.pixels) p &= mask;
  return out;
}

Image contrast_degenerate(const Image& img) {
  double sum = 0;
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    sum += luma(img.pixels[i], img.pixels[i + 1], img.pixels[i + 2]);
  }
  const auto pixels = static_cast<double>(img.pixels.size() / 3);
  const auto mean = static_cast<std::uint8_t>(static_cast<int>(sum / pixels + 0.5));
  return Image(img.height, img.width, mean);
}

// 3x3 smoothing kernel [1 1 1; 1 5 1; 1 1 1] / 13 on the interior; the
// border keeps its original values.
Image sharpness_degenerate(const Image& img) {
  Image out = img;
  for (int y = 1; y + 1 < img.height; ++y) {
    for (int x = 1; x + 1 < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        int s = 4 * img.at(y, x, c);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) s += img.at(y + dy, x + dx, c);
        }
        out.at(y, x, c) = clamp_u8(s / 13.0);
      }
    }
  }
  return out;
}

double enhance_factor(double magnitude) { return magnitude / kMaxLevel * 1.8 + 0.1; }

}  // namespace

const char* randaug_op_name(RandAugOp op) {
  switch (op) {
    case RandAugOp::kAutoContrast: return "AutoContrast";
    case RandAugOp::kEqualize: return "Equalize";
    case RandAugOp::kInvert: return "Invert";
    case RandAugOp::kRotate: return "Rotate";
    case RandAugOp::kPosterize: return "Posterize";
    case RandAugOp::kSolarize: return "Solarize";
    case RandAugOp::kSolarizeAdd: return "SolarizeAdd";
    case RandAugOp::kColor: return "Color";
    case RandAugOp::kContrast: return "Contrast";
    case RandAugOp::kBrightness: return "Brightness";
    case RandAugOp::kSharpness: return "Sharpness";
    case RandAugOp::kShearX: return "ShearX";
    case RandAugOp::kShearY: return "ShearY";
    case RandAugOp::kTranslateX: return "TranslateX";
    case RandAugOp::kTranslateY: return "TranslateY";
  }
  return "?";
}

Image apply_randaug_op(const Image& img, RandAugOp op, double magnitude, bool negate) {
  const double level = std::clamp(magnitude, 0.0, kMaxLevel) / kMaxLevel;
  const double sign = negate ? -1.0 : 1.0;
  switch (op) {
    case RandAugOp::kAutoContrast: return auto_contrast(img);
    case RandAugOp::kEqualize: return equalize(img);
    case RandAugOp::kInvert: return solarize(img, 0);
    case RandAugOp::kRotate: {
      const cv::Point2f centre(static_cast<float>(img.width - 1) / 2.0F,
                               static_cast<float>(img.height - 1) / 2.0F);
      cv::Mat fwd = cv::getRotationMatrix2D(centre, sign * level * 30.0, 1.0);
      cv::Mat inv;
      cv::invertAffineTransform(fwd, inv);
      return affine(img, cv::Matx23d(inv));
    }
    case RandAugOp::kPosterize: return posterize(img, static_cast<int>(level * 4));
    case RandAugOp::kSolarize: return solarize(img, static_cast<int>(level * 256));
    case RandAugOp::kSolarizeAdd: return solarize_add(img, static_cast<int>(level * 110));
    case RandAugOp::kColor: return blend(grayscale(img), img, enhance_factor(magnitude));
    case RandAugOp::kContrast: return blend(contrast_degenerate(img), img, enhance_factor(magnitude));
    case RandAugOp::kBrightness:
      return blend(Image(img.height, img.width, 0), img, enhance_factor(magnitude));
    case RandAugOp::kSharpness:
      return blend(sharpness_degenerate(img), img, enhance_factor(magnitude));
    case RandAugOp::kShearX: return affine(img, cv::Matx23d(1, sign * level * 0.3, 0, 0, 1, 0));
    case RandAugOp::kShearY: return affine(img, cv::Matx23d(1, 0, 0, sign * level * 0.3, 1, 0));
    case RandAugOp::kTranslateX:
      return affine(img, cv::Matx23d(1, 0, sign * level * 0.45 * img.width, 0, 1, 0));
    case RandAugOp::kTranslateY:
      return affine(img, cv::Matx23d(1, 0, 0, 0, 1, sign * level * 0.45 * img.height));
  }
  throw std::invalid_argument("apply_randaug_op: unknown op");
}

Image randaug_apply(const Image& img, double m, int n, double mstd, Rng& rng,
                    std::vector<RandAugOp>* applied) {
  if (n < 0) throw std::invalid_argument("randaug_apply: n must be >= 0");
  if (!(m >= 0 && m <= kMaxLevel)) throw std::invalid_argument("randaug_apply: m outside [0, 10]");
  if (applied) applied->clear();
  Image out = img;
  for (int i = 0; i < n; ++i) {
    const auto op = static_cast<RandAugOp>(rng.uniform_int(0, kNumRandAugOps));
    double magnitude = m;
    if (mstd > 0) magnitude = std::clamp(rng.normal(m, mstd), 0.0, kMaxLevel);
    const bool negate = rng.bernoulli(0.5);
    out = apply_randaug_op(out, op, magnitude, negate);
    if (applied) applied->push_back(op);
  }
  return out;
}

Image three_aug_apply(const Image& img, Rng& rng) {
  switch (rng.uniform_int(0, 3)) {
    case 0: return grayscale(img);
    case 1: return solarize(img, 128);
    default: {
      const double sigma = rng.uniform(0.1, 2.0);
      Image out(img.height, img.width);
      cv::Mat dst = view(out);
      cv::GaussianBlur(view(img), dst, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
      return out;
    }
  }
}

}  // namespace vitft

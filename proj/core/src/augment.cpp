// SPDX-License-Identifier: Apache-2.0
#include "vitft/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <opencv2/core.hpp>

namespace vitft {

namespace {

void require(bool ok, const char* field, const std::string& what) {
  if (!ok) throw std::invalid_argument(std::string(field) + ": " + what);
}

void check_batch(const Tensor<float>& images, const Tensor<float>& targets) {
  if (images.rank() != 4 || targets.rank() != 2 || images.dim(0) != targets.dim(0)) {
    throw ShapeError("mixing expects images (B,C,H,W) and targets (B,K), got " +
                     shape_str(images.shape()) + " and " + shape_str(targets.shape()));
  }
}

void mix_targets(const Tensor<float>& targets, double lambda, Tensor<float>& out) {
  const std::int64_t b = targets.dim(0), k = targets.dim(1);
  out = Tensor<float>(targets.shape());
  for (std::int64_t i = 0; i < b; ++i) {
    const float* self = targets.ptr() + i * k;
    const float* other = targets.ptr() + (b - 1 - i) * k;
    for (std::int64_t j = 0; j < k; ++j) {
      out[static_cast<std::size_t>(i * k + j)] =
          static_cast<float>(lambda * self[j] + (1.0 - lambda) * other[j]);
    }
  }
}

}  // namespace

const char* policy_name(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::kRandAugRrc: return "randaug+rrc";
    case PolicyKind::kThreeAugRrc: return "3aug+rrc";
    case PolicyKind::kThreeAugSrc: return "3aug+src";
  }
  return "?";
}

PolicyKind parse_policy(const std::string& name) {
  for (auto kind : {PolicyKind::kRandAugRrc, PolicyKind::kThreeAugRrc, PolicyKind::kThreeAugSrc}) {
    if (name == policy_name(kind)) return kind;
  }
  throw std::invalid_argument("unknown augmentation policy '" + name + "'");
}

void AugPolicy::validate() const {
  require(randaug_m >= 0 && randaug_m <= 10, "randaug_m", "must lie in [0, 10]");
  require(randaug_n >= 0, "randaug_n", "must be >= 0");
  require(randaug_mstd >= 0, "randaug_mstd", "must be >= 0");
  require(mixup_alpha >= 0, "mixup_alpha", "must be >= 0");
  require(cutmix_alpha >= 0, "cutmix_alpha", "must be >= 0");
  require(erase_prob >= 0 && erase_prob <= 1, "erase_prob", "must lie in [0, 1]");
  require(crop_scale_lo > 0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1,
          "crop_scale", "need 0 < lo <= hi <= 1");
  require(smoothing_eps >= 0 && smoothing_eps < 1, "smoothing_eps", "must lie in [0, 1)");
  for (double s : norm.stdev) require(s > 0, "norm_std", "must be positive");
}

CropBox sample_crop_box(int height, int width, double scale_lo, double scale_hi, Rng& rng) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("sample_crop_box: empty image");
  if (!(scale_lo > 0 && scale_lo <= scale_hi && scale_hi <= 1)) {
    throw std::invalid_argument("sample_crop_box: need 0 < scale_lo <= scale_hi <= 1");
  }
  const double area = static_cast<double>(height) * width;
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale_lo, scale_hi);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const double w = std::sqrt(target * aspect);
    const double h = std::sqrt(target / aspect);
    if (w >= 1 && h >= 1 && w <= width && h <= height) {
      const double x0 = rng.uniform(0.0, width - w);
      const double y0 = rng.uniform(0.0, height - h);
      return {x0, y0, w, h};
    }
  }
  // Fallback: the largest centred box with an admissible aspect ratio.
  double w = width, h = height;
  const double ratio = w / h;
  if (ratio < 3.0 / 4.0) {
    h = w / (3.0 / 4.0);
  } else if (ratio > 4.0 / 3.0) {
    w = h * (4.0 / 3.0);
  }
  return {(width - w) / 2, (height - h) / 2, w, h};
}

Image random_resized_crop(const Image& img, double scale_lo, double scale_hi, int out_size,
                          Rng& rng, CropBox* box) {
  const CropBox b = sample_crop_box(img.height, img.width, scale_lo, scale_hi, rng);
  if (box) *box = b;
  return crop_resize(img, b.x0, b.y0, b.w, b.h, out_size, out_size);
}

Image single_resize_crop(const Image& img, int out_size, int pad, Rng& rng) {
  Image resized = resize_shorter(img, out_size);
  Image padded(resized.height + 2 * pad, resized.width + 2 * pad);
  cv::Mat src(resized.height, resized.width, CV_8UC3, resized.pixels.data());
  cv::Mat dst(padded.height, padded.width, CV_8UC3, padded.pixels.data());
  cv::copyMakeBorder(src, dst, pad, pad, pad, pad, cv::BORDER_REFLECT_101);
  const int y0 = static_cast<int>(rng.uniform_int(0, padded.height - out_size + 1));
  const int x0 = static_cast<int>(rng.uniform_int(0, padded.width - out_size + 1));
  return crop(padded, x0, y0, out_size, out_size);
}

Image eval_transform(const Image& img, int out_size, double ratio) {
  const int shorter = static_cast<int>(std::lround(out_size * ratio));
  return center_crop(resize_shorter(img, std::max(shorter, out_size)), out_size, out_size);
}

bool random_erase(std::span<float> chw, int channels, int height, int width, double prob,
                  Rng& rng, EraseBox* box) {
  if (chw.size() != static_cast<std::size_t>(channels) * height * width) {
    throw std::invalid_argument("random_erase: buffer size mismatch");
  }
  if (rng.uniform() >= prob) return false;
  const double area = static_cast<double>(height) * width;
  const double log_lo = std::log(0.3), log_hi = std::log(1.0 / 0.3);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(0.02, 1.0 / 3.0);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const int h = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int w = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (w < width && h < height) {
      const int y0 = static_cast<int>(rng.uniform_int(0, height - h + 1));
      const int x0 = static_cast<int>(rng.uniform_int(0, width - w + 1));
      for (int c = 0; c < channels; ++c) {
        for (int y = y0; y < y0 + h; ++y) {
          float* row = chw.data() + (static_cast<std::size_t>(c) * height + y) * width;
          for (int x = x0; x < x0 + w; ++x) row[x] = static_cast<float>(rng.normal());
        }
      }
      if (box) *box = {y0, x0, h, w};
      return true;
    }
  }
  return false;
}

Tensor<float> smooth_targets(std::span<const int> labels, int num_classes, double eps) {
  if (num_classes <= 0) throw std::invalid_argument("smooth_targets: num_classes must be > 0");
  if (!(eps >= 0 && eps < 1)) throw std::invalid_argument("smooth_targets: eps outside [0, 1)");
  constexpr double kGrid = 1 << 24;
  const double off = std::nearbyint(eps / num_classes * kGrid) / kGrid;
  const double on = 1.0 - off * (num_classes - 1);
  const auto k = static_cast<std::int64_t>(num_classes);
  Tensor<float> out({static_cast<std::int64_t>(labels.size()), k}, static_cast<float>(off));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw std::out_of_range("smooth_targets: label " + std::to_string(labels[i]) +
                              " outside [0, " + std::to_string(num_classes) + ")");
    }
    out[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(labels[i])] =
        static_cast<float>(on);
  }
  return out;
}

MixedBatch mixup_with_lambda(const Tensor<float>& images, const Tensor<float>& targets,
                             double lambda) {
  check_batch(images, targets);
  MixedBatch out;
  out.kind = MixKind::kMixup;
  out.lambda_used = lambda;
  out.images = Tensor<float>(images.shape());
  const std::int64_t b = images.dim(0);
  const std::int64_t per = b ? static_cast<std::int64_t>(images.size()) / b : 0;
  const auto lam = static_cast<float>(lambda), rest = static_cast<float>(1.0 - lambda);
  for (std::int64_t i = 0; i < b; ++i) {
    const float* self = images.ptr() + i * per;
    const float* other = images.ptr() + (b - 1 - i) * per;
    float* dst = out.images.ptr() + i * per;
    for (std::int64_t j = 0; j < per; ++j) dst[j] = lam * self[j] + rest * other[j];
  }
  mix_targets(targets, lambda, out.targets);
  return out;
}

MixedBatch mixup_batch(const Tensor<float>& images, const Tensor<float>& targets, double alpha,
                       Rng& rng) {
  check_batch(images, targets);
  if (alpha <= 0) return {images, targets, 1.0, MixKind::kNone};
  return mixup_with_lambda(images, targets, rng.beta(alpha, alpha));
}

PasteBox cutmix_box(int height, int width, double lambda, Rng& rng) {
  const double ratio = std::sqrt(1.0 - std::clamp(lambda, 0.0, 1.0));
  const int cut_h = static_cast<int>(height * ratio);
  const int cut_w = static_cast<int>(width * ratio);
  const int cy = static_cast<int>(rng.uniform_int(0, height));
  const int cx = static_cast<int>(rng.uniform_int(0, width));
  PasteBox box;
  box.y0 = std::clamp(cy - cut_h / 2, 0, height);
  box.y1 = std::clamp(cy + cut_h / 2, 0, height);
  box.x0 = std::clamp(cx - cut_w / 2, 0, width);
  box.x1 = std::clamp(cx + cut_w / 2, 0, width);
  return box;
}

MixedBatch cutmix_with_box(const Tensor<float>& images, const Tensor<float>& targets,
                           const PasteBox& box) {
  check_batch(images, targets);
  const std::int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (box.y0 < 0 || box.x0 < 0 || box.y1 > h || box.x1 > w || box.y0 > box.y1 ||
      box.x0 > box.x1) {
    throw std::out_of_range("cutmix_with_box: box outside image");
  }
  MixedBatch out;
  out.kind = MixKind::kCutMix;
  out.images = images;
  out.images.clear_grad();
  for (std::int64_t i = 0; i < b; ++i) {
    const std::int64_t partner = b - 1 - i;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = box.y0; y < box.y1; ++y) {
        const std::int64_t row = ((i * c + ch) * h + y) * w;
        const std::int64_t src = ((partner * c + ch) * h + y) * w;
        std::copy(images.ptr() + src + box.x0, images.ptr() + src + box.x1,
                  out.images.ptr() + row + box.x0);
      }
    }
  }
  out.lambda_used = 1.0 - static_cast<double>(box.area()) / static_cast<double>(h * w);
  mix_targets(targets, out.lambda_used, out.targets);
  return out;
}

MixedBatch cutmix_batch(const Tensor<float>& images, const Tensor<float>& targets, double alpha,
                        Rng& rng) {
  check_batch(images, targets);
  if (alpha <= 0) return {images, targets, 1.0, MixKind::kNone};
  const double lambda = rng.beta(alpha, alpha);
  const PasteBox box = cutmix_box(static_cast<int>(images.dim(2)), static_cast<int>(images.dim(3)),
                                  lambda, rng);
  return cutmix_with_box(images, targets, box);
}

MixedBatch mix_batch(const Tensor<float>& images, const Tensor<float>& targets,
                     const AugPolicy& policy, Rng& rng) {
  const bool mixup = policy.mixup_alpha > 0, cutmix = policy.cutmix_alpha > 0;
  if (mixup && cutmix) {
    return rng.bernoulli(0.5) ? cutmix_batch(images, targets, policy.cutmix_alpha, rng)
                              : mixup_batch(images, targets, policy.mixup_alpha, rng);
  }
  if (cutmix) return cutmix_batch(images, targets, policy.cutmix_alpha, rng);
  if (mixup) return mixup_batch(images, targets, policy.mixup_alpha, rng);
  check_batch(images, targets);
  return {images, targets, 1.0, MixKind::kNone};
}

void train_transform(const Image& img, const AugPolicy& policy, int out_size,
                     std::uint64_t sample_seed, std::span<float> out) {
  Rng rng(sample_seed);
  Image x = policy.policy_kind == PolicyKind::kThreeAugSrc
                ? single_resize_crop(img, out_size, 4, rng)
                : random_resized_crop(img, policy.crop_scale_lo, policy.crop_scale_hi, out_size,
                                      rng);
  if (policy.policy_kind == PolicyKind::kRandAugRrc) {
    x = randaug_apply(x, policy.randaug_m, policy.randaug_n, policy.randaug_mstd, rng);
  } else {
    x = three_aug_apply(x, rng);
  }
  to_chw(x, policy.norm, out);
  if (policy.erase_prob > 0) {
    random_erase(out, Image::kChannels, out_size, out_size, policy.erase_prob, rng);
  }
}

}  // namespace vitft

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vitft/image.hpp"
#include "vitft/rng.hpp"
#include "vitft/tensor.hpp"

namespace vitft {

enum class PolicyKind { kRandAugRrc, kThreeAugRrc, kThreeAugSrc };
enum class EraseMode { kPixel };

const char* policy_name(PolicyKind kind);
PolicyKind parse_policy(const std::string& name);

struct AugPolicy {
  double randaug_m = 9.0;
  int randaug_n = 2;
  double randaug_mstd = 0.5;
  double mixup_alpha = 0.8;
  double cutmix_alpha = 1.0;
  double erase_prob = 0.25;
  EraseMode erase_mode = EraseMode::kPixel;
  double crop_scale_lo = 0.08;
  double crop_scale_hi = 1.0;
  double smoothing_eps = 0.1;
  PolicyKind policy_kind = PolicyKind::kRandAugRrc;
  Normalization norm;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// ---------------------------------------------------------------- crops

/// Sub-pixel crop rectangle.
struct CropBox {
  double x0 = 0, y0 = 0, w = 0, h = 0;
};

/// Samples a box covering a fraction of the image area in [scale_lo,
/// scale_hi] with aspect log-uniform in [3/4, 4/3]. Ten attempts, then a
/// centred fallback box clamped to the image.
CropBox sample_crop_box(int height, int width, double scale_lo, double scale_hi, Rng& rng);

Image random_resized_crop(const Image& img, double scale_lo, double scale_hi, int out_size,
                          Rng& rng, CropBox* box = nullptr);

/// Fixed-scale crop: shorter side resized to out_size, reflect-padded by
/// `pad`, then an out_size square cropped at a random position.
Image single_resize_crop(const Image& img, int out_size, int pad, Rng& rng);

/// Shorter side resized to round(out_size * ratio), then centre-cropped.
Image eval_transform(const Image& img, int out_size, double ratio = 1.14);

// ------------------------------------------------------------- RandAug

enum class RandAugOp : std::uint8_t {
  kAutoContrast,
  kEqualize,
  kInvert,
  kRotate,
  kPosterize,
  kSolarize,
  kSolarizeAdd,
  kColor,
  kContrast,
  kBrightness,
  kSharpness,
  kShearX,
  kShearY,
  kTranslateX,
  kTranslateY,
};
inline constexpr int kNumRandAugOps = 15;
const char* randaug_op_name(RandAugOp op);

/// One op at a fixed magnitude in [0, 10]. `negate` flips the direction of
/// the signed ops (rotate, shear, translate).
Image apply_randaug_op(const Image& img, RandAugOp op, double magnitude, bool negate = false);

/// n ops drawn uniformly with replacement; each magnitude ~ N(m, mstd)
/// clipped to [0, 10]. Every drawn op is applied.
Image randaug_apply(const Image& img, double m, int n, double mstd, Rng& rng,
                    std::vector<RandAugOp>* applied = nullptr);

/// One of {grayscale, solarize, gaussian blur}, chosen uniformly.
Image three_aug_apply(const Image& img, Rng& rng);

// --------------------------------------------------------- RandomErase

struct EraseBox {
  int y0 = 0, x0 = 0, h = 0, w = 0;
};

/// Operates on a normalised CHW buffer. With probability `prob` one
/// rectangle (area fraction in [0.02, 1/3], aspect log-uniform in
/// [0.3, 1/0.3]) is filled with N(0, 1) values. Returns whether a region
/// was erased.
bool random_erase(std::span<float> chw, int channels, int height, int width, double prob,
                  Rng& rng, EraseBox* box = nullptr);

// ----------------------------------------------------- targets, mixing

/// Rows of (1 - eps) one-hot + eps / K. The off-target mass is rounded to a
/// multiple of 2^-24 so every partial row sum is exact in float: rows sum to
/// exactly 1 in any summation order.
Tensor<float> smooth_targets(std::span<const int> labels, int num_classes, double eps);

enum class MixKind { kNone, kMixup, kCutMix };

struct MixedBatch {
  Tensor<float> images;   // (B, C, H, W)
  Tensor<float> targets;  // (B, K)
  double lambda_used = 1.0;
  MixKind kind = MixKind::kNone;
};

/// Integer half-open box [y0, y1) x [x0, x1).
struct PasteBox {
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  std::int64_t area() const { return static_cast<std::int64_t>(y1 - y0) * (x1 - x0); }
};

/// Sample b is mixed with sample B-1-b (the batch reversed).
MixedBatch mixup_with_lambda(const Tensor<float>& images, const Tensor<float>& targets,
                             double lambda);
/// lambda ~ Beta(alpha, alpha); alpha = 0 returns the batch unchanged.
MixedBatch mixup_batch(const Tensor<float>& images, const Tensor<float>& targets, double alpha,
                       Rng& rng);

/// Box of side ratio sqrt(1 - lambda) centred uniformly, clipped to the image.
PasteBox cutmix_box(int height, int width, double lambda, Rng& rng);
/// Pastes the box from the partner sample; lambda_used = 1 - area / (H W).
MixedBatch cutmix_with_box(const Tensor<float>& images, const Tensor<float>& targets,
                           const PasteBox& box);
MixedBatch cutmix_batch(const Tensor<float>& images, const Tensor<float>& targets, double alpha,
                        Rng& rng);

/// Batch-level mixing per policy. When both alphas are positive a fair coin
/// picks CutMix or Mixup for the whole batch.
MixedBatch mix_batch(const Tensor<float>& images, const Tensor<float>& targets,
                     const AugPolicy& policy, Rng& rng);

// ------------------------------------------------------------ pipeline

/// Per-sample train transform: crop (RRC or SRC), RandAug or 3Aug,
/// normalisation, RandomErase. Writes 3*out_size*out_size floats.
void train_transform(const Image& img, const AugPolicy& policy, int out_size,
                     std::uint64_t sample_seed, std::span<float> out);

}  // namespace vitft

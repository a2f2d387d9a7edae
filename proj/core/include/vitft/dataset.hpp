// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vitft/image.hpp"

namespace vitft {

enum class Split { kTrain, kVal };

/// In-memory labelled image set. Read-only after construction.
struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  int num_classes = 0;
  Split split = Split::kTrain;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  /// Throws std::invalid_argument on label/size inconsistencies.
  void validate() const;
  /// First `per_class` samples of every class, in dataset order.
  Dataset subset_per_class(int per_class) const;
};

/// Class-conditional Gabor patches on a random background.
///
/// Class c fixes the grating orientation (c mod 5, in steps of 36 degrees)
/// and period band (coarse for c < 5, fine otherwise). Everything else, blob
/// count, placement, radius, phase, amplitude, colour tint, background and
/// pixel noise, is nuisance, which keeps pixel-space nearest neighbour and
/// linear models weak. The train and val splits use independent streams.
struct SynthOptions {
  double noise = 0.08;
  int blobs_lo = 3;
  int blobs_hi = 6;
  double orientation_jitter = 0.1;  // radians
};

Dataset synth_dataset(int num_classes, int n_per_class, int image_size, std::uint64_t seed,
                      Split split = Split::kTrain, const SynthOptions& options = {});

/// root/<class>/<image>. Classes are the sorted subdirectory names; files
/// are visited in sorted order; each image is resized (shorter side) and
/// centre-cropped to out_size. Undecodable files throw unless skip_bad.
Dataset load_folder(const std::filesystem::path& root, int out_size, bool skip_bad = false);

}  // namespace vitft

// SPDX-License-Identifier: Apache-2.0
#include "vitft/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "vitft/rng.hpp"

namespace vitft {

void Dataset::validate() const {
  if (images.size() != labels.size()) throw std::invalid_argument("dataset: image/label count mismatch");
  for (int l : labels) {
    if (l < 0 || l >= num_classes) throw std::invalid_argument("dataset: label out of range");
  }
}

Dataset Dataset::subset_per_class(int per_class) const {
  Dataset out;
  out.class_names = class_names;
  out.num_classes = num_classes;
  out.split = split;
  std::vector<int> taken(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < size(); ++i) {
    auto& n = taken[static_cast<std::size_t>(labels[i])];
    if (n < per_class) {
      ++n;
      out.images.push_back(images[i]);
      out.labels.push_back(labels[i]);
    }
  }
  return out;
}

Dataset synth_dataset(int num_classes, int n_per_class, int image_size, std::uint64_t seed,
                      Split split, const SynthOptions& opt) {
  if (num_classes <= 0 || n_per_class <= 0 || image_size <= 0) {
    throw std::invalid_argument("synth_dataset: counts must be positive");
  }
  Rng rng(mix_seed({seed, static_cast<std::uint64_t>(split), 0x5e7d47a5ULL}));
  Dataset ds;
  ds.num_classes = num_classes;
  ds.split = split;
  for (int c = 0; c < num_classes; ++c) ds.class_names.push_back("class" + std::to_string(c));

  const int n = image_size;
  const double pi = std::numbers::pi;
  std::vector<double> canvas(static_cast<std::size_t>(n) * n * 3);
  for (int c = 0; c < num_classes; ++c) {
    const double base_theta = pi * (c % 5) / 5.0;
    const double base_period = (c % 10) < 5 ? 8.0 : 3.6;
    for (int s = 0; s < n_per_class; ++s) {
      double bg[3], tint[3];
      for (double& b : bg) b = rng.uniform(0.3, 0.7);
      const double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
      for (double& t : tint) t = rng.uniform(0.5, 1.0);
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          const double ramp = gx * (static_cast<double>(x) / n - 0.5) + gy * (static_cast<double>(y) / n - 0.5);
          for (int ch = 0; ch < 3; ++ch) canvas[(static_cast<std::size_t>(y) * n + x) * 3 + ch] = bg[ch] + ramp;
        }
      }
      const auto blobs = rng.uniform_int(opt.blobs_lo, opt.blobs_hi + 1);
      for (std::int64_t b = 0; b < blobs; ++b) {
        const double theta = base_theta + rng.uniform(-opt.orientation_jitter, opt.orientation_jitter);
        const double period = base_period * rng.uniform(0.9, 1.1);
        const double phase = rng.uniform(0.0, 2 * pi);
        const double cx = rng.uniform(0.0, n), cy = rng.uniform(0.0, n);
        const double radius = rng.uniform(4.0, 7.0);
        const double amp = rng.uniform(0.25, 0.4);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int y = 0; y < n; ++y) {
          for (int x = 0; x < n; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double env = std::exp(-(dx * dx + dy * dy) / (2 * radius * radius));
            if (env < 1e-4) continue;
            const double u = x * ct + y * st;
            const double v = amp * std::sin(2 * pi * u / period + phase) * env;
            for (int ch = 0; ch < 3; ++ch) canvas[(static_cast<std::size_t>(y) * n + x) * 3 + ch] += v * tint[ch];
          }
        }
      }
      Image img(n, n);
      for (std::size_t i = 0; i < canvas.size(); ++i) {
        const double v = std::clamp(canvas[i] + rng.normal(0.0, opt.noise), 0.0, 1.0);
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

Dataset load_folder(const std::filesystem::path& root, int out_size, bool skip_bad) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::invalid_argument("load_folder: '" + root.string() + "' is not a directory");
  std::vector<fs::path> classes;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) classes.push_back(entry.path());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw std::invalid_argument("load_folder: no class directories under '" + root.string() + "'");
  Dataset ds;
  ds.num_classes = static_cast<int>(classes.size());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    ds.class_names.push_back(classes[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(classes[c])) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::size_t loaded = 0;
    for (const auto& f : files) {
      cv::Mat bgr = cv::imread(f.string(), cv::IMREAD_COLOR);
      if (bgr.empty()) {
        if (skip_bad) continue;
        throw std::runtime_error("load_folder: cannot decode '" + f.string() + "'");
      }
      Image img(bgr.rows, bgr.cols);
      cv::Mat rgb(img.height, img.width, CV_8UC3, img.pixels.data());
      cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
      ds.images.push_back(center_crop(resize_shorter(img, out_size), out_size, out_size));
      ds.labels.push_back(static_cast<int>(c));
      ++loaded;
    }
    if (loaded == 0) throw std::invalid_argument("load_folder: class directory '" + classes[c].string() + "' has no images");
  }
  return ds;
}

}  // namespace vitft

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace vitft {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  bool dashed = false;
};

struct Figure {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  std::vector<Series> series;
};

/// Standalone SVG line chart. Throws std::invalid_argument when there is no
/// series or a series is empty or ragged.
std::string render_svg(const Figure& fig);

/// Reads metrics CSVs and writes, into out_dir:
///   <stem>.svg       val accuracy per epoch, raw and EMA series
///   overlay.svg      every run on one chart
///   tuned_layers.svg best accuracy against tuned layer count, when the
///                    stems carry "tuned_layers=<k>" (a freeze sweep)
/// All inputs are validated before anything is written. Returns the paths.
std::vector<std::filesystem::path> emit_curves(const std::vector<std::filesystem::path>& csvs,
                                               const std::filesystem::path& out_dir);

}  // namespace vitft

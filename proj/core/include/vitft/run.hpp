// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "vitft/config.hpp"
#include "vitft/trainer.hpp"

namespace vitft {

struct RunOptions {
  /// When set, receives metrics.csv, checkpoint.ftra, config.txt and summary.txt.
  std::optional<std::filesystem::path> out_dir;
  /// Continue from this checkpoint (its config hash must match).
  std::optional<std::filesystem::path> resume;
  /// Stop once this many epochs are done; the schedule is unchanged.
  int stop_after_epochs = -1;
  std::ostream* progress = nullptr;
};

/// Loads the data, builds the model from `train.seed` and trains to the end.
FitResult execute_run(const RunConfig& cfg, const RunOptions& options = {});

/// "best_raw=0.9620 best_ema=0.9580 epochs=20 config=0123456789abcdef"
std::string summary_line(const RunConfig& cfg, const FitResult& result);

}  // namespace vitft

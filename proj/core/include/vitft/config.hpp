// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "vitft/augment.hpp"
#include "vitft/dataset.hpp"
#include "vitft/optim.hpp"
#include "vitft/vit.hpp"

namespace vitft {

struct DatasetSpec {
  std::string kind = "synth";  // synth | folder
  int train_per_class = 500;
  int val_per_class = 100;
  int train_subset_per_class = 0;  // 0 = use everything
  std::uint64_t seed = 0;
  SynthOptions synth;
  std::string train_root;
  std::string val_root;
};

/// Everything a run depends on. Keys in the text form follow the row names
/// of the usual fine-tuning config tables (base_learning_rate,
/// layer_wise_lr_decay, warmup_epochs, training_epochs, ema, ...).
struct RunConfig {
  VitConfig model;
  TrainConfig train;
  AugPolicy aug;
  DatasetSpec data;
  int tuned_layers = -1;  // >= 0 overrides freeze_k with depth - tuned_layers
  bool track_train_acc = false;
  int prefetch = 2;
  std::string out_dir;

  /// Throws ConfigError naming the key.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  /// Applies tuned_layers and checks every section.
  void validate() const;
  TrainConfig resolved_train() const;

  /// Canonical "key = value" text of every key that affects results.
  std::string canonical() const;
  /// FNV-1a over canonical(), as 16 hex digits.
  std::string hash() const;

  bool operator==(const RunConfig& other) const { return canonical() == other.canonical(); }
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every accepted key, in canonical order.
const std::vector<std::string>& config_keys();

/// "baseline", "recipe-base" or "recipe-large".
RunConfig preset_config(std::string_view name);
const std::vector<std::string>& preset_names();

/// One "key = value" per line, '#' comments. A `preset = <name>` line
/// replaces everything set so far with that preset. Unknown keys are
/// rejected with the line number.
RunConfig parse_config(std::istream& in, RunConfig base = preset_config("recipe-base"));
RunConfig load_config(const std::string& path, RunConfig base = preset_config("recipe-base"));

/// Loads the train and val splits described by the config.
struct DatasetPair {
  Dataset train;
  Dataset val;
};
DatasetPair load_datasets(const RunConfig& cfg);

std::string trim(std::string_view s);
std::vector<std::string> split_list(std::string_view s, char sep = ',');

}  // namespace vitft

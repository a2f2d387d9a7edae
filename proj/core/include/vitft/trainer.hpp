// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vitft/augment.hpp"
#include "vitft/dataset.hpp"
#include "vitft/optim.hpp"
#include "vitft/vit.hpp"

namespace vitft {

struct MetricRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_acc_raw = 0;
  double val_acc_ema = 0;
  double lr = 0;  // head-group rate at the last step of the epoch
  std::optional<double> train_acc;  // eval-transform accuracy on the train set

  bool operator==(const MetricRecord&) const = default;
};

inline constexpr const char* kMetricsHeader = "epoch,train_loss,val_acc_raw,val_acc_ema,lr";

/// Fixed-format CSV (header line plus one row per record).
void write_metrics_csv(std::ostream& out, const std::vector<MetricRecord>& records);
std::string metrics_csv(const std::vector<MetricRecord>& records);
/// Throws std::runtime_error on a malformed file.
std::vector<MetricRecord> read_metrics_csv(std::istream& in);

/// Mean over rows of -<target, log softmax(logits)>. Uses the same kernel
/// as the training graph, so results match the training loss bit-for-bit.
template <typename T>
T soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets);

/// Top-1 accuracy under the evaluation transform (shorter-side resize to
/// 1.14x, centre crop). Throws std::invalid_argument on an empty dataset.
double evaluate(const VisionTransformer<float>& model, const Dataset& data,
                const Normalization& norm = {}, int batch = 250);

struct FitOptions {
  int prefetch = 2;                 // batches prepared ahead by the worker; 0 = inline
  bool track_train_acc = false;
  int eval_batch = 250;
  std::optional<std::filesystem::path> checkpoint;  // written after every epoch
  int stop_after_epochs = -1;       // stop early (schedule unchanged); -1 = run to the end
  std::string config_hash;          // stored in checkpoints, checked on resume
  std::ostream* progress = nullptr;
  std::function<void(const MetricRecord&)> on_epoch;
};

struct FitResult {
  std::vector<MetricRecord> metrics;
  double best_raw = 0;
  double best_ema = 0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(int epoch, std::int64_t step)
      : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step)),
        epoch_(epoch), step_(step) {}
  int epoch() const { return epoch_; }
  std::int64_t step() const { return step_; }

 private:
  int epoch_;
  std::int64_t step_;
};

/// Owns the optimisation state for one model and runs the epoch loop:
/// augment -> forward -> soft-target cross-entropy -> backward -> AdamW with
/// LLRD -> EMA, then raw and EMA validation every epoch.
///
/// Every random choice is keyed by (seed, epoch, sample or step index), so a
/// run is a pure function of its inputs and a resumed run continues exactly.
class Trainer {
 public:
  Trainer(VisionTransformer<float>& model, const Dataset& train, const Dataset& val,
          TrainConfig cfg, AugPolicy policy, FitOptions options = {});
  ~Trainer();
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// Runs the remaining epochs; returns every record so far.
  FitResult fit();

  double evaluate_raw(const Dataset& data);
  /// EMA accuracy; equals the raw accuracy when EMA is disabled (momentum 0
  /// keeps the shadow equal to the weights).
  double evaluate_ema(const Dataset& data);

  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores weights, moments, shadow, counters and metrics. Throws when
  /// the stored config hash differs from options.config_hash.
  void load_checkpoint(const std::filesystem::path& path);

  int epochs_done() const { return epoch_; }
  std::int64_t steps_done() const { return state_.step; }
  std::int64_t steps_per_epoch() const;
  const ParamGroups& groups() const { return groups_; }
  const OptState<float>& opt_state() const { return state_; }
  const std::vector<MetricRecord>& metrics() const { return metrics_; }

  /// Batch exactly as the worker builds it (before mixing).
  void make_batch(int epoch, std::span<const std::size_t> indices, Tensor<float>& images,
                  Tensor<float>& targets) const;
  /// Sample order of an epoch.
  std::vector<std::size_t> epoch_order(int epoch) const;

 private:
  struct Prepared;
  void run_epoch();
  Prepared prepare(int epoch, std::int64_t step, const std::vector<std::size_t>& order) const;

  VisionTransformer<float>& model_;
  const Dataset& train_;
  const Dataset& val_;
  TrainConfig cfg_;
  AugPolicy policy_;
  FitOptions options_;
  ParamGroups groups_;
  OptState<float> state_;
  VitProgram<float> program_;
  int epoch_ = 0;
  std::vector<MetricRecord> metrics_;
};

/// Convenience wrapper: builds a Trainer and runs it to completion.
FitResult fit(VisionTransformer<float>& model, const Dataset& train, const Dataset& val,
              const TrainConfig& cfg, const AugPolicy& policy, FitOptions options = {});

}  // namespace vitft

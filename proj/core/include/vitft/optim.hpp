// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vitft/tensor.hpp"
#include "vitft/vit.hpp"

namespace vitft {

struct TrainConfig {
  double base_lr = 6e-4;
  double llrd_decay = 0.6;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 2048;
  int accum_steps = 1;  // micro-batches averaged per optimizer step
  int warmup_epochs = 10;
  int total_epochs = 50;
  double ema_momentum = 0.9998;
  int freeze_k = 0;
  double min_lr = 1e-6;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Multiplier d^(depth + 1 - layer); the head (layer depth + 1) gets exactly 1.
double llrd_multiplier(int layer, int depth, double decay);

struct ParamGroup {
  int layer_index = 0;
  double lr_multiplier = 1.0;
  bool wd_enabled = true;
  bool frozen = false;
  std::vector<std::size_t> params;  // indices into the model's parameter list
  std::vector<std::string> names;
};

struct ParamGroups {
  std::vector<ParamGroup> groups;
  /// Group index per parameter.
  std::vector<std::size_t> group_of;

  const ParamGroup& of(std::size_t param) const { return groups.at(group_of.at(param)); }
  bool is_frozen(std::size_t param) const { return of(param).frozen; }
};

/// Weight decay applies to weight matrices only: norms, biases, position
/// tables, LayerScale factors and relative-position tables are excluded.
/// Layers 0..freeze_k are frozen (the embedding freezes with block 1).
template <typename T>
ParamGroups build_param_groups(const VisionTransformer<T>& model, const TrainConfig& cfg);

/// Base rate before the group multiplier. Linear warmup from 0 over
/// warmup_epochs * steps_per_epoch steps, then cosine to min_lr at the
/// schedule end (total_epochs * steps_per_epoch); later steps stay at min_lr.
double lr_at(std::int64_t step, std::int64_t steps_per_epoch, const TrainConfig& cfg);

template <typename T>
struct OptState {
  std::int64_t step = 0;
  std::vector<AlignedVector<T>> exp_avg;
  std::vector<AlignedVector<T>> exp_avg_sq;
  std::vector<Tensor<T>> shadow;  // EMA weights; empty when EMA is off
  bool swapped = false;

  bool has_ema() const { return !shadow.empty(); }
};

/// Zero moments; the EMA shadow starts as a copy of the current weights when
/// ema_momentum > 0.
template <typename T>
OptState<T> init_opt_state(const std::vector<Parameter<T>>& params, const TrainConfig& cfg);

/// One AdamW step with bias-corrected moments and decoupled decay
/// p <- p (1 - lr_eff wd), lr_eff = lr_base * multiplier. Frozen parameters
/// are untouched. Throws std::domain_error naming the parameter on a
/// non-finite gradient, before anything is modified.
template <typename T>
void adamw_step(std::vector<Parameter<T>>& params, const ParamGroups& groups, OptState<T>& state,
                const TrainConfig& cfg, double lr_base);

/// shadow <- m shadow + (1 - m) p.
template <typename T>
void ema_update(OptState<T>& state, const std::vector<Parameter<T>>& params, double momentum);

/// Runs f with the shadow weights swapped into the model; the raw weights are
/// restored bit-exactly afterwards, also when f throws. Nested use throws
/// std::logic_error.
template <typename T, typename F>
auto with_ema_weights(std::vector<Parameter<T>>& params, OptState<T>& state, F&& f) {
  if (!state.has_ema()) throw std::logic_error("with_ema_weights: no EMA shadow");
  if (state.swapped) throw std::logic_error("with_ema_weights: nested swap");
  if (state.shadow.size() != params.size()) throw ShapeError("with_ema_weights: shadow size drift");
  struct Swap {
    std::vector<Parameter<T>>& p;
    OptState<T>& s;
    Swap(std::vector<Parameter<T>>& params_, OptState<T>& state_) : p(params_), s(state_) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i].value.swap_values(s.shadow[i]);
      s.swapped = true;
    }
    ~Swap() {
      for (std::size_t i = 0; i < p.size(); ++i) p[i].value.swap_values(s.shadow[i]);
      s.swapped = false;
    }
  } swap(params, state);
  return f();
}

extern template ParamGroups build_param_groups(const VisionTransformer<float>&, const TrainConfig&);
extern template ParamGroups build_param_groups(const VisionTransformer<double>&, const TrainConfig&);

}  // namespace vitft

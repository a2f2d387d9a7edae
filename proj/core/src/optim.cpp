// SPDX-License-Identifier: Apache-2.0
#include "vitft/optim.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

namespace vitft {

namespace {
void require(bool ok, const char* field, const char* what) {
  if (!ok) throw std::invalid_argument(std::string(field) + ": " + what);
}
}  // namespace

void TrainConfig::validate() const {
  require(base_lr >= 0 && std::isfinite(base_lr), "base_lr", "must be finite and >= 0");
  require(llrd_decay > 0 && llrd_decay <= 1, "llrd_decay", "must lie in (0, 1]");
  require(weight_decay >= 0, "weight_decay", "must be >= 0");
  require(beta1 >= 0 && beta1 < 1, "beta1", "must lie in [0, 1)");
  require(beta2 >= 0 && beta2 < 1, "beta2", "must lie in [0, 1)");
  require(adam_eps > 0, "adam_eps", "must be > 0");
  require(batch_size > 0, "batch_size", "must be > 0");
  require(accum_steps > 0, "accum_steps", "must be > 0");
  require(total_epochs >= 0, "total_epochs", "must be >= 0");
  require(warmup_epochs >= 0 && (total_epochs == 0 || warmup_epochs < total_epochs),
          "warmup_epochs", "must satisfy 0 <= warmup < total epochs");
  require(ema_momentum >= 0 && ema_momentum < 1, "ema_momentum", "must lie in [0, 1)");
  require(freeze_k >= 0, "freeze_k", "must be >= 0");
  require(min_lr >= 0 && min_lr <= base_lr, "min_lr", "must lie in [0, base_lr]");
}

double llrd_multiplier(int layer, int depth, double decay) {
  if (layer < 0 || layer > depth + 1) throw std::out_of_range("llrd_multiplier: bad layer index");
  const int exponent = depth + 1 - layer;
  return exponent == 0 ? 1.0 : std::pow(decay, exponent);
}

template <typename T>
ParamGroups build_param_groups(const VisionTransformer<T>& model, const TrainConfig& cfg) {
  const int depth = model.config().depth;
  if (cfg.freeze_k > depth) {
    throw std::invalid_argument("freeze_k: cannot exceed depth " + std::to_string(depth));
  }
  ParamGroups out;
  std::map<std::pair<int, bool>, std::size_t> index;
  const auto& params = model.parameters();
  out.group_of.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (p.layer_index < 0 || p.layer_index > depth + 1) {
      throw std::invalid_argument("parameter '" + p.name + "' has no valid layer index");
    }
    const bool wd = p.role == ParamRole::kWeight;
    auto [it, fresh] = index.try_emplace({p.layer_index, wd}, out.groups.size());
    if (fresh) {
      ParamGroup g;
      g.layer_index = p.layer_index;
      g.lr_multiplier = llrd_multiplier(p.layer_index, depth, cfg.llrd_decay);
      g.wd_enabled = wd;
      g.frozen = p.layer_index <= cfg.freeze_k && p.layer_index <= depth && cfg.freeze_k > 0;
      out.groups.push_back(std::move(g));
    }
    out.groups[it->second].params.push_back(i);
    out.groups[it->second].names.push_back(p.name);
    out.group_of[i] = it->second;
  }
  return out;
}

double lr_at(std::int64_t step, std::int64_t steps_per_epoch, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  const std::int64_t warmup = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;
  const std::int64_t total = static_cast<std::int64_t>(cfg.total_epochs) * steps_per_epoch;
  if (step < warmup) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total) return cfg.min_lr;
  if (step == warmup) return cfg.base_lr;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return cfg.min_lr +
         0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
OptState<T> init_opt_state(const std::vector<Parameter<T>>& params, const TrainConfig& cfg) {
  OptState<T> s;
  for (const auto& p : params) {
    s.exp_avg.emplace_back(p.value.size(), T{0});
    s.exp_avg_sq.emplace_back(p.value.size(), T{0});
    if (cfg.ema_momentum > 0) {
      Tensor<T> copy(p.value.shape(), p.value.data());
      s.shadow.push_back(std::move(copy));
    }
  }
  return s;
}

template <typename T>
void adamw_step(std::vector<Parameter<T>>& params, const ParamGroups& groups, OptState<T>& state,
                const TrainConfig& cfg, double lr_base) {
  if (state.swapped) throw std::logic_error("adamw_step: EMA weights are swapped in");
  if (state.exp_avg.size() != params.size() || groups.group_of.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (groups.is_frozen(i)) continue;
    const auto& p = params[i];
    if (!p.value.has_grad()) throw std::logic_error("adamw_step: no gradient for '" + p.name + "'");
    for (T g : p.value.grad()) {
      if (!std::isfinite(g)) throw std::domain_error("non-finite gradient in '" + p.name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T eps = static_cast<T>(cfg.adam_eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamGroup& group = groups.of(i);
    if (group.frozen) continue;
    auto& value = params[i].value;
    const auto grad = std::as_const(value).grad();
    auto& m = state.exp_avg[i];
    auto& v = state.exp_avg_sq[i];
    if (m.size() != value.size()) throw ShapeError("adamw_step: moment shape drift");
    const T lr = static_cast<T>(lr_base * group.lr_multiplier);
    const T decay = group.wd_enabled ? static_cast<T>(1.0 - lr_base * group.lr_multiplier *
                                                              cfg.weight_decay)
                                     : T{1};
    T* w = value.ptr();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const T g = grad[j];
      m[j] = b1 * m[j] + (T{1} - b1) * g;
      v[j] = b2 * v[j] + (T{1} - b2) * g * g;
      const T m_hat = m[j] / bc1;
      const T v_hat = v[j] / bc2;
      w[j] = w[j] * decay - lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

template <typename T>
void ema_update(OptState<T>& state, const std::vector<Parameter<T>>& params, double momentum) {
  if (state.swapped) throw std::logic_error("ema_update: EMA weights are swapped in");
  if (state.shadow.size() != params.size()) throw ShapeError("ema_update: shadow size drift");
  const T mom = static_cast<T>(momentum), rest = static_cast<T>(1.0 - momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& s = state.shadow[i];
    const auto& p = params[i].value;
    if (s.shape() != p.shape()) {
      throw ShapeError("ema_update: shadow shape drift for '" + params[i].name + "'");
    }
    T* sp = s.ptr();
    const T* pp = p.ptr();
    for (std::size_t j = 0; j < s.size(); ++j) sp[j] = mom * sp[j] + rest * pp[j];
  }
}

#define VITFT_INSTANTIATE(T)                                                                  \
  template ParamGroups build_param_groups(const VisionTransformer<T>&, const TrainConfig&);   \
  template OptState<T> init_opt_state(const std::vector<Parameter<T>>&, const TrainConfig&); \
  template void adamw_step(std::vector<Parameter<T>>&, const ParamGroups&, OptState<T>&,      \
                           const TrainConfig&, double);                                       \
  template void ema_update(OptState<T>&, const std::vector<Parameter<T>>&, double);
VITFT_INSTANTIATE(float)
VITFT_INSTANTIATE(double)
#undef VITFT_INSTANTIATE

}  // namespace vitft

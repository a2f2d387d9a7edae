// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "vitft/graph.hpp"
#include "vitft/tensor.hpp"

namespace vitft {

enum class PositionEncoding { kLearnableAbsolute };

struct VitConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int dim = 64;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  int num_classes = 10;
  bool use_rpe = false;
  bool use_layerscale = false;
  double drop_path_rate = 0.0;
  PositionEncoding pe_kind = PositionEncoding::kLearnableAbsolute;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int hidden() const { return static_cast<int>(dim * mlp_ratio); }
};

enum class ParamRole { kWeight, kBias, kNorm, kPosition, kLayerScale, kRelativeBias };

template <typename T>
struct Parameter {
  std::string name;
  int layer_index = 0;  // 0 embed, 1..depth blocks, depth+1 head
  ParamRole role = ParamRole::kWeight;
  Tensor<T> value;
};

enum class Mode { kTrain, kEval };

/// Plain ViT: patch embedding + learnable absolute positions, pre-norm blocks
/// with optional relative position bias and LayerScale, a final norm, mean
/// pooling over patch tokens, then the classification head (LayerNorm + FC).
template <typename T>
class VisionTransformer {
 public:
  /// Deterministic for a fixed (config, seed). The RPE tables (zeros) and
  /// LayerScale factors (ones) draw nothing from the generator, so toggling
  /// them leaves every other parameter bit-identical.
  static VisionTransformer build(const VitConfig& config, std::uint64_t seed);

  const VitConfig& config() const { return config_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  Parameter<T>& param(std::string_view name);
  const Parameter<T>& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  std::size_t num_scalars() const;

  /// Relative-offset index into an (heads, (2g-1)^2) bias table, one entry
  /// per (query, key) token pair.
  const std::vector<std::int64_t>& rpe_index() const { return rpe_index_; }

  /// Convenience forward; builds a throwaway graph.
  Tensor<T> forward(const Tensor<T>& images, Mode mode, std::uint64_t step_seed) const;

  /// Head applied to arbitrary (B, N, D) token features: mean pool, head
  /// LayerNorm, fully-connected layer.
  Tensor<T> classify_tokens(const Tensor<T>& tokens) const;

  template <typename U>
  VisionTransformer<U> cast() const;

 private:
  template <typename U>
  friend class VisionTransformer;

  Parameter<T>& add(std::string name, int layer, ParamRole role, Shape shape, T fill = T{0});

  VitConfig config_;
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t, std::less<>> by_name_;
  std::vector<std::int64_t> rpe_index_;
};

/// A reusable compiled forward (and optionally loss) graph over a model.
///
/// Gradients flow into model parameters whose requires_grad flag is set.
/// The program stores references to the model's tensors: the model must
/// outlive it and must not be moved.
template <typename T>
class VitProgram {
 public:
  VitProgram(VisionTransformer<T>& model, Mode mode, bool with_loss);
  /// Read-only variant for evaluation; no gradients.
  VitProgram(const VisionTransformer<T>& model, Mode mode);

  /// Runs the forward pass. `targets` is required iff the program has a loss.
  const Tensor<T>& run(const Tensor<T>& images, std::uint64_t step_seed,
                       const Tensor<T>* targets = nullptr);
  void backward();

  const Tensor<T>& logits() const { return graph_.value(logits_); }
  T loss() const { return graph_.value(loss_)[0]; }
  bool has_loss() const { return loss_ >= 0; }
  Graph<T>& graph() { return graph_; }

 private:
  void build(const VisionTransformer<T>& model, VisionTransformer<T>* mutable_model, Mode mode,
             bool with_loss);

  const VitConfig config_;
  Mode mode_;
  Graph<T> graph_;
  NodeId images_ = -1;
  NodeId targets_ = -1;
  NodeId logits_ = -1;
  NodeId loss_ = -1;
  std::vector<std::string> mask_names_;
  std::vector<std::unique_ptr<Tensor<T>>> masks_;
};

/// Stochastic depth on a (B, ...) tensor: in train mode each sample is kept
/// with probability 1 - rate and rescaled by 1 / (1 - rate); identity in eval
/// mode. Throws std::invalid_argument unless 0 <= rate < 1.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed);

/// Per-sample drop-path factors (0 or 1/(1-rate)) used by drop_path and by
/// the model's residual branches.
template <typename T>
void drop_path_factors(Tensor<T>& factors, std::int64_t batch, double rate, std::uint64_t seed);

extern template class VisionTransformer<float>;
extern template class VisionTransformer<double>;
extern template class VitProgram<float>;
extern template class VitProgram<double>;

}  // namespace vitft

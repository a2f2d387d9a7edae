// SPDX-License-Identifier: Apache-2.0
#include "vitft/vit.hpp"

#include <cmath>
#include <stdexcept>

#include "vitft/rng.hpp"

namespace vitft {

void VitConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ViTConfig: " + what); };
  if (image_size <= 0 || patch_size <= 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (channels <= 0) fail("channels must be positive");
  if (dim <= 0 || heads <= 0) fail("dim and heads must be positive");
  if (dim % heads != 0) fail("dim must be divisible by heads");
  if (depth < 0) fail("depth must be non-negative");
  if (!(mlp_ratio > 0.0) || hidden() <= 0) fail("mlp_ratio must give a positive hidden width");
  if (num_classes <= 0) fail("num_classes must be positive");
  if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) fail("drop_path_rate must be in [0, 1)");
}

namespace {

std::string block_prefix(int i) { return "blocks." + std::to_string(i) + "."; }

template <typename T>
void trunc_normal(Tensor<T>& t, Rng& rng, double stddev) {
  for (auto& v : t.data()) {
    double x;
    do {
      x = rng.normal(0.0, stddev);
    } while (std::abs(x) > 2.0 * stddev);
    v = static_cast<T>(x);
  }
}

}  // namespace

template <typename T>
Parameter<T>& VisionTransformer<T>::add(std::string name, int layer, ParamRole role, Shape shape,
                                        T fill) {
  if (by_name_.count(name)) throw std::logic_error("duplicate parameter " + name);
  by_name_.emplace(name, params_.size());
  params_.push_back(Parameter<T>{std::move(name), layer, role, Tensor<T>(std::move(shape), fill)});
  return params_.back();
}

template <typename T>
VisionTransformer<T> VisionTransformer<T>::build(const VitConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  VisionTransformer m;
  m.config_ = cfg;
  const std::int64_t d = cfg.dim, pd = static_cast<std::int64_t>(cfg.channels) * cfg.patch_size *
                                           cfg.patch_size;
  const std::int64_t hid = cfg.hidden(), ntok = cfg.tokens(), g = cfg.grid();
  const std::int64_t span = 2 * g - 1;
  const int head_layer = cfg.depth + 1;
  // Reserve so that references handed out during construction stay valid.
  m.params_.reserve(static_cast<std::size_t>(5 + cfg.depth * 16 + 4));
  Rng rng(seed);
  constexpr double kStd = 0.02;

  trunc_normal(m.add("patch_embed.weight", 0, ParamRole::kWeight, {pd, d}).value, rng, kStd);
  m.add("patch_embed.bias", 0, ParamRole::kBias, {d});
  trunc_normal(m.add("pos_embed", 0, ParamRole::kPosition, {ntok, d}).value, rng, kStd);

  for (int i = 0; i < cfg.depth; ++i) {
    const std::string p = block_prefix(i);
    const int layer = i + 1;
    m.add(p + "norm1.weight", layer, ParamRole::kNorm, {d}, T{1});
    m.add(p + "norm1.bias", layer, ParamRole::kNorm, {d});
    trunc_normal(m.add(p + "attn.qkv.weight", layer, ParamRole::kWeight, {d, 3 * d}).value, rng,
                 kStd);
    m.add(p + "attn.qkv.bias", layer, ParamRole::kBias, {3 * d});
    if (cfg.use_rpe) {
      m.add(p + "attn.rpe_table", layer, ParamRole::kRelativeBias, {cfg.heads, span * span});
    }
    trunc_normal(m.add(p + "attn.proj.weight", layer, ParamRole::kWeight, {d, d}).value, rng, kStd);
    m.add(p + "attn.proj.bias", layer, ParamRole::kBias, {d});
    if (cfg.use_layerscale) m.add(p + "ls1.gamma", layer, ParamRole::kLayerScale, {d}, T{1});
    m.add(p + "norm2.weight", layer, ParamRole::kNorm, {d}, T{1});
    m.add(p + "norm2.bias", layer, ParamRole::kNorm, {d});
    trunc_normal(m.add(p + "mlp.fc1.weight", layer, ParamRole::kWeight, {d, hid}).value, rng, kStd);
    m.add(p + "mlp.fc1.bias", layer, ParamRole::kBias, {hid});
    trunc_normal(m.add(p + "mlp.fc2.weight", layer, ParamRole::kWeight, {hid, d}).value, rng, kStd);
    m.add(p + "mlp.fc2.bias", layer, ParamRole::kBias, {d});
    if (cfg.use_layerscale) m.add(p + "ls2.gamma", layer, ParamRole::kLayerScale, {d}, T{1});
  }

  m.add("norm.weight", head_layer, ParamRole::kNorm, {d}, T{1});
  m.add("norm.bias", head_layer, ParamRole::kNorm, {d});
  m.add("head.norm.weight", head_layer, ParamRole::kNorm, {d}, T{1});
  m.add("head.norm.bias", head_layer, ParamRole::kNorm, {d});
  trunc_normal(m.add("head.fc.weight", head_layer, ParamRole::kWeight, {d, cfg.num_classes}).value,
               rng, 0.01);
  m.add("head.fc.bias", head_layer, ParamRole::kBias, {cfg.num_classes});

  if (cfg.use_rpe) {
    m.rpe_index_.reserve(static_cast<std::size_t>(ntok * ntok));
    for (std::int64_t q = 0; q < ntok; ++q)
      for (std::int64_t k = 0; k < ntok; ++k) {
        const std::int64_t dy = q / g - k / g + g - 1;
        const std::int64_t dx = q % g - k % g + g - 1;
        m.rpe_index_.push_back(dy * span + dx);
      }
  }
  return m;
}

template <typename T>
Parameter<T>& VisionTransformer<T>::param(std::string_view name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return params_[it->second];
}

template <typename T>
const Parameter<T>& VisionTransformer<T>::param(std::string_view name) const {
  return const_cast<VisionTransformer*>(this)->param(name);
}

template <typename T>
bool VisionTransformer<T>::has_param(std::string_view name) const {
  return by_name_.find(name) != by_name_.end();
}

template <typename T>
std::size_t VisionTransformer<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
template <typename U>
VisionTransformer<U> VisionTransformer<T>::cast() const {
  VisionTransformer<U> out;
  out.config_ = config_;
  out.rpe_index_ = rpe_index_;
  out.params_.reserve(params_.size());
  for (const auto& p : params_) {
    out.by_name_.emplace(p.name, out.params_.size());
    out.params_.push_back(Parameter<U>{p.name, p.layer_index, p.role, p.value.template cast<U>()});
  }
  return out;
}

template <typename T>
Tensor<T> VisionTransformer<T>::forward(const Tensor<T>& images, Mode mode,
                                        std::uint64_t step_seed) const {
  VitProgram<T> program(*this, mode);
  return program.run(images, step_seed);
}

template <typename T>
Tensor<T> VisionTransformer<T>::classify_tokens(const Tensor<T>& tokens) const {
  Graph<T> g;
  const NodeId x = g.input("tokens");
  const NodeId pooled = g.mean_tokens(x);
  const NodeId hn = g.layernorm(pooled, g.constant("head.norm.weight", param("head.norm.weight").value),
                                g.constant("head.norm.bias", param("head.norm.bias").value));
  const NodeId logits = g.add(g.matmul(hn, g.constant("head.fc.weight", param("head.fc.weight").value)),
                              g.constant("head.fc.bias", param("head.fc.bias").value));
  g.forward({{"tokens", &tokens}});
  return g.value(logits);
}

template <typename T>
void drop_path_factors(Tensor<T>& factors, std::int64_t batch, double rate, std::uint64_t seed) {
  factors.resize(Shape{batch});
  Rng rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::int64_t i = 0; i < batch; ++i) {
    factors[static_cast<std::size_t>(i)] = rng.bernoulli(1.0 - rate) ? keep_scale : T{0};
  }
}

template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("drop_path: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::kEval || rate == 0.0 || x.rank() == 0) return x;
  Tensor<T> factors;
  drop_path_factors(factors, x.dim(0), rate, seed);
  Tensor<T> out(x.shape());
  const std::size_t per = x.size() / static_cast<std::size_t>(std::max<std::int64_t>(x.dim(0), 1));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factors[i / per];
  return out;
}

template <typename T>
VitProgram<T>::VitProgram(VisionTransformer<T>& model, Mode mode, bool with_loss)
    : config_(model.config()), mode_(mode) {
  build(model, &model, mode, with_loss);
}

template <typename T>
VitProgram<T>::VitProgram(const VisionTransformer<T>& model, Mode mode)
    : config_(model.config()), mode_(mode) {
  build(model, nullptr, mode, false);
}

template <typename T>
void VitProgram<T>::build(const VisionTransformer<T>& model, VisionTransformer<T>* mut, Mode mode,
                          bool with_loss) {
  const VitConfig& c = config_;
  Graph<T>& g = graph_;
  auto p = [&](const std::string& name) -> NodeId {
    if (mut) return g.leaf(name, mut->param(name).value);
    return g.constant(name, model.param(name).value);
  };
  const bool drop = mode == Mode::kTrain && c.drop_path_rate > 0.0;
  auto residual = [&](NodeId x, NodeId branch, const std::string& mask_name) {
    if (drop) {
      mask_names_.push_back(mask_name);
      masks_.push_back(std::make_unique<Tensor<T>>());
      branch = g.sample_scale(branch, g.input(mask_name));
    }
    return g.add(x, branch);
  };
  const std::int64_t d = c.dim, dh = c.dim / c.heads, ntok = c.tokens();

  images_ = g.input("images");
  NodeId x = g.add(g.matmul(g.patchify(images_, c.patch_size), p("patch_embed.weight")),
                   p("patch_embed.bias"));
  x = g.add(x, p("pos_embed"));

  for (int i = 0; i < c.depth; ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    NodeId h = g.layernorm(x, p(pre + "norm1.weight"), p(pre + "norm1.bias"));
    NodeId qkv = g.add(g.matmul(h, p(pre + "attn.qkv.weight")), p(pre + "attn.qkv.bias"));
    NodeId q = g.scale(g.split_heads(g.slice_last(qkv, 0, d), c.heads),
                       1.0 / std::sqrt(static_cast<double>(dh)));
    NodeId k = g.split_heads(g.slice_last(qkv, d, d), c.heads);
    NodeId v = g.split_heads(g.slice_last(qkv, 2 * d, d), c.heads);
    NodeId scores = g.batch_matmul(q, k, /*transpose_rhs=*/true);
    if (c.use_rpe) {
      scores = g.add(scores, g.gather_last(p(pre + "attn.rpe_table"), model.rpe_index(),
                                           Shape{ntok, ntok}));
    }
    NodeId attn = g.merge_heads(g.batch_matmul(g.softmax(scores), v));
    NodeId out = g.add(g.matmul(attn, p(pre + "attn.proj.weight")), p(pre + "attn.proj.bias"));
    if (c.use_layerscale) out = g.mul(out, p(pre + "ls1.gamma"));
    x = residual(x, out, pre + "drop_path.attn");

    h = g.layernorm(x, p(pre + "norm2.weight"), p(pre + "norm2.bias"));
    h = g.gelu(g.add(g.matmul(h, p(pre + "mlp.fc1.weight")), p(pre + "mlp.fc1.bias")));
    out = g.add(g.matmul(h, p(pre + "mlp.fc2.weight")), p(pre + "mlp.fc2.bias"));
    if (c.use_layerscale) out = g.mul(out, p(pre + "ls2.gamma"));
    x = residual(x, out, pre + "drop_path.mlp");
  }

  x = g.layernorm(x, p("norm.weight"), p("norm.bias"));
  NodeId pooled = g.layernorm(g.mean_tokens(x), p("head.norm.weight"), p("head.norm.bias"));
  logits_ = g.add(g.matmul(pooled, p("head.fc.weight")), p("head.fc.bias"));
  if (with_loss) {
    targets_ = g.input("targets");
    loss_ = g.cross_entropy(logits_, targets_);
  }
}

template <typename T>
const Tensor<T>& VitProgram<T>::run(const Tensor<T>& images, std::uint64_t step_seed,
                                    const Tensor<T>* targets) {
  const VitConfig& c = config_;
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw std::invalid_argument("ViT forward: expected images (B, " + std::to_string(c.channels) +
                                ", " + std::to_string(c.image_size) + ", " +
                                std::to_string(c.image_size) + "), got " +
                                shape_str(images.shape()));
  }
  Feeds<T> feeds{{"images", &images}};
  if (loss_ >= 0) {
    if (targets == nullptr) throw std::invalid_argument("ViT forward: loss program needs targets");
    feeds.emplace("targets", targets);
  }
  for (std::size_t i = 0; i < masks_.size(); ++i) {
    drop_path_factors(*masks_[i], images.dim(0), c.drop_path_rate, mix_seed({step_seed, i}));
    feeds.emplace(mask_names_[i], masks_[i].get());
  }
  graph_.forward(feeds);
  return graph_.value(logits_);
}

template <typename T>
void VitProgram<T>::backward() {
  if (loss_ < 0) throw std::logic_error("VitProgram::backward: program has no loss");
  graph_.backward(loss_);
}

template class VisionTransformer<float>;
template class VisionTransformer<double>;
template class VitProgram<float>;
template class VitProgram<double>;
template VisionTransformer<double> VisionTransformer<float>::cast<double>() const;
template VisionTransformer<float> VisionTransformer<double>::cast<float>() const;
template VisionTransformer<float> VisionTransformer<float>::cast<float>() const;
template VisionTransformer<double> VisionTransformer<double>::cast<double>() const;
template Tensor<float> drop_path(const Tensor<float>&, double, Mode, std::uint64_t);
template Tensor<double> drop_path(const Tensor<double>&, double, Mode, std::uint64_t);
template void drop_path_factors(Tensor<float>&, std::int64_t, double, std::uint64_t);
template void drop_path_factors(Tensor<double>&, std::int64_t, double, std::uint64_t);

}  // namespace vitft

// SPDX-License-Identifier: Apache-2.0
#include "vitft/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>

namespace vitft {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename N>
N parse_number(std::string_view key, std::string_view text) {
  const std::string t = trim(text);
  N value{};
  const auto res = std::from_chars(t.data(), t.data() + t.size(), value);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ConfigError(std::string(key) + ": cannot parse '" + t + "' as a number");
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  const std::string t = trim(text);
  if (t == "yes" || t == "true" || t == "1" || t == "on") return true;
  if (t == "no" || t == "false" || t == "0" || t == "off") return false;
  throw ConfigError(std::string(key) + ": expected yes/no, got '" + t + "'");
}

void expect_choice(std::string_view key, std::string_view text, std::string_view only) {
  const std::string t = trim(text);
  if (t != only) {
    throw ConfigError(std::string(key) + ": only '" + std::string(only) + "' is supported, got '" +
                      t + "'");
  }
}

std::array<double, 3> parse_triple(std::string_view key, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::array<double, 3> out{};
  std::string tok;
  for (double& v : out) {
    if (!(in >> tok)) throw ConfigError(std::string(key) + ": expected three numbers");
    v = parse_number<double>(key, tok);
  }
  if (in >> tok) throw ConfigError(std::string(key) + ": expected three numbers");
  return out;
}

std::string fmt_triple(const std::array<double, 3>& v) {
  return fmt_double(v[0]) + " " + fmt_double(v[1]) + " " + fmt_double(v[2]);
}

struct Key {
  std::string name;
  bool affects_results;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define VITFT_NUM(KEY, FIELD, TYPE)                                                      \
  Key {                                                                                  \
    KEY, true, [](RunConfig& c, std::string_view v) { c.FIELD = parse_number<TYPE>(KEY, v); }, \
        [](const RunConfig& c) {                                                         \
          if constexpr (std::is_floating_point_v<TYPE>) {                                \
            return fmt_double(static_cast<double>(c.FIELD));                             \
          } else {                                                                       \
            return std::to_string(c.FIELD);                                              \
          }                                                                              \
        }                                                                                \
  }
#define VITFT_BOOL(KEY, FIELD)                                                         \
  Key {                                                                                \
    KEY, true, [](RunConfig& c, std::string_view v) { c.FIELD = parse_bool(KEY, v); }, \
        [](const RunConfig& c) { return std::string(c.FIELD ? "yes" : "no"); }         \
  }
#define VITFT_TEXT(KEY, FIELD, AFFECTS)                                                   \
  Key {                                                                                   \
    KEY, AFFECTS, [](RunConfig& c, std::string_view v) { c.FIELD = trim(v); },           \
        [](const RunConfig& c) { return c.FIELD; }                                        \
  }
#define VITFT_FIXED(KEY, VALUE)                                                                \
  Key {                                                                                        \
    KEY, true, [](RunConfig&, std::string_view v) { expect_choice(KEY, v, VALUE); },          \
        [](const RunConfig&) { return std::string(VALUE); }                                    \
  }

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      // optimisation
      VITFT_FIXED("optimizer", "adamw"),
      VITFT_NUM("base_learning_rate", train.base_lr, double),
      VITFT_NUM("layer_wise_lr_decay", train.llrd_decay, double),
      VITFT_NUM("weight_decay", train.weight_decay, double),
      VITFT_NUM("optimizer_momentum_beta1", train.beta1, double),
      VITFT_NUM("optimizer_momentum_beta2", train.beta2, double),
      VITFT_NUM("adam_eps", train.adam_eps, double),
      VITFT_NUM("batch_size", train.batch_size, int),
      VITFT_NUM("accum_steps", train.accum_steps, int),
      VITFT_FIXED("learning_rate_schedule", "cosine"),
      VITFT_NUM("warmup_epochs", train.warmup_epochs, int),
      VITFT_NUM("training_epochs", train.total_epochs, int),
      VITFT_NUM("min_lr", train.min_lr, double),
      VITFT_NUM("ema", train.ema_momentum, double),
      VITFT_NUM("freeze_k", train.freeze_k, int),
      VITFT_NUM("tuned_layers", tuned_layers, int),
      VITFT_NUM("random_seed", train.seed, std::uint64_t),
      // augmentation
      Key{"augmentation", true,
          [](RunConfig& c, std::string_view v) {
            try {
              c.aug.policy_kind = parse_policy(trim(v));
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("augmentation: ") + e.what());
            }
          },
          [](const RunConfig& c) { return std::string(policy_name(c.aug.policy_kind)); }},
      VITFT_NUM("randaug_m", aug.randaug_m, double),
      VITFT_NUM("randaug_n", aug.randaug_n, int),
      VITFT_NUM("randaug_mstd", aug.randaug_mstd, double),
      VITFT_NUM("label_smoothing", aug.smoothing_eps, double),
      VITFT_NUM("mixup", aug.mixup_alpha, double),
      VITFT_NUM("cutmix", aug.cutmix_alpha, double),
      VITFT_NUM("random_erase", aug.erase_prob, double),
      VITFT_FIXED("random_erase_mode", "pixel"),
      VITFT_NUM("crop_scale_lo", aug.crop_scale_lo, double),
      VITFT_NUM("crop_scale_hi", aug.crop_scale_hi, double),
      Key{"norm_mean", true,
          [](RunConfig& c, std::string_view v) { c.aug.norm.mean = parse_triple("norm_mean", v); },
          [](const RunConfig& c) { return fmt_triple(c.aug.norm.mean); }},
      Key{"norm_std", true,
          [](RunConfig& c, std::string_view v) { c.aug.norm.stdev = parse_triple("norm_std", v); },
          [](const RunConfig& c) { return fmt_triple(c.aug.norm.stdev); }},
      // model
      VITFT_NUM("image_size", model.image_size, int),
      VITFT_NUM("patch_size", model.patch_size, int),
      VITFT_NUM("dim", model.dim, int),
      VITFT_NUM("depth", model.depth, int),
      VITFT_NUM("heads", model.heads, int),
      VITFT_NUM("mlp_ratio", model.mlp_ratio, double),
      VITFT_NUM("num_classes", model.num_classes, int),
      VITFT_NUM("drop_path", model.drop_path_rate, double),
      VITFT_BOOL("layer_scale", model.use_layerscale),
      VITFT_BOOL("relative_position_bias", model.use_rpe),
      VITFT_FIXED("position_encoding", "learnable-absolute"),
      // data
      VITFT_TEXT("dataset", data.kind, true),
      VITFT_NUM("train_per_class", data.train_per_class, int),
      VITFT_NUM("val_per_class", data.val_per_class, int),
      VITFT_NUM("train_subset_per_class", data.train_subset_per_class, int),
      VITFT_NUM("dataset_seed", data.seed, std::uint64_t),
      VITFT_NUM("synth_noise", data.synth.noise, double),
      VITFT_NUM("synth_blobs_lo", data.synth.blobs_lo, int),
      VITFT_NUM("synth_blobs_hi", data.synth.blobs_hi, int),
      VITFT_NUM("synth_orientation_jitter", data.synth.orientation_jitter, double),
      VITFT_TEXT("train_root", data.train_root, true),
      VITFT_TEXT("val_root", data.val_root, true),
      // run
      VITFT_BOOL("track_train_acc", track_train_acc),
      Key{"prefetch", false,
          [](RunConfig& c, std::string_view v) { c.prefetch = parse_number<int>("prefetch", v); },
          [](const RunConfig& c) { return std::to_string(c.prefetch); }},
      VITFT_TEXT("out_dir", out_dir, false),
  };
  return keys;
}

#undef VITFT_NUM
#undef VITFT_BOOL
#undef VITFT_TEXT
#undef VITFT_FIXED

const Key& find_key(std::string_view name) {
  for (const auto& k : registry()) {
    if (k.name == name) return k;
  }
  throw ConfigError("unknown config key '" + std::string(name) + "'");
}

RunConfig common_preset() {
  RunConfig c;
  c.train.weight_decay = 0.05;
  c.train.beta1 = 0.9;
  c.train.beta2 = 0.999;
  c.train.batch_size = 2048;
  c.train.seed = 0;
  c.aug.randaug_m = 9;
  c.aug.randaug_n = 2;
  c.aug.randaug_mstd = 0.5;
  c.aug.smoothing_eps = 0.1;
  c.aug.erase_prob = 0.25;
  c.aug.erase_mode = EraseMode::kPixel;
  c.model.drop_path_rate = 0;
  c.model.use_layerscale = false;
  c.model.pe_kind = PositionEncoding::kLearnableAbsolute;
  return c;
}

}  // namespace

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& k : registry()) out.push_back(k.name);
    return out;
  }();
  return names;
}

void RunConfig::set(std::string_view key, std::string_view value) { find_key(key).set(*this, value); }

std::string RunConfig::get(std::string_view key) const { return find_key(key).get(*this); }

TrainConfig RunConfig::resolved_train() const {
  TrainConfig t = train;
  if (tuned_layers >= 0) t.freeze_k = model.depth - tuned_layers;
  return t;
}

void RunConfig::validate() const {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(section) + " " + e.what());
    }
  };
  wrap("model:", [&] { model.validate(); });
  wrap("train:", [&] { resolved_train().validate(); });
  wrap("augmentation:", [&] { aug.validate(); });
  if (tuned_layers > model.depth) throw ConfigError("tuned_layers: cannot exceed depth");
  if (train.freeze_k > model.depth) throw ConfigError("freeze_k: cannot exceed depth");
  if (data.kind != "synth" && data.kind != "folder") {
    throw ConfigError("dataset: expected 'synth' or 'folder', got '" + data.kind + "'");
  }
  if (data.kind == "synth" && (data.train_per_class <= 0 || data.val_per_class <= 0)) {
    throw ConfigError("train_per_class/val_per_class: must be positive");
  }
  if (data.kind == "folder" && (data.train_root.empty() || data.val_root.empty())) {
    throw ConfigError("train_root/val_root: required for folder datasets");
  }
  if (data.train_subset_per_class < 0) throw ConfigError("train_subset_per_class: must be >= 0");
  if (prefetch < 0) throw ConfigError("prefetch: must be >= 0");
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& k : registry()) {
    if (!k.affects_results) continue;
    out += k.name + " = " + k.get(*this) + "\n";
  }
  return out;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"baseline", "recipe-base", "recipe-large"};
  return names;
}

RunConfig preset_config(std::string_view name) {
  RunConfig c = common_preset();
  if (name == "baseline") {
    c.train.base_lr = 1e-3;
    c.train.llrd_decay = 1.0;
    c.train.warmup_epochs = 20;
    c.train.total_epochs = 100;
    c.train.ema_momentum = 0.0;
    c.aug.mixup_alpha = 0.8;
    c.aug.cutmix_alpha = 1.0;
    return c;
  }
  if (name == "recipe-base" || name == "recipe-large") {
    const bool large = name == "recipe-large";
    c.train.base_lr = large ? 4e-4 : 6e-4;
    c.train.llrd_decay = large ? 0.65 : 0.6;
    c.train.warmup_epochs = large ? 5 : 10;
    c.train.total_epochs = large ? 30 : 50;
    c.train.ema_momentum = 0.9998;
    c.aug.mixup_alpha = 0.0;
    c.aug.cutmix_alpha = 0.0;
    return c;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

RunConfig parse_config(std::istream& in, RunConfig base) {
  RunConfig c = std::move(base);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    try {
      if (key == "preset") {
        const std::string out_dir = c.out_dir;
        c = preset_config(value);
        c.out_dir = out_dir;
      } else {
        c.set(key, value);
      }
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, std::move(base));
}

DatasetPair load_datasets(const RunConfig& cfg) {
  DatasetPair out;
  const auto& d = cfg.data;
  if (d.kind == "synth") {
    out.train = synth_dataset(cfg.model.num_classes, d.train_per_class, cfg.model.image_size, d.seed,
                              Split::kTrain, d.synth);
    out.val = synth_dataset(cfg.model.num_classes, d.val_per_class, cfg.model.image_size, d.seed,
                            Split::kVal, d.synth);
  } else {
    out.train = load_folder(d.train_root, cfg.model.image_size);
    out.val = load_folder(d.val_root, cfg.model.image_size);
    out.val.split = Split::kVal;
    if (out.train.class_names != out.val.class_names) {
      throw ConfigError("train_root and val_root have different class directories");
    }
    if (out.train.num_classes != cfg.model.num_classes) {
      throw ConfigError("num_classes: dataset has " + std::to_string(out.train.num_classes) +
                        " classes");
    }
  }
  if (d.train_subset_per_class > 0) out.train = out.train.subset_per_class(d.train_subset_per_class);
  return out;
}

}  // namespace vitft

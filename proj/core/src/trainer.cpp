// SPDX-License-Identifier: Apache-2.0
#include "vitft/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "vitft/archive.hpp"
#include "vitft/graph.hpp"
#include "vitft/rng.hpp"

namespace vitft {

namespace {

enum SeedStream : std::uint64_t { kOrder = 1, kSample = 2, kMix = 3, kDropPath = 4 };

std::string format_row(const MetricRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%.4f,%.4f,%.6e", r.epoch, r.train_loss, r.val_acc_raw,
                r.val_acc_ema, r.lr);
  return buf;
}

/// Normalised eval-transform tensor for a whole dataset.
Tensor<float> eval_tensor(const Dataset& data, int image_size, const Normalization& norm) {
  const std::int64_t n = static_cast<std::int64_t>(data.size());
  const std::int64_t per = 3LL * image_size * image_size;
  Tensor<float> out({n, 3, image_size, image_size});
  for (std::int64_t i = 0; i < n; ++i) {
    const Image x = eval_transform(data.images[static_cast<std::size_t>(i)], image_size);
    to_chw(x, norm, std::span<float>(out.ptr() + i * per, static_cast<std::size_t>(per)));
  }
  return out;
}

double accuracy(VitProgram<float>& program, const Tensor<float>& images,
                const std::vector<int>& labels, int batch) {
  const std::int64_t n = images.dim(0);
  if (n == 0) throw std::invalid_argument("evaluate: empty dataset");
  const std::int64_t per = static_cast<std::int64_t>(images.size()) / n;
  std::int64_t hits = 0;
  Tensor<float> chunk;
  for (std::int64_t start = 0; start < n; start += batch) {
    const std::int64_t b = std::min<std::int64_t>(batch, n - start);
    Shape shape = images.shape();
    shape[0] = b;
    chunk.resize(shape);
    std::copy_n(images.ptr() + start * per, b * per, chunk.ptr());
    const Tensor<float>& logits = program.run(chunk, 0);
    const std::int64_t k = logits.dim(1);
    for (std::int64_t i = 0; i < b; ++i) {
      const float* row = logits.ptr() + i * k;
      const auto pred = std::max_element(row, row + k) - row;
      hits += pred == labels[static_cast<std::size_t>(start + i)];
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

template <typename Item>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {}

  void push(Item item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
  }
  std::optional<Item> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    Item item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<Item> items_;
  bool closed_ = false;
};

ParamGroups checked_groups(const VisionTransformer<float>& model, const TrainConfig& cfg,
                           const AugPolicy& policy) {
  cfg.validate();
  policy.validate();
  return build_param_groups(model, cfg);
}

VisionTransformer<float>& mark_trainable(VisionTransformer<float>& model, const ParamGroups& groups) {
  auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].value.set_requires_grad(!groups.is_frozen(i));
  }
  return model;
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<MetricRecord>& records) {
  out << kMetricsHeader << '\n';
  for (const auto& r : records) out << format_row(r) << '\n';
}

std::string metrics_csv(const std::vector<MetricRecord>& records) {
  std::ostringstream out;
  write_metrics_csv(out, records);
  return out.str();
}

std::vector<MetricRecord> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw std::runtime_error("metrics csv: missing or unexpected header");
  }
  std::vector<MetricRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    MetricRecord r;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf%c", &r.epoch, &r.train_loss, &r.val_acc_raw,
                    &r.val_acc_ema, &r.lr, &tail) != 5) {
      throw std::runtime_error("metrics csv: malformed row at line " + std::to_string(lineno));
    }
    out.push_back(r);
  }
  return out;
}

template <typename T>
T soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  Graph<T> g;
  const NodeId z = g.input("logits");
  const NodeId t = g.input("targets");
  const NodeId loss = g.cross_entropy(z, t);
  g.forward({{"logits", &logits}, {"targets", &targets}});
  return g.value(loss)[0];
}
template float soft_cross_entropy(const Tensor<float>&, const Tensor<float>&);
template double soft_cross_entropy(const Tensor<double>&, const Tensor<double>&);

double evaluate(const VisionTransformer<float>& model, const Dataset& data,
                const Normalization& norm, int batch) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  VitProgram<float> program(model, Mode::kEval);
  return accuracy(program, eval_tensor(data, model.config().image_size, norm), data.labels, batch);
}

// ---------------------------------------------------------------- Trainer

struct Trainer::Prepared {
  std::int64_t step = 0;
  Tensor<float> images;
  Tensor<float> targets;
};

Trainer::Trainer(VisionTransformer<float>& model, const Dataset& train, const Dataset& val,
                 TrainConfig cfg, AugPolicy policy, FitOptions options)
    : model_(model),
      train_(train),
      val_(val),
      cfg_(cfg),
      policy_(policy),
      options_(std::move(options)),
      groups_(checked_groups(model, cfg_, policy_)),
      state_(init_opt_state(model.parameters(), cfg_)),
      program_(mark_trainable(model, groups_),
               Mode::kTrain, true) {
  train_.validate();
  val_.validate();
  if (train_.num_classes != model.config().num_classes) {
    throw std::invalid_argument("train set has " + std::to_string(train_.num_classes) +
                                " classes, model expects " +
                                std::to_string(model.config().num_classes));
  }
  if (cfg_.batch_size % cfg_.accum_steps != 0) {
    throw std::invalid_argument("batch_size must be divisible by accum_steps");
  }
}

Trainer::~Trainer() = default;

std::int64_t Trainer::steps_per_epoch() const {
  const auto n = static_cast<std::int64_t>(train_.size());
  return std::max<std::int64_t>(1, n / cfg_.batch_size);
}

std::vector<std::size_t> Trainer::epoch_order(int epoch) const {
  std::vector<std::size_t> order(train_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed({cfg_.seed, kOrder, static_cast<std::uint64_t>(epoch)}));
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

void Trainer::make_batch(int epoch, std::span<const std::size_t> indices, Tensor<float>& images,
                         Tensor<float>& targets) const {
  const int s = model_.config().image_size;
  const auto b = static_cast<std::int64_t>(indices.size());
  const std::size_t per = 3ULL * s * s;
  images.resize({b, 3, s, s});
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t idx = indices[i];
    const std::uint64_t seed = mix_seed({cfg_.seed, kSample, static_cast<std::uint64_t>(epoch), idx});
    train_transform(train_.images[idx], policy_, s, seed,
                    std::span<float>(images.ptr() + i * per, per));
    labels.push_back(train_.labels[idx]);
  }
  targets = smooth_targets(labels, model_.config().num_classes, policy_.smoothing_eps);
}

Trainer::Prepared Trainer::prepare(int epoch, std::int64_t step,
                                   const std::vector<std::size_t>& order) const {
  const auto n = static_cast<std::int64_t>(order.size());
  const std::int64_t b = std::min<std::int64_t>(cfg_.batch_size, n);
  const std::span<const std::size_t> idx(order.data() + step * b, static_cast<std::size_t>(b));
  Prepared p;
  p.step = step;
  Tensor<float> images, targets;
  make_batch(epoch, idx, images, targets);
  Rng rng(mix_seed({cfg_.seed, kMix, static_cast<std::uint64_t>(epoch),
                    static_cast<std::uint64_t>(step)}));
  MixedBatch mixed = mix_batch(images, targets, policy_, rng);
  p.images = std::move(mixed.images);
  p.targets = std::move(mixed.targets);
  return p;
}

void Trainer::run_epoch() {
  const int epoch = epoch_;
  const std::int64_t spe = steps_per_epoch();
  const auto order = epoch_order(epoch);
  auto& params = model_.parameters();

  BoundedQueue<Prepared> queue(static_cast<std::size_t>(std::max(options_.prefetch, 1)));
  std::thread worker;
  std::exception_ptr worker_error;
  if (options_.prefetch > 0) {
    worker = std::thread([&] {
      try {
        for (std::int64_t s = 0; s < spe; ++s) queue.push(prepare(epoch, s, order));
      } catch (...) {
        worker_error = std::current_exception();
      }
      queue.close();
    });
  }
  struct Joiner {
    BoundedQueue<Prepared>& q;
    std::thread& t;
    ~Joiner() {
      q.close();
      if (t.joinable()) t.join();
    }
  } joiner{queue, worker};

  const int accum = cfg_.accum_steps;
  double loss_sum = 0;
  std::int64_t samples = 0;
  double lr = 0;
  Tensor<float> micro_images, micro_targets;
  for (std::int64_t s = 0; s < spe; ++s) {
    Prepared batch;
    if (options_.prefetch > 0) {
      auto item = queue.pop();
      if (!item) {
        if (worker_error) std::rethrow_exception(worker_error);
        throw std::runtime_error("batch worker stopped early");
      }
      batch = std::move(*item);
    } else {
      batch = prepare(epoch, s, order);
    }
    const std::uint64_t step_seed = mix_seed({cfg_.seed, kDropPath, static_cast<std::uint64_t>(state_.step)});
    for (auto& p : params) p.value.zero_grad();
    const std::int64_t b = batch.images.dim(0);
    const std::int64_t micro = std::max<std::int64_t>(1, b / accum);
    double batch_loss = 0;
    int micro_count = 0;
    for (std::int64_t start = 0; start < b; start += micro, ++micro_count) {
      const std::int64_t mb = std::min(micro, b - start);
      const float* img_src = batch.images.ptr();
      const float* tgt_src = batch.targets.ptr();
      const std::int64_t img_per = static_cast<std::int64_t>(batch.images.size()) / b;
      const std::int64_t k = batch.targets.dim(1);
      if (mb == b) {
        program_.run(batch.images, mix_seed({step_seed, static_cast<std::uint64_t>(micro_count)}), &batch.targets);
      } else {
        Shape shape = batch.images.shape();
        shape[0] = mb;
        micro_images.resize(shape);
        micro_targets.resize({mb, k});
        std::copy_n(img_src + start * img_per, mb * img_per, micro_images.ptr());
        std::copy_n(tgt_src + start * k, mb * k, micro_targets.ptr());
        program_.run(micro_images, mix_seed({step_seed, static_cast<std::uint64_t>(micro_count)}), &micro_targets);
      }
      const double loss = program_.loss();
      if (!std::isfinite(loss)) throw NonFiniteLoss(epoch, state_.step);
      program_.backward();
      batch_loss += loss * static_cast<double>(mb);
    }
    if (micro_count > 1) {
      const float inv = 1.0F / static_cast<float>(micro_count);
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (groups_.is_frozen(i)) continue;
        for (float& g : params[i].value.grad()) g *= inv;
      }
    }
    lr = lr_at(state_.step, spe, cfg_);
    adamw_step(params, groups_, state_, cfg_, lr);
    if (state_.has_ema()) ema_update(state_, params, cfg_.ema_momentum);
    loss_sum += batch_loss;
    samples += b;
  }

  MetricRecord r;
  r.epoch = epoch;
  r.train_loss = samples ? loss_sum / static_cast<double>(samples) : 0.0;
  r.val_acc_raw = evaluate_raw(val_);
  r.val_acc_ema = evaluate_ema(val_);
  r.lr = lr;
  if (options_.track_train_acc) r.train_acc = evaluate_raw(train_);
  metrics_.push_back(r);
  ++epoch_;
  if (options_.progress) {
    *options_.progress << "epoch " << r.epoch << " loss " << r.train_loss << " val_raw "
                       << r.val_acc_raw << " val_ema " << r.val_acc_ema << " lr " << r.lr;
    if (r.train_acc) *options_.progress << " train_acc " << *r.train_acc;
    *options_.progress << '\n';
  }
  if (options_.on_epoch) options_.on_epoch(r);
}

FitResult Trainer::fit() {
  while (epoch_ < cfg_.total_epochs &&
         (options_.stop_after_epochs < 0 || epoch_ < options_.stop_after_epochs)) {
    run_epoch();
    if (options_.checkpoint) save_checkpoint(*options_.checkpoint);
  }
  FitResult out;
  out.metrics = metrics_;
  for (const auto& r : metrics_) {
    out.best_raw = std::max(out.best_raw, r.val_acc_raw);
    out.best_ema = std::max(out.best_ema, r.val_acc_ema);
  }
  return out;
}

double Trainer::evaluate_raw(const Dataset& data) {
  return evaluate(model_, data, policy_.norm, options_.eval_batch);
}

double Trainer::evaluate_ema(const Dataset& data) {
  if (!state_.has_ema()) return evaluate_raw(data);
  return with_ema_weights(model_.parameters(), state_, [&] { return evaluate_raw(data); });
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  TensorArchive a;
  const auto& params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    a.put("param/" + p.name, p.value);
    a.put("adam_m/" + p.name, Tensor<float>(p.value.shape(), std::span<const float>(state_.exp_avg[i])));
    a.put("adam_v/" + p.name, Tensor<float>(p.value.shape(), std::span<const float>(state_.exp_avg_sq[i])));
    if (state_.has_ema()) a.put("ema/" + p.name, state_.shadow[i]);
  }
  const std::int64_t counters[] = {state_.step, epoch_, static_cast<std::int64_t>(cfg_.seed)};
  a.put_i64("state/counters", counters);
  a.put_u8("state/config_hash", options_.config_hash);
  Tensor<double> rows({static_cast<std::int64_t>(metrics_.size()), 6});
  for (std::size_t i = 0; i < metrics_.size(); ++i) {
    const auto& r = metrics_[i];
    const double v[6] = {static_cast<double>(r.epoch), r.train_loss, r.val_acc_raw, r.val_acc_ema,
                         r.lr, r.train_acc.value_or(std::nan(""))};
    std::copy(v, v + 6, rows.ptr() + i * 6);
  }
  a.put("state/metrics", rows);
  write_archive(path, a);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const TensorArchive a = read_archive(path);
  const std::string hash = a.get_text("state/config_hash");
  if (hash != options_.config_hash) {
    throw std::runtime_error("checkpoint config hash " + hash + " does not match " +
                             options_.config_hash);
  }
  auto& params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const Shape shape = p.value.shape();
    Tensor<float> t = a.get<float>("param/" + p.name);
    if (t.shape() != shape) throw ShapeError("checkpoint shape mismatch for '" + p.name + "'");
    std::copy(t.data().begin(), t.data().end(), p.value.ptr());
    t = a.get<float>("adam_m/" + p.name);
    std::copy(t.data().begin(), t.data().end(), state_.exp_avg[i].begin());
    t = a.get<float>("adam_v/" + p.name);
    std::copy(t.data().begin(), t.data().end(), state_.exp_avg_sq[i].begin());
    if (state_.has_ema()) a.get_into("ema/" + p.name, state_.shadow[i]);
  }
  const auto counters = a.get_i64("state/counters");
  if (counters.size() != 3 || static_cast<std::uint64_t>(counters[2]) != cfg_.seed) {
    throw std::runtime_error("checkpoint counters are inconsistent with this run");
  }
  state_.step = counters[0];
  epoch_ = static_cast<int>(counters[1]);
  const Tensor<double> rows = a.get<double>("state/metrics");
  metrics_.clear();
  for (std::int64_t i = 0; i < (rows.rank() == 2 ? rows.dim(0) : 0); ++i) {
    const double* v = rows.ptr() + i * 6;
    MetricRecord r{static_cast<int>(v[0]), v[1], v[2], v[3], v[4], std::nullopt};
    if (!std::isnan(v[5])) r.train_acc = v[5];
    metrics_.push_back(r);
  }
}

FitResult fit(VisionTransformer<float>& model, const Dataset& train, const Dataset& val,
              const TrainConfig& cfg, const AugPolicy& policy, FitOptions options) {
  Trainer trainer(model, train, val, cfg, policy, std::move(options));
  return trainer.fit();
}

}  // namespace vitft

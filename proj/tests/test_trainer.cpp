// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "vitft/trainer.hpp"

using namespace vitft;
namespace fs = std::filesystem;

namespace {

struct Tiny {
  VitConfig model;
  TrainConfig train;
  AugPolicy aug;
  Dataset train_set;
  Dataset val_set;

  Tiny() {
    model.image_size = 8;
    model.patch_size = 4;
    model.dim = 16;
    model.depth = 2;
    model.heads = 2;
    model.mlp_ratio = 2.0;
    model.num_classes = 3;
    train.batch_size = 12;
    train.total_epochs = 3;
    train.warmup_epochs = 1;
    train.base_lr = 1e-3;
    train.ema_momentum = 0.9;
    aug.mixup_alpha = 0;
    aug.cutmix_alpha = 0;
    train_set = synth_dataset(3, 12, 8, 0, Split::kTrain);
    val_set = synth_dataset(3, 6, 8, 0, Split::kVal);
  }
};

std::vector<Tensor<float>> snapshot(const VisionTransformer<float>& m) {
  std::vector<Tensor<float>> out;
  for (const auto& p : m.parameters()) out.push_back(p.value);
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vitft_trainer_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Loss, SelfTargetGivesEntropy) {
  Tensor<double> z({1, 4}, {0.5, -1.0, 2.0, 0.0});
  double denom = 0;
  for (double v : z.data()) denom += std::exp(v);
  Tensor<double> t({1, 4});
  double entropy = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    t[k] = std::exp(z[k]) / denom;
    entropy -= t[k] * std::log(t[k]);
  }
  EXPECT_NEAR(soft_cross_entropy(z, t), entropy, 1e-14);
}

TEST(Loss, UniformLogitsOneHotIsLogK) {
  Tensor<double> z({2, 7}, 0.3);
  Tensor<double> t({2, 7});
  t[3] = 1;
  t[7 + 6] = 1;
  EXPECT_NEAR(soft_cross_entropy(z, t), std::log(7.0), 1e-14);
}

TEST(Loss, SmoothedTargetsMatchDirectSummation) {
  Rng rng(9);
  const std::vector<int> labels{0, 4, 9, 2, 2};
  const Tensor<float> t = smooth_targets(labels, 10, 0.1);
  Tensor<float> z({5, 10});
  for (auto& v : z.data()) v = static_cast<float>(rng.normal(0, 3));
  double oracle = 0;
  for (int r = 0; r < 5; ++r) {
    double mx = -1e300;
    for (int k = 0; k < 10; ++k) mx = std::max(mx, static_cast<double>(z[static_cast<std::size_t>(r * 10 + k)]));
    double lse = 0;
    for (int k = 0; k < 10; ++k) lse += std::exp(z[static_cast<std::size_t>(r * 10 + k)] - mx);
    lse = mx + std::log(lse);
    for (int k = 0; k < 10; ++k) {
      const double target = k == labels[static_cast<std::size_t>(r)] ? 0.91 : 0.01;
      oracle -= target * (z[static_cast<std::size_t>(r * 10 + k)] - lse);
    }
  }
  EXPECT_NEAR(soft_cross_entropy(z, t), oracle / 5, 1e-6);
}

TEST(Loss, NonFiniteLogitsThrow) {
  Tensor<float> z({1, 2}, {std::numeric_limits<float>::infinity(), 0.0f});
  Tensor<float> t({1, 2}, {1.0f, 0.0f});
  EXPECT_THROW(soft_cross_entropy(z, t), GraphError);
}

TEST(Evaluate, ConstantPredictorScoresOneOverK) {
  Tiny s;
  auto m = VisionTransformer<float>::build(s.model, 0);
  m.param("head.fc.weight").value.fill(0.0f);
  m.param("head.fc.bias").value[1] = 5.0f;
  EXPECT_DOUBLE_EQ(evaluate(m, s.val_set), 1.0 / 3.0);
  EXPECT_THROW(evaluate(m, Dataset{}), std::invalid_argument);
}

TEST(Evaluate, InvariantToDuplication) {
  Tiny s;
  const auto m = VisionTransformer<float>::build(s.model, 4);
  Dataset twice = s.val_set;
  twice.images.insert(twice.images.end(), s.val_set.images.begin(), s.val_set.images.end());
  twice.labels.insert(twice.labels.end(), s.val_set.labels.begin(), s.val_set.labels.end());
  EXPECT_EQ(evaluate(m, twice), evaluate(m, s.val_set));
  EXPECT_EQ(evaluate(m, s.val_set, {}, 5), evaluate(m, s.val_set, {}, 250));
}

TEST(Fit, ZeroEpochsLeavesModelUntouched) {
  Tiny s;
  s.train.total_epochs = 0;
  s.train.warmup_epochs = 0;
  auto m = VisionTransformer<float>::build(s.model, 1);
  const auto before = snapshot(m);
  const FitResult r = fit(m, s.train_set, s.val_set, s.train, s.aug);
  EXPECT_TRUE(r.metrics.empty());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(m.parameters()[i].value.bits_equal(before[i]));
}

TEST(Fit, RecordsAreOrderedAndBounded) {
  Tiny s;
  auto m = VisionTransformer<float>::build(s.model, 1);
  const FitResult r = fit(m, s.train_set, s.val_set, s.train, s.aug);
  ASSERT_EQ(r.metrics.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(r.metrics[e].epoch, static_cast<int>(e));
    EXPECT_GE(r.metrics[e].val_acc_raw, 0.0);
    EXPECT_LE(r.metrics[e].val_acc_ema, 1.0);
    EXPECT_TRUE(std::isfinite(r.metrics[e].train_loss));
    EXPECT_LE(r.metrics[e].val_acc_raw, r.best_raw);
  }
  EXPECT_LT(r.metrics.back().lr, 0.5 * s.train.base_lr);
}

TEST(Fit, LinearProbeKeepsBackboneBitIdentical) {
  Tiny s;
  s.train.freeze_k = s.model.depth;
  auto m = VisionTransformer<float>::build(s.model, 2);
  const auto before = snapshot(m);
  fit(m, s.train_set, s.val_set, s.train, s.aug);
  bool head_moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& p = m.parameters()[i];
    if (p.layer_index <= s.model.depth) {
      EXPECT_TRUE(p.value.bits_equal(before[i])) << p.name;
    } else {
      head_moved = head_moved || !p.value.bits_equal(before[i]);
    }
  }
  EXPECT_TRUE(head_moved);
}

TEST(Fit, DeterministicAcrossPrefetchSettings) {
  Tiny s;
  s.aug.mixup_alpha = 0.8;
  s.aug.cutmix_alpha = 1.0;
  s.model.drop_path_rate = 0.1;
  auto a = VisionTransformer<float>::build(s.model, 3);
  auto b = VisionTransformer<float>::build(s.model, 3);
  FitOptions inline_opts;
  inline_opts.prefetch = 0;
  const auto ra = fit(a, s.train_set, s.val_set, s.train, s.aug, inline_opts);
  const auto rb = fit(b, s.train_set, s.val_set, s.train, s.aug);
  EXPECT_EQ(metrics_csv(ra.metrics), metrics_csv(rb.metrics));
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_TRUE(a.parameters()[i].value.bits_equal(b.parameters()[i].value));
  }
}

TEST(Trainer, BatchTargetsAreSmoothedLabelsWhenMixingIsOff) {
  Tiny s;
  auto m = VisionTransformer<float>::build(s.model, 0);
  Trainer t(m, s.train_set, s.val_set, s.train, s.aug);
  const auto order = t.epoch_order(0);
  const std::vector<std::size_t> idx(order.begin(), order.begin() + 5);
  Tensor<float> images, targets;
  t.make_batch(0, idx, images, targets);
  std::vector<int> labels;
  for (auto i : idx) labels.push_back(s.train_set.labels[i]);
  EXPECT_TRUE(targets.bits_equal(smooth_targets(labels, 3, s.aug.smoothing_eps)));
  EXPECT_EQ(images.shape(), (Shape{5, 3, 8, 8}));
}

TEST(Trainer, EpochOrderIsAPermutationAndVariesByEpoch) {
  Tiny s;
  auto m = VisionTransformer<float>::build(s.model, 0);
  Trainer t(m, s.train_set, s.val_set, s.train, s.aug);
  auto a = t.epoch_order(0), b = t.epoch_order(1);
  EXPECT_NE(a, b);
  EXPECT_EQ(a, t.epoch_order(0));
  std::sort(a.begin(), a.end());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], i);
  EXPECT_EQ(t.steps_per_epoch(), 3);
}

TEST(Trainer, EmaAccuracyEqualsShadowModelAccuracy) {
  Tiny s;
  auto m = VisionTransformer<float>::build(s.model, 5);
  Trainer t(m, s.train_set, s.val_set, s.train, s.aug);
  t.fit();
  auto shadow_model = VisionTransformer<float>::build(s.model, 5);
  for (std::size_t i = 0; i < shadow_model.parameters().size(); ++i) {
    shadow_model.parameters()[i].value = t.opt_state().shadow[i];
  }
  EXPECT_EQ(t.evaluate_ema(s.val_set), evaluate(shadow_model, s.val_set));
  EXPECT_EQ(t.evaluate_raw(s.val_set), evaluate(m, s.val_set));
}

TEST(Trainer, EmaOffReportsRawAccuracy) {
  Tiny s;
  s.train.ema_momentum = 0;
  auto m = VisionTransformer<float>::build(s.model, 5);
  const auto r = fit(m, s.train_set, s.val_set, s.train, s.aug);
  for (const auto& rec : r.metrics) EXPECT_EQ(rec.val_acc_raw, rec.val_acc_ema);
}

TEST(Trainer, AccumulationApproximatesLargeBatch) {
  Tiny s;
  s.train.total_epochs = 2;
  auto a = VisionTransformer<float>::build(s.model, 6);
  auto b = VisionTransformer<float>::build(s.model, 6);
  TrainConfig accum = s.train;
  accum.accum_steps = 3;
  fit(a, s.train_set, s.val_set, s.train, s.aug);
  fit(b, s.train_set, s.val_set, accum, s.aug);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& pa = a.parameters()[i].value;
    const auto& pb = b.parameters()[i].value;
    for (std::size_t j = 0; j < pa.size(); ++j) ASSERT_NEAR(pa[j], pb[j], 1e-4) << a.parameters()[i].name;
  }
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  Tiny s;
  s.aug.mixup_alpha = 0.8;
  s.aug.cutmix_alpha = 1.0;
  const fs::path dir = scratch("resume");
  auto full_model = VisionTransformer<float>::build(s.model, 8);
  const auto full = fit(full_model, s.train_set, s.val_set, s.train, s.aug);

  auto first_model = VisionTransformer<float>::build(s.model, 8);
  FitOptions first;
  first.stop_after_epochs = 1;
  first.checkpoint = dir / "ck.ftra";
  first.config_hash = "abc";
  fit(first_model, s.train_set, s.val_set, s.train, s.aug, first);

  auto resumed_model = VisionTransformer<float>::build(s.model, 99);  // weights come from the checkpoint
  FitOptions second;
  second.config_hash = "abc";
  Trainer t(resumed_model, s.train_set, s.val_set, s.train, s.aug, second);
  t.load_checkpoint(dir / "ck.ftra");
  EXPECT_EQ(t.epochs_done(), 1);
  const auto resumed = t.fit();
  EXPECT_EQ(metrics_csv(resumed.metrics), metrics_csv(full.metrics));
  for (std::size_t i = 0; i < full_model.parameters().size(); ++i) {
    EXPECT_TRUE(full_model.parameters()[i].value.bits_equal(resumed_model.parameters()[i].value));
  }

  FitOptions other;
  other.config_hash = "different";
  Trainer mismatch(resumed_model, s.train_set, s.val_set, s.train, s.aug, other);
  EXPECT_THROW(mismatch.load_checkpoint(dir / "ck.ftra"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(MetricsCsv, FormatAndRoundTrip) {
  std::vector<MetricRecord> records{{0, 2.302585, 0.1, 0.1, 6e-5, std::nullopt},
                                    {1, 1.5, 0.55, 0.5, 1.2e-4, 0.6}};
  const std::string text = metrics_csv(records);
  EXPECT_EQ(text,
            "epoch,train_loss,val_acc_raw,val_acc_ema,lr\n"
            "0,2.302585,0.1000,0.1000,6.000000e-05\n"
            "1,1.500000,0.5500,0.5000,1.200000e-04\n");
  std::istringstream in(text);
  const auto back = read_metrics_csv(in);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].val_acc_raw, 0.55);
  std::istringstream bad("epoch,loss\n0,1\n");
  EXPECT_THROW(read_metrics_csv(bad), std::runtime_error);
}

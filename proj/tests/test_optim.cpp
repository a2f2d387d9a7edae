// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "vitft/optim.hpp"

using namespace vitft;

namespace {

// One scalar parameter in its own group.
struct Scalar {
  std::vector<Parameter<double>> params;
  ParamGroups groups;
  TrainConfig cfg;
  OptState<double> state;

  Scalar(double p0, double multiplier, bool wd) {
    Parameter<double> p;
    p.name = "w";
    p.value = Tensor<double>({1}, {p0});
    params.push_back(std::move(p));
    ParamGroup g;
    g.lr_multiplier = multiplier;
    g.wd_enabled = wd;
    g.params = {0};
    groups.groups = {g};
    groups.group_of = {0};
    cfg.ema_momentum = 0;
    state = init_opt_state(params, cfg);
  }
  void step(double grad, double lr) {
    params[0].value.grad()[0] = grad;
    adamw_step(params, groups, state, cfg, lr);
  }
  double value() const { return params[0].value[0]; }
};

VitConfig depth12() {
  VitConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.dim = 8;
  c.heads = 2;
  c.depth = 12;
  return c;
}

}  // namespace

TEST(Llrd, MultipliersAreDecayPowers) {
  for (int layer = 0; layer <= 13; ++layer) {
    EXPECT_EQ(llrd_multiplier(layer, 12, 0.6), layer == 13 ? 1.0 : std::pow(0.6, 13 - layer));
  }
  EXPECT_EQ(llrd_multiplier(13, 12, 0.6), 1.0);
  EXPECT_EQ(llrd_multiplier(12, 12, 0.6), 0.6);
  EXPECT_THROW(llrd_multiplier(14, 12, 0.6), std::out_of_range);
}

TEST(Llrd, AdjacentRatioIsInverseDecay) {
  for (int layer = 0; layer < 13; ++layer) {
    const double ratio = llrd_multiplier(layer + 1, 12, 0.6) / llrd_multiplier(layer, 12, 0.6);
    EXPECT_NEAR(ratio, 1.0 / 0.6, 4 * std::numeric_limits<double>::epsilon());
  }
}

TEST(ParamGroups, LayerAndDecayAssignment) {
  const auto model = VisionTransformer<float>::build(depth12(), 0);
  TrainConfig cfg;
  const auto groups = build_param_groups(model, cfg);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& p = model.parameters()[i];
    const auto& g = groups.of(i);
    EXPECT_EQ(g.layer_index, p.layer_index) << p.name;
    EXPECT_EQ(g.lr_multiplier, llrd_multiplier(p.layer_index, 12, 0.6)) << p.name;
    EXPECT_EQ(g.wd_enabled, p.role == ParamRole::kWeight) << p.name;
    EXPECT_FALSE(g.frozen);
  }
}

TEST(ParamGroups, FreezeMarksLowerLayers) {
  const auto model = VisionTransformer<float>::build(depth12(), 0);
  TrainConfig cfg;
  cfg.freeze_k = 5;
  const auto groups = build_param_groups(model, cfg);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    EXPECT_EQ(groups.is_frozen(i), model.parameters()[i].layer_index <= 5) << model.parameters()[i].name;
  }
}

TEST(AdamW, SingleStepMatchesHandComputation) {
  Scalar s(0.5, 0.36, true);
  s.cfg.weight_decay = 0.05;
  s.step(0.2, 1e-3);
  // m = 0.02, v = 4e-5, m_hat = 0.2, v_hat = 0.04, lr_eff = 3.6e-4.
  const double expected = 0.5 * (1.0 - 3.6e-4 * 0.05) - 3.6e-4 * 0.2 / (0.2 + 1e-8);
  EXPECT_NEAR(s.value(), expected, 1e-12);
  EXPECT_NEAR(s.value(), 0.49963100001800004, 1e-12);
}

TEST(AdamW, TwoStepsMatchHandComputation) {
  Scalar s(-1.25, 1.0, true);
  s.step(0.3, 2e-3);
  const double p1 = -1.25 * (1 - 2e-3 * 0.05) - 2e-3 * 0.3 / (0.3 + 1e-8);
  s.step(-0.1, 1e-3);
  const double m = 0.9 * 0.03 + 0.1 * -0.1;
  const double v = 0.999 * (0.001 * 0.09) + 0.001 * 0.01;
  const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.998001);
  const double p2 = p1 * (1 - 1e-3 * 0.05) - 1e-3 * m_hat / (std::sqrt(v_hat) + 1e-8);
  EXPECT_NEAR(s.value(), p2, 1e-12);
}

TEST(AdamW, ZeroGradientDecaysExactly) {
  Scalar s(3.0, 0.6, true);
  double expected = 3.0;
  for (int i = 0; i < 50; ++i) {
    s.step(0.0, 5e-4);
    expected *= 1.0 - 5e-4 * 0.6 * 0.05;
    ASSERT_EQ(s.value(), expected) << "step " << i;
  }
}

TEST(AdamW, NoDecayGroupKeepsValueUnderZeroGradient) {
  Scalar s(3.0, 1.0, false);
  s.step(0.0, 1e-3);
  EXPECT_EQ(s.value(), 3.0);
}

TEST(AdamW, NonFiniteGradientNamesParameterAndLeavesStateUntouched) {
  Scalar s(1.0, 1.0, true);
  s.params[0].value.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    adamw_step(s.params, s.groups, s.state, s.cfg, 1e-3);
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
  EXPECT_EQ(s.value(), 1.0);
  EXPECT_EQ(s.state.step, 0);
}

TEST(AdamW, FrozenParametersUntouched) {
  Scalar s(1.0, 1.0, true);
  s.groups.groups[0].frozen = true;
  s.step(0.5, 1e-2);
  EXPECT_EQ(s.value(), 1.0);
}

TEST(Ema, ClosedFormWithFixedWeights) {
  std::vector<Parameter<double>> params(1);
  params[0].value = Tensor<double>({3}, {1.0, -2.0, 0.5});
  TrainConfig cfg;
  cfg.ema_momentum = 0.9998;
  auto state = init_opt_state(params, cfg);
  const std::vector<double> s0{4.0, 0.0, -3.0};
  for (std::size_t i = 0; i < 3; ++i) state.shadow[0][i] = s0[i];
  for (int t = 0; t < 1000; ++t) ema_update(state, params, 0.9998);
  const double mt = std::pow(0.9998, 1000);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(state.shadow[0][i], mt * s0[i] + (1 - mt) * params[0].value[i], 1e-6);
  }
}

TEST(Ema, InitialShadowCopiesWeights) {
  std::vector<Parameter<float>> params(1);
  params[0].value = Tensor<float>({2}, {1.5f, 2.5f});
  TrainConfig cfg;
  auto state = init_opt_state(params, cfg);
  ASSERT_TRUE(state.has_ema());
  EXPECT_TRUE(state.shadow[0].bits_equal(params[0].value));
  cfg.ema_momentum = 0;
  EXPECT_FALSE(init_opt_state(params, cfg).has_ema());
}

TEST(Ema, SwapRestoresRawWeightsBitExactly) {
  std::vector<Parameter<float>> params(2);
  params[0].value = Tensor<float>({3}, {0.1f, 0.2f, 0.3f});
  params[1].value = Tensor<float>({1}, {-7.0f});
  TrainConfig cfg;
  auto state = init_opt_state(params, cfg);
  state.shadow[0].fill(9.0f);
  const auto raw0 = params[0].value, raw1 = params[1].value;
  const float seen = with_ema_weights(params, state, [&] { return params[0].value[1]; });
  EXPECT_EQ(seen, 9.0f);
  EXPECT_TRUE(params[0].value.bits_equal(raw0));
  EXPECT_TRUE(params[1].value.bits_equal(raw1));
  EXPECT_THROW(with_ema_weights(params, state, [&] {
                 throw std::runtime_error("boom");
                 return 0;
               }),
               std::runtime_error);
  EXPECT_TRUE(params[0].value.bits_equal(raw0));
  EXPECT_FALSE(state.swapped);
}

TEST(Ema, NestedSwapThrows) {
  std::vector<Parameter<float>> params(1);
  params[0].value = Tensor<float>({1}, {1.0f});
  TrainConfig cfg;
  auto state = init_opt_state(params, cfg);
  EXPECT_THROW(with_ema_weights(params, state,
                                [&] { return with_ema_weights(params, state, [] { return 0; }); }),
               std::logic_error);
  EXPECT_EQ(params[0].value[0], 1.0f);
}

TEST(Schedule, BoundaryValues) {
  TrainConfig cfg;
  cfg.base_lr = 6e-4;
  cfg.min_lr = 1e-6;
  cfg.warmup_epochs = 10;
  cfg.total_epochs = 50;
  const std::int64_t spe = 7;
  EXPECT_EQ(lr_at(0, spe, cfg), 0.0);
  EXPECT_EQ(lr_at(10 * spe, spe, cfg), 6e-4);
  EXPECT_EQ(lr_at(50 * spe, spe, cfg), 1e-6);
  EXPECT_EQ(lr_at(60 * spe, spe, cfg), 1e-6);
  EXPECT_NEAR(lr_at(30 * spe, spe, cfg), 1e-6 + 0.5 * (6e-4 - 1e-6), 1e-12);
  EXPECT_NEAR(lr_at(5 * spe, spe, cfg), 3e-4, 1e-15);
}

TEST(Schedule, MonotoneAfterWarmup) {
  TrainConfig cfg;
  cfg.warmup_epochs = 2;
  cfg.total_epochs = 9;
  double prev = lr_at(2 * 11, 11, cfg);
  for (std::int64_t s = 2 * 11 + 1; s <= 9 * 11; ++s) {
    const double lr = lr_at(s, 11, cfg);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(Schedule, NoWarmupStartsAtBase) {
  TrainConfig cfg;
  cfg.warmup_epochs = 0;
  cfg.total_epochs = 3;
  EXPECT_EQ(lr_at(0, 5, cfg), cfg.base_lr);
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.llrd_decay = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.warmup_epochs = 60;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.ema_momentum = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "vitft/vit.hpp"

using namespace vitft;

namespace {

VitConfig tiny() {
  VitConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.dim = 32;
  c.depth = 3;
  c.heads = 4;
  c.num_classes = 5;
  return c;
}

Tensor<float> images(int batch, int size, float phase = 0.0f) {
  Tensor<float> t({batch, 3, size, size});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::sin(0.05f * static_cast<float>(i) + phase);
  return t;
}

}  // namespace

TEST(VitConfig, RejectsInvalidDimensions) {
  VitConfig c = tiny();
  c.image_size = 18;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny();
  c.dim = 30;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny();
  c.drop_path_rate = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.drop_path_rate = -0.1;
  EXPECT_THROW(VisionTransformer<float>::build(c, 0), std::invalid_argument);
}

TEST(Vit, RelativeBiasTablesStartAtZero) {
  VitConfig c = tiny();
  c.use_rpe = true;
  const auto m = VisionTransformer<float>::build(c, 3);
  int tables = 0;
  for (const auto& p : m.parameters()) {
    if (p.role != ParamRole::kRelativeBias) continue;
    ++tables;
    for (float v : p.value.data()) EXPECT_EQ(v, 0.0f);
  }
  EXPECT_EQ(tables, c.depth);
}

TEST(Vit, LayerScaleStartsAtOneAndLeavesOutputUnchanged) {
  VitConfig c = tiny();
  const auto plain = VisionTransformer<float>::build(c, 7);
  c.use_layerscale = true;
  const auto scaled = VisionTransformer<float>::build(c, 7);
  int factors = 0;
  for (const auto& p : scaled.parameters()) {
    if (p.role != ParamRole::kLayerScale) continue;
    ++factors;
    for (float v : p.value.data()) EXPECT_EQ(v, 1.0f);
  }
  EXPECT_EQ(factors, 2 * c.depth);
  const auto x = images(2, c.image_size);
  EXPECT_TRUE(plain.forward(x, Mode::kEval, 0).bits_equal(scaled.forward(x, Mode::kEval, 0)));
}

TEST(Vit, RelativeBiasAtInitLeavesOutputUnchanged) {
  VitConfig c = tiny();
  const auto plain = VisionTransformer<double>::build(c, 7);
  c.use_rpe = true;
  const auto rpe = VisionTransformer<double>::build(c, 7);
  const auto x = images(2, c.image_size).cast<double>();
  const auto a = plain.forward(x, Mode::kEval, 0), b = rpe.forward(x, Mode::kEval, 0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Vit, BuildIsDeterministic) {
  const auto a = VisionTransformer<float>::build(tiny(), 11);
  const auto b = VisionTransformer<float>::build(tiny(), 11);
  const auto c = VisionTransformer<float>::build(tiny(), 12);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_TRUE(a.parameters()[i].value.bits_equal(b.parameters()[i].value)) << a.parameters()[i].name;
    any_diff = any_diff || !a.parameters()[i].value.bits_equal(c.parameters()[i].value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Vit, LayerIndexTags) {
  VitConfig c = tiny();
  c.use_rpe = c.use_layerscale = true;
  const auto m = VisionTransformer<float>::build(c, 0);
  EXPECT_EQ(m.param("patch_embed.weight").layer_index, 0);
  EXPECT_EQ(m.param("pos_embed").layer_index, 0);
  EXPECT_EQ(m.param("blocks.0.attn.qkv.weight").layer_index, 1);
  EXPECT_EQ(m.param("blocks.2.mlp.fc2.bias").layer_index, 3);
  EXPECT_EQ(m.param("head.norm.weight").layer_index, c.depth + 1);
  EXPECT_EQ(m.param("head.fc.weight").layer_index, c.depth + 1);
  for (const auto& p : m.parameters()) {
    EXPECT_GE(p.layer_index, 0);
    EXPECT_LE(p.layer_index, c.depth + 1);
  }
}

TEST(Vit, HeadIsNormThenLinearOnMeanPooledTokens) {
  const auto m = VisionTransformer<double>::build(tiny(), 5);
  Tensor<double> tokens({1, 2, 32});
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = std::cos(0.3 * static_cast<double>(i));
  const auto logits = m.classify_tokens(tokens);
  ASSERT_EQ(logits.shape(), (Shape{1, 5}));

  std::vector<double> pooled(32), normed(32);
  for (int k = 0; k < 32; ++k) pooled[static_cast<std::size_t>(k)] = 0.5 * (tokens[static_cast<std::size_t>(k)] + tokens[static_cast<std::size_t>(32 + k)]);
  double mean = 0, var = 0;
  for (double v : pooled) mean += v / 32;
  for (double v : pooled) var += (v - mean) * (v - mean) / 32;
  const auto& w = m.param("head.norm.weight").value;
  const auto& b = m.param("head.norm.bias").value;
  for (std::size_t k = 0; k < 32; ++k) normed[k] = (pooled[k] - mean) / std::sqrt(var + 1e-5) * w[k] + b[k];
  const auto& fw = m.param("head.fc.weight").value;
  const auto& fb = m.param("head.fc.bias").value;
  for (std::size_t j = 0; j < 5; ++j) {
    double s = fb[j];
    for (std::size_t k = 0; k < 32; ++k) s += normed[k] * fw[k * 5 + j];
    EXPECT_NEAR(logits[j], s, 1e-12);
  }
}

TEST(Vit, EvalForwardIgnoresStepSeed) {
  VitConfig c = tiny();
  c.drop_path_rate = 0.3;
  const auto m = VisionTransformer<float>::build(c, 1);
  const auto x = images(3, c.image_size);
  EXPECT_TRUE(m.forward(x, Mode::kEval, 1).bits_equal(m.forward(x, Mode::kEval, 99)));
  EXPECT_FALSE(m.forward(x, Mode::kTrain, 1).bits_equal(m.forward(x, Mode::kTrain, 99)));
  EXPECT_TRUE(m.forward(x, Mode::kTrain, 5).bits_equal(m.forward(x, Mode::kTrain, 5)));
}

TEST(Vit, ProgramMatchesConvenienceForward) {
  const auto m = VisionTransformer<float>::build(tiny(), 2);
  VitProgram<float> program(m, Mode::kEval);
  const auto x = images(4, 16, 0.3f);
  EXPECT_TRUE(program.run(x, 0).bits_equal(m.forward(x, Mode::kEval, 0)));
}

TEST(Vit, CastPreservesStructure) {
  const auto m = VisionTransformer<float>::build(tiny(), 2);
  const auto d = m.cast<double>();
  ASSERT_EQ(d.parameters().size(), m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    EXPECT_EQ(d.parameters()[i].name, m.parameters()[i].name);
    EXPECT_EQ(d.parameters()[i].layer_index, m.parameters()[i].layer_index);
  }
}

TEST(DropPath, EvalIsIdentity) {
  Tensor<double> x({4, 3, 2}, 1.5);
  EXPECT_TRUE(drop_path(x, 0.5, Mode::kEval, 9).bits_equal(x));
}

TEST(DropPath, TrainKeepsOrZeroesWholeSamples) {
  Tensor<double> x({2000, 3}, 1.0);
  const auto y = drop_path(x, 0.25, Mode::kTrain, 4);
  int kept = 0;
  for (int b = 0; b < 2000; ++b) {
    const double v = y[static_cast<std::size_t>(b * 3)];
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
    for (int k = 1; k < 3; ++k) EXPECT_EQ(y[static_cast<std::size_t>(b * 3 + k)], v);
    kept += v != 0.0;
  }
  // Binomial(2000, 0.75): mean 1500, sd ~19.4.
  EXPECT_NEAR(kept, 1500, 100);
}

TEST(DropPath, RejectsBadRate) {
  Tensor<double> x({2, 2}, 1.0);
  EXPECT_THROW(drop_path(x, 1.0, Mode::kTrain, 0), std::invalid_argument);
  EXPECT_THROW(drop_path(x, -0.5, Mode::kEval, 0), std::invalid_argument);
}

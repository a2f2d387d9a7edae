// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <cmath>

#include "vitft/archive.hpp"
#include "vitft/augment.hpp"
#include "vitft/dataset.hpp"
#include "vitft/graph.hpp"
#include "vitft/vit.hpp"

using namespace vitft;

namespace {

Tensor<float> filled(Shape shape) {
  Tensor<float> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::sin(0.013f * static_cast<float>(i));
  return t;
}

void BM_MatMul(benchmark::State& state) {
  const auto n = state.range(0);
  Tensor<float> a = filled({64, n, 64}), b = filled({64, 3 * 64});
  Graph<float> g;
  g.matmul(g.constant("a", a), g.constant("b", b));
  for (auto _ : state) g.forward();
  state.SetItemsProcessed(state.iterations() * 64 * n * 64 * 192 * 2);
}
BENCHMARK(BM_MatMul)->Arg(16)->Arg(64);

void BM_SoftmaxLayerNorm(benchmark::State& state) {
  Tensor<float> x = filled({64, 64, 64}), w({64}, 1.0f), b({64});
  Graph<float> g;
  g.layernorm(g.softmax(g.constant("x", x)), g.constant("w", w), g.constant("b", b));
  for (auto _ : state) g.forward();
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.size()));
}
BENCHMARK(BM_SoftmaxLayerNorm);

VitConfig toy() { return VitConfig{}; }  // depth 4, dim 64, 32x32, patch 4

void BM_VitTrainStep(benchmark::State& state) {
  const auto batch = state.range(0);
  auto model = VisionTransformer<float>::build(toy(), 0);
  for (auto& p : model.parameters()) p.value.set_requires_grad(true);
  VitProgram<float> program(model, Mode::kTrain, true);
  const Tensor<float> images = filled({batch, 3, 32, 32});
  std::vector<int> labels(static_cast<std::size_t>(batch));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
  const Tensor<float> targets = smooth_targets(labels, 10, 0.1);
  for (auto _ : state) {
    program.run(images, 0, &targets);
    program.backward();
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_VitTrainStep)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_VitEval(benchmark::State& state) {
  const auto model = VisionTransformer<float>::build(toy(), 0);
  VitProgram<float> program(model, Mode::kEval);
  const Tensor<float> images = filled({250, 3, 32, 32});
  for (auto _ : state) benchmark::DoNotOptimize(program.run(images, 0).ptr());
  state.SetItemsProcessed(state.iterations() * 250);
}
BENCHMARK(BM_VitEval)->Unit(benchmark::kMillisecond);

void BM_TrainTransform(benchmark::State& state) {
  const Dataset d = synth_dataset(10, 4, 32, 0);
  AugPolicy policy;
  policy.policy_kind = static_cast<PolicyKind>(state.range(0));
  std::vector<float> out(3 * 32 * 32);
  std::uint64_t seed = 0;
  for (auto _ : state) {
    train_transform(d.images[seed % d.size()], policy, 32, seed, out);
    ++seed;
  }
  state.SetLabel(policy_name(policy.policy_kind));
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_TrainTransform)->DenseRange(0, 2);

void BM_SynthDataset(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(synth_dataset(10, 10, 32, 0).images.data());
  state.SetItemsProcessed(state.iterations() * 100);
}
BENCHMARK(BM_SynthDataset);

void BM_ArchiveRoundTrip(benchmark::State& state) {
  const auto model = VisionTransformer<float>::build(toy(), 0);
  TensorArchive a;
  for (const auto& p : model.parameters()) a.put(p.name, p.value);
  for (auto _ : state) benchmark::DoNotOptimize(parse_archive(serialize_archive(a)).size());
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(serialize_archive(a).size()));
}
BENCHMARK(BM_ArchiveRoundTrip);

}  // namespace

BENCHMARK_MAIN();

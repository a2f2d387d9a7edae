// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <functional>

#include "vitft/gradcheck.hpp"
#include "vitft/graph.hpp"
#include "vitft/rng.hpp"
#include "vitft/vit.hpp"

namespace vitft {

namespace {

constexpr double kStep = 1e-4;
// Denominator floor for the relative error. Some gradients vanish exactly
// (the key bias cannot change a softmax row), leaving only rounding noise.
constexpr double kNormFloor = 1e-8;

double floored_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), kNormFloor});
}

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

std::int64_t pick(Rng& rng, std::int64_t lo, std::int64_t hi) { return rng.uniform_int(lo, hi + 1); }

/// Builds the op under test on the given leaf nodes and returns its output.
using Builder = std::function<NodeId(Graph<double>&, const std::vector<NodeId>&)>;

struct Case {
  std::string name;
  std::vector<Tensor<double>> inputs;  // differentiated
  std::vector<Tensor<double>> constants;  // fed as read-only leaves after the inputs
  Builder build;
};

// Loss sum(R * out); R is drawn once the output shape is known.
GradCheckReport run_case(Case& c, std::uint64_t seed) {
  auto assemble = [&](Graph<double>& g, std::vector<Tensor<double>>& xs) {
    std::vector<NodeId> ids;
    for (std::size_t i = 0; i < xs.size(); ++i) ids.push_back(g.leaf("x" + std::to_string(i), xs[i]));
    for (std::size_t i = 0; i < c.constants.size(); ++i) {
      ids.push_back(g.constant("c" + std::to_string(i), c.constants[i]));
    }
    return c.build(g, ids);
  };

  Rng rng(mix_seed({seed, 0xa11ce}));
  Tensor<double> weight;
  {
    Graph<double> probe;
    std::vector<Tensor<double>> xs = c.inputs;
    const NodeId out = assemble(probe, xs);
    probe.forward();
    weight = random_tensor(probe.value(out).shape(), rng);
  }

  std::vector<Tensor<double>> xs = c.inputs;
  for (auto& x : xs) x.set_requires_grad(true);
  Graph<double> g;
  const NodeId out = assemble(g, xs);
  const NodeId w = g.constant("weight", weight);
  const NodeId loss = g.sum(g.mul(out, w));
  g.forward();
  g.backward(loss);

  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto grad = std::as_const(xs[i]).grad();
    analytic.insert(analytic.end(), grad.begin(), grad.end());
    std::vector<std::size_t> coords(xs[i].size());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    auto f = [&] {
      g.forward();
      return g.value(loss)[0];
    };
    const auto fd = finite_diff_at(f, xs[i], coords, kStep);
    numeric.insert(numeric.end(), fd.begin(), fd.end());
  }
  return {c.name, seed, relative_error(analytic, numeric), analytic.size()};
}

std::vector<Case> make_cases(std::uint64_t seed) {
  Rng rng(seed);
  const std::int64_t b = pick(rng, 1, 3), n = pick(rng, 2, 5), d = pick(rng, 2, 6);
  const std::int64_t h = pick(rng, 1, 3), dh = pick(rng, 1, 4), m = pick(rng, 1, 5);
  std::vector<Case> cases;

  cases.push_back({"matmul", {random_tensor({b, n, d}, rng), random_tensor({d, m}, rng)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.matmul(x[0], x[1]); }});
  cases.push_back({"batch_matmul",
                   {random_tensor({b, h, n, d}, rng), random_tensor({b, h, d, m}, rng)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.batch_matmul(x[0], x[1]); }});
  cases.push_back({"batch_matmul_transposed",
                   {random_tensor({b, h, n, d}, rng), random_tensor({b, h, m, d}, rng)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) {
                     return g.batch_matmul(x[0], x[1], true);
                   }});
  cases.push_back({"add_broadcast", {random_tensor({b, n, d}, rng), random_tensor({d}, rng)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.add(x[0], x[1]); }});
  cases.push_back({"mul_broadcast", {random_tensor({b, n, d}, rng), random_tensor({d}, rng)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.mul(x[0], x[1]); }});
  const double factor = rng.uniform(-2.0, 2.0);
  cases.push_back({"scale", {random_tensor({b, n, d}, rng)}, {},
                   [factor](Graph<double>& g, const std::vector<NodeId>& x) { return g.scale(x[0], factor); }});
  cases.push_back({"gelu", {random_tensor({b, n, d}, rng, 2.0)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.gelu(x[0]); }});
  cases.push_back({"layernorm",
                   {random_tensor({b, n, d + 1}, rng), random_tensor({d + 1}, rng),
                    random_tensor({d + 1}, rng)},
                   {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.layernorm(x[0], x[1], x[2]); }});
  cases.push_back({"softmax", {random_tensor({b, n, d}, rng, 2.0)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.softmax(x[0]); }});
  const std::int64_t off = pick(rng, 0, d - 1), len = pick(rng, 1, d - off);
  cases.push_back({"slice_last", {random_tensor({b, n, d}, rng)}, {},
                   [off, len](Graph<double>& g, const std::vector<NodeId>& x) {
                     return g.slice_last(x[0], off, len);
                   }});
  cases.push_back({"split_heads", {random_tensor({b, n, h * dh}, rng)}, {},
                   [h](Graph<double>& g, const std::vector<NodeId>& x) { return g.split_heads(x[0], h); }});
  cases.push_back({"merge_heads", {random_tensor({b, h, n, dh}, rng)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.merge_heads(x[0]); }});
  cases.push_back({"mean_tokens", {random_tensor({b, n, d}, rng)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.mean_tokens(x[0]); }});
  const std::int64_t p = pick(rng, 1, 3), grid = pick(rng, 1, 3), ch = pick(rng, 1, 3);
  cases.push_back({"patchify", {random_tensor({b, ch, grid * p, grid * p}, rng)}, {},
                   [p](Graph<double>& g, const std::vector<NodeId>& x) { return g.patchify(x[0], p); }});
  {
    const std::int64_t vocab = pick(rng, 2, 6);
    std::vector<std::int64_t> index(static_cast<std::size_t>(n * n));
    for (auto& i : index) i = rng.uniform_int(0, vocab);
    cases.push_back({"gather_last", {random_tensor({h, vocab}, rng)}, {},
                     [index, n](Graph<double>& g, const std::vector<NodeId>& x) {
                       return g.gather_last(x[0], index, {n, n});
                     }});
  }
  cases.push_back({"sample_scale", {random_tensor({b, n, d}, rng), random_tensor({b}, rng)}, {},
                   [](Graph<double>& g, const std::vector<NodeId>& x) { return g.sample_scale(x[0], x[1]); }});
  {
    Tensor<double> targets({b * n, d});
    for (std::int64_t r = 0; r < b * n; ++r) {
      double total = 0;
      for (std::int64_t k = 0; k < d; ++k) total += targets[static_cast<std::size_t>(r * d + k)] = rng.uniform();
      for (std::int64_t k = 0; k < d; ++k) targets[static_cast<std::size_t>(r * d + k)] /= total;
    }
    cases.push_back({"cross_entropy", {random_tensor({b * n, d}, rng, 2.0)}, {targets},
                     [](Graph<double>& g, const std::vector<NodeId>& x) {
                       return g.cross_entropy(x[0], x[1]);
                     }});
  }
  {
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));
    cases.push_back({"attention",
                     {random_tensor({b, h, n, dh}, rng), random_tensor({b, h, n, dh}, rng),
                      random_tensor({b, h, n, dh}, rng)},
                     {},
                     [s](Graph<double>& g, const std::vector<NodeId>& x) {
                       const NodeId scores = g.batch_matmul(g.scale(x[0], s), x[1], true);
                       return g.batch_matmul(g.softmax(scores), x[2]);
                     }});
  }
  {
    Tensor<double> factors;
    drop_path_factors(factors, b, 0.5, mix_seed({seed, 7}));
    cases.push_back({"drop_path_train", {random_tensor({b, n, d}, rng)}, {factors},
                     [](Graph<double>& g, const std::vector<NodeId>& x) { return g.sample_scale(x[0], x[1]); }});
  }
  return cases;
}

}  // namespace

std::vector<GradCheckReport> check_kernels(std::uint64_t seed) {
  std::vector<GradCheckReport> out;
  for (auto& c : make_cases(seed)) out.push_back(run_case(c, seed));

  // Eval-mode drop path is the identity: d/dx sum(R * drop_path(x)) = R.
  Rng rng(mix_seed({seed, 0xd70b}));
  Tensor<double> x = random_tensor({3, 4, 5}, rng), weight = random_tensor({3, 4, 5}, rng);
  const ScalarFn f = [&](const Tensor<double>& v) {
    const Tensor<double> y = drop_path(v, 0.5, Mode::kEval, seed);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += weight[i] * y[i];
    return s;
  };
  const Tensor<double> fd = finite_diff_grad_scaled(f, x, kStep);
  out.push_back({"drop_path_eval", seed, relative_error(weight.data(), fd.data()), x.size()});
  return out;
}

std::vector<GradCheckReport> check_vit_gradients(std::uint64_t seed, int coords_per_param) {
  VitConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 2;
  cfg.dim = 32;
  cfg.depth = 2;
  cfg.heads = 4;
  cfg.mlp_ratio = 2.0;
  cfg.num_classes = 5;
  cfg.use_rpe = true;
  cfg.use_layerscale = true;
  cfg.drop_path_rate = 0.25;
  auto model = VisionTransformer<double>::build(cfg, seed);
  Rng rng(mix_seed({seed, 0x717}));
  // Move off the structured init (zero tables, unit scales, tiny head).
  for (auto& p : model.parameters()) {
    for (auto& v : p.value.data()) v += rng.normal(0.0, 0.1);
    p.value.set_requires_grad(true);
  }
  const std::int64_t batch = 3;
  Tensor<double> images = random_tensor({batch, 3, cfg.image_size, cfg.image_size}, rng);
  Tensor<double> targets({batch, cfg.num_classes}, 0.02);
  for (std::int64_t i = 0; i < batch; ++i) {
    targets[static_cast<std::size_t>(i * cfg.num_classes + rng.uniform_int(0, cfg.num_classes))] = 0.92;
  }
  const std::uint64_t step_seed = mix_seed({seed, 0x5eed});

  VitProgram<double> program(model, Mode::kTrain, true);
  program.run(images, step_seed, &targets);
  program.backward();
  auto f = [&] {
    program.run(images, step_seed, &targets);
    return static_cast<double>(program.loss());
  };

  std::vector<GradCheckReport> out;
  for (auto& p : model.parameters()) {
    std::vector<std::size_t> coords;
    for (int k = 0; k < coords_per_param; ++k) {
      coords.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.value.size()))));
    }
    std::vector<double> analytic;
    const auto grad = std::as_const(p.value).grad();
    for (std::size_t c : coords) analytic.push_back(grad[c]);
    const auto numeric = finite_diff_at(f, p.value, coords, kStep);
    out.push_back({"vit:" + p.name, seed, floored_error(analytic, numeric), coords.size()});
  }
  return out;
}

}  // namespace vitft

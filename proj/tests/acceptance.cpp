// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/beta.hpp>

#include "preset_fixtures.hpp"
#include "vitft/archive.hpp"
#include "vitft/augment.hpp"
#include "vitft/gradcheck.hpp"
#include "vitft/optim.hpp"
#include "vitft/run.hpp"

using namespace vitft;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const fs::path kWork = fs::current_path() / "acceptance_runs";

RunConfig shipped(const std::string& name) { return load_config(std::string(VITFT_CONFIG_DIR) + "/" + name); }

// Population standard deviation of the last third of a series.
double late_std(const std::vector<double>& xs) {
  const std::size_t from = xs.size() - xs.size() / 3;
  const std::vector<double> tail(xs.begin() + static_cast<std::ptrdiff_t>(from), xs.end());
  const double mean = std::accumulate(tail.begin(), tail.end(), 0.0) / static_cast<double>(tail.size());
  double var = 0;
  for (double x : tail) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(tail.size()));
}

// ------------------------------------------------------------------ criteria

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr int kSeeds = 20;
  double worst = 0;
  std::string worst_name;
  std::size_t checks = 0;
  for (int s = 0; s < kSeeds; ++s) {
    auto reports = check_kernels(static_cast<std::uint64_t>(s));
    auto model = check_vit_gradients(static_cast<std::uint64_t>(s), 8);
    reports.insert(reports.end(), model.begin(), model.end());
    for (const auto& r : reports) {
      ++checks;
      if (r.rel_error > worst) {
        worst = r.rel_error;
        worst_name = r.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120,
          fmt("%d seeds, %zu checks, max rel err %.2e (%s), %.1f s", kSeeds, checks, worst,
              worst_name.c_str(), secs)};
}

Outcome llrd() {
  VitConfig vc;
  vc.image_size = 8;
  vc.patch_size = 4;
  vc.dim = 8;
  vc.heads = 2;
  vc.depth = 12;
  const auto model = VisionTransformer<float>::build(vc, 0);
  TrainConfig tc;
  tc.llrd_decay = 0.6;
  const auto groups = build_param_groups(model, tc);
  std::vector<double> by_layer(14, -1);
  bool exact = true;
  for (const auto& g : groups.groups) {
    const int exponent = 13 - g.layer_index;
    double expected = 1.0;
    for (int i = 0; i < exponent; ++i) expected *= 0.6;  // repeated product as an independent oracle
    exact = exact && std::abs(g.lr_multiplier - expected) <= 4 * std::numeric_limits<double>::epsilon() * expected;
    by_layer[static_cast<std::size_t>(g.layer_index)] = g.lr_multiplier;
  }
  double worst_ratio = 0;
  for (std::size_t l = 0; l + 1 < by_layer.size(); ++l) {
    worst_ratio = std::max(worst_ratio, std::abs(by_layer[l + 1] / by_layer[l] - 1.0 / 0.6) / (1.0 / 0.6));
  }
  const bool all_layers = std::none_of(by_layer.begin(), by_layer.end(), [](double v) { return v < 0; });
  const bool ratio_ok = worst_ratio <= 4 * std::numeric_limits<double>::epsilon();
  return {exact && all_layers && ratio_ok,
          fmt("14 layers, head %.17g, embed %.17g, worst adjacent-ratio rel dev %.1e", by_layer[13], by_layer[0],
              worst_ratio)};
}

Outcome adamw() {
  std::vector<Parameter<double>> params(1);
  params[0].name = "w";
  params[0].value = Tensor<double>({1}, {0.5});
  ParamGroups groups;
  groups.groups.resize(1);
  groups.groups[0].lr_multiplier = 0.36;
  groups.groups[0].params = {0};
  groups.group_of = {0};
  TrainConfig cfg;
  cfg.ema_momentum = 0;
  auto state = init_opt_state(params, cfg);
  params[0].value.grad()[0] = 0.2;
  adamw_step(params, groups, state, cfg, 1e-3);
  // m = 0.02, v = 4e-5, bias-corrected 0.2 and 0.04, lr_eff = 3.6e-4.
  const double hand = 0.5 * (1 - 3.6e-4 * 0.05) - 3.6e-4 * 0.2 / (std::sqrt(0.04) + 1e-8);
  const double err = std::abs(params[0].value[0] - hand);

  bool decay_exact = true;
  double expected = params[0].value[0];
  state = init_opt_state(params, cfg);
  for (int i = 0; i < 100; ++i) {
    params[0].value.grad()[0] = 0.0;
    adamw_step(params, groups, state, cfg, 1e-3);
    expected *= 1 - 1e-3 * 0.36 * 0.05;
    decay_exact = decay_exact && params[0].value[0] == expected;
  }
  return {err <= 1e-12 && decay_exact,
          fmt("one-step error %.1e; 100 zero-grad steps shrink by (1 - lr_eff wd) exactly: %s", err,
              decay_exact ? "yes" : "no")};
}

Outcome ema() {
  std::vector<Parameter<double>> params(1);
  params[0].value = Tensor<double>({4}, {1.0, -2.0, 0.25, 3.0});
  TrainConfig cfg;
  cfg.ema_momentum = 0.9998;
  auto state = init_opt_state(params, cfg);
  const std::vector<double> s0{-1.0, 5.0, 0.0, 3.5};
  for (std::size_t i = 0; i < 4; ++i) state.shadow[0][i] = s0[i];
  for (int t = 0; t < 1000; ++t) ema_update(state, params, 0.9998);
  const double mt = std::exp(1000 * std::log(0.9998));
  double err = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    err = std::max(err, std::abs(state.shadow[0][i] - (mt * s0[i] + (1 - mt) * params[0].value[i])));
  }

  VitConfig vc;
  vc.image_size = 8;
  vc.dim = 16;
  vc.depth = 2;
  vc.heads = 2;
  auto model = VisionTransformer<float>::build(vc, 1);
  auto fstate = init_opt_state(model.parameters(), TrainConfig{});
  for (auto& s : fstate.shadow) {
    for (auto& v : s.data()) v += 0.5f;
  }
  std::vector<Tensor<float>> raw;
  for (const auto& p : model.parameters()) raw.push_back(p.value);
  const float inside = with_ema_weights(model.parameters(), fstate, [&] { return model.parameters()[0].value[0]; });
  bool restored = inside == raw[0][0] + 0.5f;
  for (std::size_t i = 0; i < raw.size(); ++i) restored = restored && model.parameters()[i].value.bits_equal(raw[i]);
  return {err <= 1e-6 && restored,
          fmt("closed-form error %.1e after 1000 updates; raw weights restored bit-exactly: %s", err,
              restored ? "yes" : "no")};
}

Outcome schedule() {
  TrainConfig cfg;  // recipe values: 6e-4 base, 10 warmup, 50 total
  const std::int64_t spe = 625;
  const double at0 = lr_at(0, spe, cfg);
  const double at_warm = lr_at(10 * spe, spe, cfg);
  const double at_end = lr_at(50 * spe, spe, cfg);
  const double mid = lr_at(30 * spe, spe, cfg);
  const double mid_err = std::abs(mid - (cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr)));
  return {at0 == 0.0 && at_warm == cfg.base_lr && at_end == cfg.min_lr && mid_err <= 1e-12,
          fmt("lr(0)=%g lr(warmup end)=%g lr(final)=%g midpoint error %.1e", at0, at_warm, at_end, mid_err)};
}

Outcome augmentation() {
  std::vector<std::string> notes;
  bool ok = true;

  bool sums = true;
  for (int k : {2, 10, 100, 1000}) {
    std::vector<int> labels(static_cast<std::size_t>(k));
    std::iota(labels.begin(), labels.end(), 0);
    const auto t = smooth_targets(labels, k, 0.1);
    for (int r = 0; r < k; ++r) {
      float s = 0;
      for (int j = 0; j < k; ++j) s += t[static_cast<std::size_t>(r * k + j)];
      sums = sums && s == 1.0f;
    }
  }
  ok = ok && sums;
  notes.push_back(std::string("smoothing sums exact: ") + (sums ? "yes" : "no"));

  Rng rng(11);
  const int h = 32, w = 32;
  Tensor<float> marked({2, 1, h, w});
  for (int i = 0; i < h * w; ++i) marked[static_cast<std::size_t>(h * w + i)] = 1.0f;
  const auto targets = smooth_targets(std::vector<int>{0, 1}, 2, 0.0);
  int cutmix_bad = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const auto mixed = cutmix_batch(marked, targets, 1.0, rng);
    std::int64_t pasted = 0;
    for (int i = 0; i < h * w; ++i) pasted += mixed.images[static_cast<std::size_t>(i)] != 0.0f;
    cutmix_bad += mixed.lambda_used != 1.0 - static_cast<double>(pasted) / (h * w);
  }
  ok = ok && cutmix_bad == 0;
  notes.push_back(fmt("cutmix lambda mismatches %d/10000", cutmix_bad));

  Tensor<float> one({2, 1, 1, 1});
  std::vector<double> lambdas;
  for (int i = 0; i < 100000; ++i) lambdas.push_back(mixup_batch(one, targets, 0.8, rng).lambda_used);
  std::sort(lambdas.begin(), lambdas.end());
  const boost::math::beta_distribution<double> beta(0.8, 0.8);
  double d = 0;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const double f = boost::math::cdf(beta, lambdas[i]);
    d = std::max({d, static_cast<double>(i + 1) / 1e5 - f, f - static_cast<double>(i) / 1e5});
  }
  const double crit = 1.628 / std::sqrt(1e5);
  ok = ok && d < crit;
  notes.push_back(fmt("mixup KS D=%.4f (1%% critical %.4f)", d, crit));

  double lo = 1, hi = 0;
  for (int i = 0; i < 10000; ++i) {
    const CropBox box = sample_crop_box(224, 224, 0.08, 1.0, rng);
    const double frac = box.w * box.h / (224.0 * 224.0);
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
  }
  const bool rrc_ok = lo >= 0.08 - 1e-12 && hi <= 1.0 + 1e-12;
  ok = ok && rrc_ok;
  notes.push_back(fmt("rrc area range [%.4f, %.4f]", lo, hi));

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {ok, detail};
}

// Shared by the end-to-end and trend criteria.
struct ToyRuns {
  FitResult first;
  bool identical = false;
  double seconds[2] = {0, 0};
};

ToyRuns& toy_runs() {
  static ToyRuns runs = [] {
    ToyRuns r;
    const RunConfig cfg = shipped("toy-recipe.cfg");
    for (int i = 0; i < 2; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      RunOptions opts;
      opts.out_dir = kWork / ("toy_" + std::to_string(i));
      const FitResult res = execute_run(cfg, opts);
      r.seconds[i] = seconds_since(t0);
      if (i == 0) r.first = res;
    }
    r.identical = slurp(kWork / "toy_0" / "metrics.csv") == slurp(kWork / "toy_1" / "metrics.csv");
    return r;
  }();
  return runs;
}

Outcome end_to_end() {
  const ToyRuns& r = toy_runs();
  const bool fast = std::max(r.seconds[0], r.seconds[1]) < 600;
  return {r.first.best_raw >= 0.95 && r.first.metrics.size() == 20 && r.identical && fast,
          fmt("best val top-1 %.4f (EMA %.4f) in %zu epochs, %.0f s and %.0f s per run, metrics CSV identical: %s",
              r.first.best_raw, r.first.best_ema, r.first.metrics.size(), r.seconds[0], r.seconds[1],
              r.identical ? "yes" : "no")};
}

Outcome trends() {
  std::vector<std::string> notes;
  bool ok = true;

  // (a) small-subset baseline run: val peaks early while train accuracy keeps climbing.
  {
    RunOptions opts;
    opts.out_dir = kWork / "overfit";
    const FitResult r = execute_run(shipped("toy-baseline-overfit.cfg"), opts);
    std::size_t peak = 0;
    for (std::size_t e = 0; e < r.metrics.size(); ++e) {
      if (r.metrics[e].val_acc_raw > r.metrics[peak].val_acc_raw) peak = e;
    }
    const auto& last = r.metrics.back();
    const double train_at_peak = r.metrics[peak].train_acc.value_or(-1);
    const double train_last = last.train_acc.value_or(-1);
    const bool a = peak + 1 < r.metrics.size() && train_last > train_at_peak;
    ok = ok && a;
    notes.push_back(fmt("(a) val peak %.3f at epoch %zu of %zu, train acc %.3f -> %.3f: %s",
                        r.metrics[peak].val_acc_raw, peak, r.metrics.size(), train_at_peak, train_last,
                        a ? "ok" : "no"));
  }

  // (b) EMA is the steadier curve late in the toy run.
  const ToyRuns& toy = toy_runs();
  {
    std::vector<double> raw, ema;
    for (const auto& m : toy.first.metrics) {
      raw.push_back(m.val_acc_raw);
      ema.push_back(m.val_acc_ema);
    }
    const double sr = late_std(raw), se = late_std(ema);
    const bool b = se <= sr;
    ok = ok && b;
    notes.push_back(fmt("(b) late std ema %.4f vs raw %.4f: %s", se, sr, b ? "ok" : "no"));
  }

  // (c) full fine-tuning against linear probing at the same seed.
  {
    RunConfig probe = shipped("toy-recipe.cfg");
    probe.set("tuned_layers", "0");
    const FitResult lp = execute_run(probe);
    const bool c = toy.first.best_raw >= lp.best_raw;
    ok = ok && c;
    notes.push_back(fmt("(c) full %.4f vs linear probe %.4f: %s", toy.first.best_raw, lp.best_raw, c ? "ok" : "no"));
  }

  // (d) every freeze level leaves frozen tensors untouched and trains the rest.
  {
    RunConfig base = shipped("toy-recipe.cfg");
    base.set("train_per_class", "20");
    base.set("val_per_class", "5");
    base.set("training_epochs", "2");
    base.set("warmup_epochs", "1");
    const DatasetPair data = load_datasets(base);
    int levels = 0, violations = 0;
    for (int k = 0; k <= base.model.depth; ++k) {
      RunConfig cfg = base;
      cfg.set("freeze_k", std::to_string(k));
      auto model = VisionTransformer<float>::build(cfg.model, cfg.train.seed);
      std::vector<Tensor<float>> before;
      for (const auto& p : model.parameters()) before.push_back(p.value);
      fit(model, data.train, data.val, cfg.resolved_train(), cfg.aug);
      const auto groups = build_param_groups(model, cfg.resolved_train());
      bool trained_any = false;
      for (std::size_t i = 0; i < before.size(); ++i) {
        const bool same = model.parameters()[i].value.bits_equal(before[i]);
        if (groups.is_frozen(i) && !same) ++violations;
        trained_any = trained_any || !same;
      }
      violations += !trained_any;
      ++levels;
    }
    const bool d = violations == 0;
    ok = ok && d;
    notes.push_back(fmt("(d) %d freeze levels, %d violations: %s", levels, violations, d ? "ok" : "no"));
  }

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {ok, detail};
}

Outcome config_fidelity() {
  using namespace vitft::fixtures;
  auto bad = mismatches(preset_config("baseline"), kBaselineTable);
  const auto bad_recipe = mismatches(preset_config("recipe-base"), kRecipeBaseTable);
  bad.insert(bad.end(), bad_recipe.begin(), bad_recipe.end());

  // Short run with every stochastic component on, stopped and resumed halfway.
  RunConfig cfg = shipped("toy-recipe.cfg");
  for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
           {"train_per_class", "30"}, {"val_per_class", "10"}, {"training_epochs", "4"},
           {"warmup_epochs", "1"}, {"mixup", "0.8"}, {"cutmix", "1.0"}, {"drop_path", "0.1"}}) {
    cfg.set(k, v);
  }
  RunOptions whole;
  whole.out_dir = kWork / "resume_whole";
  execute_run(cfg, whole);
  RunOptions half;
  half.out_dir = kWork / "resume_half";
  half.stop_after_epochs = 2;
  execute_run(cfg, half);

  const TensorArchive ckpt = read_archive(kWork / "resume_half" / "checkpoint.ftra");
  const std::string raw = slurp(kWork / "resume_half" / "checkpoint.ftra");
  const std::vector<std::uint8_t> bytes(raw.begin(), raw.end());
  const bool archive_ok = serialize_archive(ckpt) == bytes && parse_archive(bytes) == ckpt;

  RunOptions rest;
  rest.out_dir = kWork / "resume_rest";
  rest.resume = kWork / "resume_half" / "checkpoint.ftra";
  execute_run(cfg, rest);
  const std::string a = slurp(kWork / "resume_whole" / "metrics.csv");
  const std::string b = slurp(kWork / "resume_rest" / "metrics.csv");
  const bool resume_ok = !a.empty() && a == b;
  const bool ckpt_ok = slurp(kWork / "resume_whole" / "checkpoint.ftra") == slurp(kWork / "resume_rest" / "checkpoint.ftra");

  std::string mism;
  for (const auto& m : bad) mism += " " + m;
  return {bad.empty() && archive_ok && resume_ok && ckpt_ok,
          fmt("preset mismatches: %zu%s; archive round-trip bit-exact: %s; resumed metrics identical: %s; "
              "final checkpoints identical: %s",
              bad.size(), mism.c_str(), archive_ok ? "yes" : "no", resume_ok ? "yes" : "no",
              ckpt_ok ? "yes" : "no")};
}

}  // namespace

int main() {
  fs::create_directories(kWork);
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient-correctness", gradients},
      {"llrd-exactness", llrd},
      {"adamw-oracle", adamw},
      {"ema-closed-form", ema},
      {"schedule-boundaries", schedule},
      {"augmentation-label-math", augmentation},
      {"end-to-end-toy-run", end_to_end},
      {"trend-reproduction", trends},
      {"config-fidelity", config_fidelity},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %-24s %s [%.0f s]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}

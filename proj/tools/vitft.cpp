// SPDX-License-Identifier: Apache-2.0
// vitft: command-line front end (run, sweep, plot, grad-check, selftest).
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "vitft/archive.hpp"
#include "vitft/augment.hpp"
#include "vitft/gradcheck.hpp"
#include "vitft/optim.hpp"
#include "vitft/plot.hpp"
#include "vitft/run.hpp"
#include "vitft/sweep.hpp"

namespace fs = std::filesystem;
using namespace vitft;

namespace {

constexpr double kGradTolerance = 1e-4;

struct Common {
  std::string preset = "recipe-base";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;  // key=value
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--preset", c.preset, "Base preset")
      ->check(CLI::IsMember({"baseline", "recipe-base", "recipe-large"}));
  app->add_option("--seed", c.seed, "Override random_seed");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--set", c.overrides, "Extra key=value override (repeatable)");
}

RunConfig apply_common(RunConfig cfg, const Common& c) {
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (c.seed) cfg.train.seed = *c.seed;
  return cfg;
}

// --out, then the config's out_dir, then $VITFT_OUT_ROOT/<leaf>, then runs/<leaf>.
fs::path output_dir(const Common& c, const std::string& from_config, const std::string& leaf) {
  if (!c.out.empty()) return c.out;
  if (!from_config.empty()) return from_config;
  const char* root = std::getenv("VITFT_OUT_ROOT");
  return fs::path(root && *root ? root : "runs") / leaf;
}

int cmd_run(const std::string& path, const Common& c, const std::string& resume, int stop_after) {
  RunConfig cfg = preset_config(c.preset);
  if (!path.empty()) cfg = load_config(path, cfg);
  cfg = apply_common(std::move(cfg), c);
  cfg.validate();
  RunOptions opts;
  opts.out_dir = output_dir(c, cfg.out_dir, cfg.hash());
  if (!resume.empty()) opts.resume = resume;
  opts.stop_after_epochs = stop_after;
  opts.progress = &std::cerr;
  const FitResult result = execute_run(cfg, opts);
  std::cout << summary_line(cfg, result) << "\n";
  std::cerr << "outputs in " << opts.out_dir->string() << "\n";
  return 0;
}

int cmd_sweep(const std::string& path, const Common& c, int jobs) {
  SweepSpec spec = load_sweep(path, preset_config(c.preset));
  spec.base = apply_common(std::move(spec.base), c);
  const fs::path out = output_dir(c, spec.base.out_dir, "sweep-" + spec.base.hash());
  const auto cells = run_sweep(
      spec, out, [](const RunConfig& cfg) { return execute_run(cfg); }, &std::cerr, jobs);
  std::cout << make_table(spec, cells).aligned();
  std::size_t failed = 0;
  for (const auto& cell : cells) failed += !cell.error.empty();
  std::cerr << "table in " << (out / "table.csv").string() << "\n";
  return failed == 0 ? 0 : 3;
}

int cmd_plot(const std::vector<std::string>& csvs, const std::string& out) {
  std::vector<fs::path> paths(csvs.begin(), csvs.end());
  for (const auto& p : emit_curves(paths, out.empty() ? fs::path("plots") : fs::path(out))) {
    std::cout << p.string() << "\n";
  }
  return 0;
}

int cmd_grad_check(int seeds, std::uint64_t first, bool verbose) {
  const auto t0 = std::chrono::steady_clock::now();
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  for (int s = 0; s < seeds; ++s) {
    auto reports = check_kernels(first + static_cast<std::uint64_t>(s));
    auto vit = check_vit_gradients(first + static_cast<std::uint64_t>(s));
    reports.insert(reports.end(), vit.begin(), vit.end());
    for (const auto& r : reports) {
      if (!worst.contains(r.name)) order.push_back(r.name);
      worst[r.name] = std::max(worst[r.name], r.rel_error);
      if (verbose) std::cout << "seed " << r.seed << " " << r.name << " " << r.rel_error << "\n";
    }
  }
  bool ok = true;
  for (const auto& name : order) {
    const bool pass = worst[name] < kGradTolerance;
    ok = ok && pass;
    std::printf("%-4s %-40s max_rel_err=%.3e\n", pass ? "ok" : "FAIL", name.c_str(), worst[name]);
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%d seeds, %zu checks, %.1f s\n", seeds, order.size(), secs);
  return ok ? 0 : 1;
}

// Quick sanity pass over each subsystem; seconds, not minutes.
int cmd_selftest() {
  int failures = 0;
  auto check = [&](const char* name, bool ok) {
    std::printf("%-4s %s\n", ok ? "ok" : "FAIL", name);
    failures += !ok;
  };

  double grad_err = 0;
  for (const auto& r : check_kernels(0)) grad_err = std::max(grad_err, r.rel_error);
  for (const auto& r : check_vit_gradients(0, 2)) grad_err = std::max(grad_err, r.rel_error);
  check("gradients", grad_err < kGradTolerance);

  check("llrd", llrd_multiplier(12, 12, 0.6) == 0.6 && llrd_multiplier(13, 12, 0.6) == 1.0);

  TrainConfig tc;
  tc.warmup_epochs = 2;
  tc.total_epochs = 4;
  check("schedule", lr_at(0, 10, tc) == 0.0 && lr_at(20, 10, tc) == tc.base_lr && lr_at(40, 10, tc) == tc.min_lr);

  const std::vector<int> labels{0, 3, 9};
  const Tensor<float> t = smooth_targets(labels, 10, 0.1);
  bool sums = true;
  for (int r = 0; r < 3; ++r) {
    float s = 0;
    for (int k = 0; k < 10; ++k) s += t[static_cast<std::size_t>(r * 10 + k)];
    sums = sums && s == 1.0f;
  }
  check("label smoothing", sums);

  TensorArchive a;
  a.put("w", Tensor<double>({2, 2}, {1.0, -2.5, 3.25, 1e-300}));
  a.put_u8("note", std::string_view("hello"));
  check("archive", parse_archive(serialize_archive(a)) == a);

  RunConfig cfg = preset_config("recipe-base");
  for (const auto& [k, v] : std::vector<std::pair<const char*, const char*>>{
           {"image_size", "8"}, {"patch_size", "4"}, {"dim", "16"}, {"depth", "1"},
           {"heads", "2"}, {"num_classes", "2"}, {"train_per_class", "8"},
           {"val_per_class", "4"}, {"batch_size", "8"}, {"training_epochs", "2"},
           {"warmup_epochs", "1"}}) {
    cfg.set(k, v);
  }
  const FitResult a1 = execute_run(cfg), a2 = execute_run(cfg);
  check("run determinism", a1.metrics.size() == 2 && metrics_csv(a1.metrics) == metrics_csv(a2.metrics));

  std::printf("%s\n", failures ? "selftest FAILED" : "selftest passed");
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fine-tuning engine for small vision transformers"};
  app.require_subcommand(1);

  Common common;
  std::string cfg_path, resume;
  auto* run = app.add_subcommand("run", "Train one configuration");
  run->add_option("config", cfg_path, "Config file (key = value)")->check(CLI::ExistingFile);
  run->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  int stop_after = -1;
  run->add_option("--stop-after", stop_after, "Stop after this many epochs (resumable)");
  add_common(run, common);

  std::string spec_path;
  int jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Run a grid of configurations");
  sweep->add_option("spec", spec_path, "Sweep spec file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--jobs", jobs, "Grid points run concurrently")->check(CLI::PositiveNumber);
  add_common(sweep, common);

  std::vector<std::string> csvs;
  std::string plot_out;
  auto* plot = app.add_subcommand("plot", "Write SVG curves from metrics CSVs");
  plot->add_option("csv", csvs, "Metrics files")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", plot_out, "Output directory (default plots/)");

  int seeds = 20;
  std::uint64_t first_seed = 0;
  bool verbose = false;
  auto* grad = app.add_subcommand("grad-check", "Compare backward() with finite differences");
  grad->add_option("--seeds", seeds, "Number of seeds")->check(CLI::PositiveNumber);
  grad->add_option("--seed", first_seed, "First seed");
  grad->add_flag("-v,--verbose", verbose, "Print every check");

  auto* self = app.add_subcommand("selftest", "Fast consistency checks");

  CLI11_PARSE(app, argc, argv);
  try {
    if (run->parsed()) return cmd_run(cfg_path, common, resume, stop_after);
    if (sweep->parsed()) return cmd_sweep(spec_path, common, jobs);
    if (plot->parsed()) return cmd_plot(csvs, plot_out);
    if (grad->parsed()) return cmd_grad_check(seeds, first_seed, verbose);
    if (self->parsed()) return cmd_selftest();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

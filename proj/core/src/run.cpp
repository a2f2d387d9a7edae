// SPDX-License-Identifier: Apache-2.0
#include "vitft/run.hpp"

#include <cstdio>
#include <fstream>

namespace vitft {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

FitResult execute_run(const RunConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const DatasetPair data = load_datasets(cfg);
  auto model = VisionTransformer<float>::build(cfg.model, cfg.train.seed);

  FitOptions fo;
  fo.prefetch = cfg.prefetch;
  fo.track_train_acc = cfg.track_train_acc;
  fo.config_hash = cfg.hash();
  fo.progress = options.progress;
  fo.stop_after_epochs = options.stop_after_epochs;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    fo.checkpoint = *options.out_dir / "checkpoint.ftra";
    write_text(*options.out_dir / "config.txt", cfg.canonical());
  }
  Trainer trainer(model, data.train, data.val, cfg.resolved_train(), cfg.aug, fo);
  if (options.resume) trainer.load_checkpoint(*options.resume);
  FitResult result = trainer.fit();

  if (options.out_dir) {
    write_text(*options.out_dir / "metrics.csv", metrics_csv(result.metrics));
    write_text(*options.out_dir / "summary.txt", summary_line(cfg, result) + "\n");
  }
  return result;
}

std::string summary_line(const RunConfig& cfg, const FitResult& result) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "best_raw=%.4f best_ema=%.4f epochs=%zu config=%s", result.best_raw,
                result.best_ema, result.metrics.size(), cfg.hash().c_str());
  return buf;
}

}  // namespace vitft

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vitft/config.hpp"
#include "vitft/trainer.hpp"

namespace vitft {

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

/// Base config plus grid axes. In the spec file, `sweep.<key> = v1, v2, ...`
/// declares an axis (in file order) and `skip = k1=v1, k2=v2` masks every
/// grid point matching all listed pairs. Other lines configure the base run.
struct SweepSpec {
  RunConfig base;
  std::vector<SweepAxis> axes;
  std::vector<std::map<std::string, std::string>> skips;
};

SweepSpec parse_sweep(std::istream& in, RunConfig base = preset_config("recipe-base"));
SweepSpec load_sweep(const std::string& path, RunConfig base = preset_config("recipe-base"));

struct SweepPoint {
  std::vector<std::string> values;  // one per axis
  bool skipped = false;
  std::string name;  // "key=value_key=value", or "base" without axes
};

/// Cartesian product in lexicographic order (first axis slowest).
std::vector<SweepPoint> expand_grid(const SweepSpec& spec);
RunConfig config_for(const SweepSpec& spec, const SweepPoint& point);

struct SweepCell {
  SweepPoint point;
  std::optional<FitResult> result;  // empty for skipped or failed runs
  std::string error;
};

/// Rows are the grid points of all axes but the last, columns the values of
/// the last axis; a 0- or 1-axis sweep is one row. Cells hold best EMA
/// accuracy, "---" when skipped and "fail" when the run threw.
struct SweepTable {
  std::vector<std::string> axis_keys;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<std::vector<std::string>> cells;

  std::string csv() const;
  std::string aligned() const;
};

SweepTable make_table(const SweepSpec& spec, const std::vector<SweepCell>& cells);

using RunFn = std::function<FitResult(const RunConfig&)>;

/// Runs every unmasked point through `run`, writing <out>/<point>.csv per
/// point (N files) and <out>/table.csv (one file). A failing point is
/// recorded and the sweep continues. With jobs > 1, independent points run
/// concurrently; they share no state, so results do not depend on jobs.
std::vector<SweepCell> run_sweep(const SweepSpec& spec, const std::filesystem::path& out,
                                 const RunFn& run, std::ostream* log = nullptr, int jobs = 1);

}  // namespace vitft

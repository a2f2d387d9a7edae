// SPDX-License-Identifier: Apache-2.0
#include "vitft/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace vitft {

namespace {

std::string fmt_acc(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

SweepSpec parse_sweep(std::istream& in, RunConfig base) {
  SweepSpec spec;
  std::ostringstream plain;
  std::string line;
  int lineno = 0;
  std::vector<std::pair<int, std::string>> pending;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string body = trim(std::string_view(line).substr(0, line.find('#')));
    const auto eq = body.find('=');
    const std::string key = eq == std::string::npos ? "" : trim(std::string_view(body).substr(0, eq));
    if (key.rfind("sweep.", 0) == 0 || key == "skip") {
      pending.emplace_back(lineno, body);
      plain << '\n';  // keep line numbers aligned for config errors
    } else {
      plain << line << '\n';
    }
  }
  std::istringstream base_in(plain.str());
  spec.base = parse_config(base_in, std::move(base));
  for (const auto& [no, body] : pending) {
    const auto eq = body.find('=');
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const std::string where = "line " + std::to_string(no) + ": ";
    if (key == "skip") {
      std::map<std::string, std::string> mask;
      for (const auto& pair : split_list(value)) {
        const auto peq = pair.find('=');
        if (peq == std::string::npos) throw ConfigError(where + "skip expects key=value pairs");
        mask[trim(std::string_view(pair).substr(0, peq))] = trim(std::string_view(pair).substr(peq + 1));
      }
      spec.skips.push_back(std::move(mask));
      continue;
    }
    SweepAxis axis{key.substr(6), split_list(value)};
    if (std::find(config_keys().begin(), config_keys().end(), axis.key) == config_keys().end()) {
      throw ConfigError(where + "unknown config key '" + axis.key + "'");
    }
    for (const auto& a : spec.axes) {
      if (a.key == axis.key) throw ConfigError(where + "duplicate axis '" + axis.key + "'");
    }
    for (const auto& v : axis.values) {
      if (v.empty()) throw ConfigError(where + "empty value in axis '" + axis.key + "'");
      RunConfig probe = spec.base;
      try {
        probe.set(axis.key, v);
      } catch (const ConfigError& e) {
        throw ConfigError(where + e.what());
      }
    }
    spec.axes.push_back(std::move(axis));
  }
  for (const auto& mask : spec.skips) {
    for (const auto& [k, v] : mask) {
      const bool known = std::any_of(spec.axes.begin(), spec.axes.end(),
                                     [&](const SweepAxis& a) { return a.key == k; });
      if (!known) throw ConfigError("skip refers to '" + k + "', which is not a sweep axis");
    }
  }
  return spec;
}

SweepSpec load_sweep(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open sweep file '" + path + "'");
  return parse_sweep(in, std::move(base));
}

std::vector<SweepPoint> expand_grid(const SweepSpec& spec) {
  std::vector<SweepPoint> out;
  std::vector<std::size_t> idx(spec.axes.size(), 0);
  for (const auto& a : spec.axes) {
    if (a.values.empty()) return out;
  }
  while (true) {
    SweepPoint p;
    for (std::size_t i = 0; i < spec.axes.size(); ++i) {
      p.values.push_back(spec.axes[i].values[idx[i]]);
      if (!p.name.empty()) p.name += "_";
      p.name += spec.axes[i].key + "=" + p.values.back();
    }
    if (p.name.empty()) p.name = "base";
    for (const auto& mask : spec.skips) {
      bool all = true;
      for (std::size_t i = 0; i < spec.axes.size(); ++i) {
        const auto it = mask.find(spec.axes[i].key);
        if (it != mask.end() && it->second != p.values[i]) all = false;
      }
      p.skipped |= all;
    }
    out.push_back(std::move(p));
    // odometer increment, last axis fastest
    std::size_t k = spec.axes.size();
    while (k > 0) {
      --k;
      if (++idx[k] < spec.axes[k].values.size()) break;
      idx[k] = 0;
      if (k == 0) return out;
    }
    if (spec.axes.empty()) return out;
  }
}

RunConfig config_for(const SweepSpec& spec, const SweepPoint& point) {
  RunConfig c = spec.base;
  for (std::size_t i = 0; i < spec.axes.size(); ++i) c.set(spec.axes[i].key, point.values[i]);
  return c;
}

SweepTable make_table(const SweepSpec& spec, const std::vector<SweepCell>& cells) {
  SweepTable t;
  for (const auto& a : spec.axes) t.axis_keys.push_back(a.key);
  const std::size_t cols = spec.axes.empty() ? 1 : spec.axes.back().values.size();
  if (spec.axes.empty()) {
    t.col_labels = {"best_ema"};
  } else {
    t.col_labels = spec.axes.back().values;
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i % cols == 0) {
      std::string label;
      const auto& values = cells[i].point.values;
      for (std::size_t a = 0; a + 1 < values.size(); ++a) {
        if (!label.empty()) label += " ";
        label += values[a];
      }
      t.row_labels.push_back(label.empty() ? "best_ema" : label);
      t.cells.emplace_back();
    }
    const auto& c = cells[i];
    t.cells.back().push_back(c.point.skipped ? "---" : c.result ? fmt_acc(c.result->best_ema) : "fail");
  }
  return t;
}

std::string SweepTable::csv() const {
  std::string head;
  for (std::size_t a = 0; a + 1 < axis_keys.size(); ++a) head += (a ? " " : "") + axis_keys[a];
  if (axis_keys.size() > 0) head += (head.empty() ? "" : "\\") + axis_keys.back();
  std::string out = head;
  for (const auto& c : col_labels) out += "," + c;
  out += "\n";
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    out += row_labels[r];
    for (const auto& cell : cells[r]) out += "," + cell;
    out += "\n";
  }
  return out;
}

std::string SweepTable::aligned() const {
  std::vector<std::vector<std::string>> grid;
  std::string head;
  for (std::size_t a = 0; a + 1 < axis_keys.size(); ++a) head += (a ? " " : "") + axis_keys[a];
  if (!axis_keys.empty()) head += (head.empty() ? "" : " \\ ") + axis_keys.back();
  grid.push_back({head});
  for (const auto& c : col_labels) grid[0].push_back(c);
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    grid.push_back({row_labels[r]});
    for (const auto& cell : cells[r]) grid.back().push_back(cell);
  }
  std::vector<std::size_t> width;
  for (const auto& row : grid) {
    width.resize(std::max(width.size(), row.size()), 0);
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::string out;
  for (std::size_t r = 0; r < grid.size(); ++r) {
    for (std::size_t i = 0; i < grid[r].size(); ++i) {
      const auto& s = grid[r][i];
      if (i == 0) {
        out += s + std::string(width[0] - s.size(), ' ') + " |";
      } else {
        out += " " + std::string(width[i] - s.size(), ' ') + s;
      }
    }
    out += "\n";
    if (r == 0) {
      std::size_t total = width[0] + 2;
      for (std::size_t i = 1; i < width.size(); ++i) total += width[i] + 1;
      out += std::string(total, '-') + "\n";
    }
  }
  return out;
}

std::vector<SweepCell> run_sweep(const SweepSpec& spec, const std::filesystem::path& out,
                                 const RunFn& run, std::ostream* log, int jobs) {
  std::filesystem::create_directories(out);
  std::vector<SweepCell> cells;
  for (const auto& point : expand_grid(spec)) cells.push_back({point, std::nullopt, {}});
  std::mutex log_mu;
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard lock(log_mu);
    *log << msg << "\n";
  };
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      auto& cell = cells[i];
      if (cell.point.skipped) continue;
      say("sweep: " + cell.point.name);
      std::vector<MetricRecord> partial;
      try {
        RunConfig cfg = config_for(spec, cell.point);
        cfg.validate();
        cell.result = run(cfg);
        partial = cell.result->metrics;
      } catch (const std::exception& e) {
        cell.error = e.what();
        say("sweep: " + cell.point.name + " failed: " + e.what());
      }
      std::ofstream csv(out / (cell.point.name + ".csv"));
      write_metrics_csv(csv, partial);
    }
  };
  std::vector<std::thread> pool;
  for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  std::ofstream table(out / "table.csv");
  table << make_table(spec, cells).csv();
  return cells;
}

}  // namespace vitft

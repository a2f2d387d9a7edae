// SPDX-License-Identifier: Apache-2.0
#include "vitft/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <stdexcept>

#include "vitft/trainer.hpp"

namespace vitft {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 64, kRight = 160, kTop = 36, kBottom = 52;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

double nice_step(double span, int target) {
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
    if (raw <= m * mag) return m * mag;
  }
  return 10 * mag;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

std::string render_svg(const Figure& fig) {
  if (fig.series.empty()) throw std::invalid_argument("render_svg: no series");
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : fig.series) {
    if (s.x.empty() || s.x.size() != s.y.size()) {
      throw std::invalid_argument("render_svg: series '" + s.label + "' is empty or ragged");
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double ystep = nice_step(y1 - y0, 5);
  y0 = std::floor(y0 / ystep) * ystep;
  y1 = std::ceil(y1 / ystep) * ystep;
  const double xstep = nice_step(x1 - x0, 8);

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + (1 - (y - y0) / (y1 - y0)) * ph; };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) +
                    "\" height=\"" + num(kHeight) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + num(kLeft + pw / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
         escape(fig.title) + "</text>\n";
  for (double y = y0; y <= y1 + ystep * 1e-6; y += ystep) {
    svg += "<line x1=\"" + num(kLeft) + "\" x2=\"" + num(kLeft + pw) + "\" y1=\"" + num(py(y)) +
           "\" y2=\"" + num(py(y)) + "\" stroke=\"#e0e0e0\"/>\n";
    svg += "<text x=\"" + num(kLeft - 6) + "\" y=\"" + num(py(y) + 4) + "\" text-anchor=\"end\">" +
           tick_label(y) + "</text>\n";
  }
  for (double x = std::ceil(x0 / xstep) * xstep; x <= x1 + xstep * 1e-6; x += xstep) {
    svg += "<text x=\"" + num(px(x)) + "\" y=\"" + num(kTop + ph + 18) +
           "\" text-anchor=\"middle\">" + tick_label(x) + "</text>\n";
  }
  svg += "<rect x=\"" + num(kLeft) + "\" y=\"" + num(kTop) + "\" width=\"" + num(pw) +
         "\" height=\"" + num(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  svg += "<text x=\"" + num(kLeft + pw / 2) + "\" y=\"" + num(kHeight - 12) +
         "\" text-anchor=\"middle\">" + escape(fig.xlabel) + "</text>\n";
  svg += "<text transform=\"translate(16," + num(kTop + ph / 2) +
         ") rotate(-90)\" text-anchor=\"middle\">" + escape(fig.ylabel) + "</text>\n";
  for (std::size_t k = 0; k < fig.series.size(); ++k) {
    const auto& s = fig.series[k];
    const std::string colour = kPalette[k % std::size(kPalette)];
    std::string points;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      points += (i ? " " : "") + num(px(s.x[i])) + "," + num(py(s.y[i]));
    }
    svg += "<polyline fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"1.8\"" +
           (s.dashed ? " stroke-dasharray=\"6 3\"" : "") + " points=\"" + points + "\"/>\n";
    const double ly = kTop + 14 + 18 * static_cast<double>(k);
    svg += "<line x1=\"" + num(kLeft + pw + 10) + "\" x2=\"" + num(kLeft + pw + 34) + "\" y1=\"" +
           num(ly - 4) + "\" y2=\"" + num(ly - 4) + "\" stroke=\"" + colour + "\" stroke-width=\"1.8\"" +
           (s.dashed ? " stroke-dasharray=\"6 3\"" : "") + "/>\n";
    svg += "<text x=\"" + num(kLeft + pw + 38) + "\" y=\"" + num(ly) + "\">" + escape(s.label) +
           "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

std::vector<std::filesystem::path> emit_curves(const std::vector<std::filesystem::path>& csvs,
                                               const std::filesystem::path& out_dir) {
  if (csvs.empty()) throw std::invalid_argument("emit_curves: no metrics files");
  struct Run {
    std::string stem;
    std::vector<MetricRecord> rows;
  };
  std::vector<Run> runs;
  for (const auto& path : csvs) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    Run r{path.stem().string(), {}};
    try {
      r.rows = read_metrics_csv(in);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": " + e.what());
    }
    if (r.rows.empty()) throw std::invalid_argument(path.string() + ": empty series");
    runs.push_back(std::move(r));
  }

  auto curves = [](const Run& r, const std::string& prefix) {
    Series raw{prefix + "w/o EMA", {}, {}, false}, ema{prefix + "w EMA", {}, {}, true};
    for (const auto& m : r.rows) {
      raw.x.push_back(m.epoch + 1);
      raw.y.push_back(m.val_acc_raw);
      ema.x.push_back(m.epoch + 1);
      ema.y.push_back(m.val_acc_ema);
    }
    return std::pair{raw, ema};
  };

  std::vector<std::pair<std::filesystem::path, std::string>> files;
  Figure overlay{"validation accuracy", "epoch", "top-1 accuracy", {}};
  for (const auto& r : runs) {
    auto [raw, ema] = curves(r, "");
    files.emplace_back(out_dir / (r.stem + ".svg"),
                       render_svg({r.stem, "epoch", "top-1 accuracy", {raw, ema}}));
    auto [oraw, oema] = curves(r, runs.size() > 1 ? r.stem + " " : "");
    overlay.series.push_back(oraw);
    overlay.series.push_back(oema);
  }
  files.emplace_back(out_dir / "overlay.svg", render_svg(overlay));

  static const std::regex tuned(R"((^|_)tuned_layers=(\d+)($|_))");
  std::map<int, std::pair<double, double>> by_k;
  for (const auto& r : runs) {
    std::smatch m;
    if (!std::regex_search(r.stem, m, tuned)) continue;
    double best_raw = 0, best_ema = 0;
    for (const auto& row : r.rows) {
      best_raw = std::max(best_raw, row.val_acc_raw);
      best_ema = std::max(best_ema, row.val_acc_ema);
    }
    by_k[std::stoi(m[2].str())] = {best_raw, best_ema};
  }
  if (!by_k.empty()) {
    Series raw{"w/o EMA", {}, {}, false}, ema{"w EMA", {}, {}, true};
    for (const auto& [k, v] : by_k) {
      raw.x.push_back(k);
      raw.y.push_back(v.first);
      ema.x.push_back(k);
      ema.y.push_back(v.second);
    }
    files.emplace_back(out_dir / "tuned_layers.svg",
                       render_svg({"partial fine-tuning", "tuned layers", "best top-1 accuracy",
                                   {raw, ema}}));
  }

  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& [path, text] : files) {
    write_file(path, text);
    written.push_back(path);
  }
  return written;
}

}  // namespace vitft

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ncalab/error.hpp"

namespace ncalab {

/// A CSV file as header plus string cells. Cells never contain quotes or
/// commas in files this library writes.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::ptrdiff_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  }

  /// Numeric value of a cell; NaN for anything unparsable.
  double number(std::size_t row, std::size_t col) const {
    const std::string& s = rows.at(row).at(col);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    return (end == s.c_str() || *end != '\0') ? std::numeric_limits<double>::quiet_NaN() : v;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(std::istream& in) {
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("CSV file is empty");
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.header.size())
      throw ParseError("CSV row " + std::to_string(t.rows.size() + 2) + " has " +
                       std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline CsvTable load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  return read_csv(in);
}

// ---------------------------------------------------------------------------
// Minimal SVG plotting

struct Series {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
  bool lines = true;
};

namespace detail {

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  return colors[i % 8];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Draws one panel with axes, five ticks per axis and a legend at
/// (ox, oy) of size w x h.
inline void draw_panel(std::ostream& os, double ox, double oy, double w, double h,
                       const std::string& title, const std::string& xlabel,
                       const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      x0 = std::min(x0, s.xs[i]);
      x1 = std::max(x1, s.xs[i]);
      y0 = std::min(y0, s.ys[i]);
      y1 = std::max(y1, s.ys[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;

  const double ml = 60, mr = 10, mt = 24, mb = 36;
  const double pw = w - ml - mr, ph = h - mt - mb;
  auto sx = [&](double v) { return ox + ml + (v - x0) / (x1 - x0) * pw; };
  auto sy = [&](double v) { return oy + mt + (1 - (v - y0) / (y1 - y0)) * ph; };

  os << "<text x='" << ox + w / 2 << "' y='" << oy + 16
     << "' text-anchor='middle' font-size='13'>" << detail::escape_xml(title) << "</text>\n";
  os << "<rect x='" << ox + ml << "' y='" << oy + mt << "' width='" << pw << "' height='" << ph
     << "' fill='none' stroke='#444'/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
    os << "<text x='" << sx(xv) << "' y='" << oy + mt + ph + 14
       << "' text-anchor='middle' font-size='10'>" << detail::num(xv) << "</text>\n";
    os << "<text x='" << ox + ml - 4 << "' y='" << sy(yv) + 3
       << "' text-anchor='end' font-size='10'>" << detail::num(yv) << "</text>\n";
    os << "<line x1='" << ox + ml << "' x2='" << ox + ml + pw << "' y1='" << sy(yv) << "' y2='"
       << sy(yv) << "' stroke='#ddd'/>\n";
  }
  os << "<text x='" << ox + ml + pw / 2 << "' y='" << oy + h - 4
     << "' text-anchor='middle' font-size='11'>" << detail::escape_xml(xlabel) << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = detail::palette(si);
    if (s.lines) {
      os << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
      for (std::size_t i = 0; i < s.xs.size(); ++i)
        if (std::isfinite(s.xs[i]) && std::isfinite(s.ys[i])) os << sx(s.xs[i]) << ',' << sy(s.ys[i]) << ' ';
      os << "'/>\n";
    } else {
      for (std::size_t i = 0; i < s.xs.size(); ++i)
        if (std::isfinite(s.xs[i]) && std::isfinite(s.ys[i]))
          os << "<circle cx='" << sx(s.xs[i]) << "' cy='" << sy(s.ys[i]) << "' r='3' fill='" << color
             << "' fill-opacity='0.75'/>\n";
    }
    if (series.size() > 1)
      os << "<text x='" << ox + ml + 6 << "' y='" << oy + mt + 12 + 12 * si << "' font-size='10' fill='"
         << color << "'>" << detail::escape_xml(s.name) << "</text>\n";
  }
}

/// Small multiples: one panel per group of series, laid out in `cols` columns.
inline void write_svg(std::ostream& os, const std::vector<std::pair<std::string, std::vector<Series>>>& panels,
                      const std::string& xlabel, int cols = 2) {
  const double pw = 420, ph = 260;
  const int n = static_cast<int>(panels.size());
  cols = std::max(1, std::min(cols, n));
  const int rows = (n + cols - 1) / cols;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << pw * cols << "' height='" << ph * rows
     << "' font-family='sans-serif'>\n<rect width='100%' height='100%' fill='white'/>\n";
  for (int i = 0; i < n; ++i)
    draw_panel(os, pw * (i % cols), ph * (i / cols), pw, ph, panels[i].first, xlabel, panels[i].second);
  os << "</svg>\n";
}

/// Renders a CSV written by this library. Sweep tables become a reward
/// against KL scatter grouped by (loss, K); tables whose first column is
/// `step` become one line panel per column, with chosen/rejected style
/// columns sharing a panel. Returns the kind of plot drawn.
inline std::string render_csv_svg(const CsvTable& t, std::ostream& os) {
  const auto c_kl = t.column("final_kl");
  const auto c_rw = t.column("final_expected_reward");
  if (c_kl >= 0 && c_rw >= 0) {
    const auto c_loss = t.column("loss"), c_k = t.column("K"), c_status = t.column("status");
    std::map<std::string, Series> groups;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      if (c_status >= 0 && t.rows[r][c_status] != "ok") continue;
      std::string key = (c_loss >= 0 ? t.rows[r][c_loss] : "run") +
                        (c_k >= 0 ? " K=" + t.rows[r][c_k] : "");
      auto& s = groups[key];
      s.name = key;
      s.lines = false;
      s.xs.push_back(t.number(r, c_kl));
      s.ys.push_back(t.number(r, c_rw));
    }
    std::vector<Series> all;
    for (auto& [k, s] : groups) all.push_back(std::move(s));
    write_svg(os, {{"final expected reward vs KL", all}}, "KL(pi || mu)", 1);
    return "frontier";
  }
  if (t.header.empty() || t.header.front() != "step")
    throw ValidationError("unrecognized CSV: expected a sweep table or a step-indexed trajectory");

  std::vector<double> steps;
  for (std::size_t r = 0; r < t.rows.size(); ++r) steps.push_back(t.number(r, 0));
  // Columns differing only by a chosen/rejected or _<n> suffix share a panel.
  auto panel_key = [](std::string name) {
    for (const char* tag : {"chosen_", "rejected_"}) {
      const auto p = name.find(tag);
      if (p != std::string::npos) return name.erase(p, std::string(tag).size());
    }
    const auto us = name.find_last_of('_');
    if (us != std::string::npos && us + 1 < name.size() &&
        std::all_of(name.begin() + us + 1, name.end(), ::isdigit))
      return name.substr(0, us);
    return name;
  };
  std::vector<std::pair<std::string, std::vector<Series>>> panels;
  for (std::size_t c = 1; c < t.header.size(); ++c) {
    Series s{t.header[c], steps, {}, true};
    for (std::size_t r = 0; r < t.rows.size(); ++r) s.ys.push_back(t.number(r, c));
    const std::string key = panel_key(t.header[c]);
    auto it = std::find_if(panels.begin(), panels.end(), [&](const auto& p) { return p.first == key; });
    if (it == panels.end()) {
      panels.push_back({key, {}});
      it = std::prev(panels.end());
    }
    it->second.push_back(std::move(s));
  }
  write_svg(os, panels, "step", 2);
  return "trajectory";
}

}  // namespace ncalab

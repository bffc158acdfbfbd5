#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "shieldbench/report.hpp"

namespace shieldbench {

struct PlotSeries {
  std::string label;
  AggregateTable table;
};

struct PlotOptions {
  std::string title;
  double panel_width = 420.0;
  double panel_height = 300.0;
  double min_rate = 1e-6;  // floor for the log-scale mistake-rate axis
};

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string svg_escape(std::string_view s) {
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

inline const char* series_color(std::size_t i) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  return kColors[i % 6];
}

struct Range {
  double lo = 0.0;
  double hi = 1.0;
  void widen() {
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

struct Panel {
  double x0, y0, w, h;
  Range xr, yr;
  double px(double x) const { return x0 + (x - xr.lo) / (xr.hi - xr.lo) * w; }
  double py(double y) const { return y0 + h - (y - yr.lo) / (yr.hi - yr.lo) * h; }
};

inline std::string axes(const Panel& p, const std::string& ylabel, const std::string& xlabel) {
  std::string s = "<rect x=\"" + svg_num(p.x0) + "\" y=\"" + svg_num(p.y0) + "\" width=\"" + svg_num(p.w) +
                  "\" height=\"" + svg_num(p.h) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = p.yr.lo + (p.yr.hi - p.yr.lo) * k / 4.0;
    const double y = p.py(yv);
    s += "<text x=\"" + svg_num(p.x0 - 6) + "\" y=\"" + svg_num(y + 4) + "\" text-anchor=\"end\" font-size=\"10\">" +
         svg_num(yv) + "</text>\n";
    const double xv = p.xr.lo + (p.xr.hi - p.xr.lo) * k / 4.0;
    s += "<text x=\"" + svg_num(p.px(xv)) + "\" y=\"" + svg_num(p.y0 + p.h + 14) +
         "\" text-anchor=\"middle\" font-size=\"10\">" + svg_num(xv) + "</text>\n";
  }
  s += "<text x=\"" + svg_num(p.x0 + p.w / 2) + "\" y=\"" + svg_num(p.y0 + p.h + 30) +
       "\" text-anchor=\"middle\" font-size=\"11\">" + xlabel + "</text>\n";
  s += "<text x=\"" + svg_num(p.x0) + "\" y=\"" + svg_num(p.y0 - 8) + "\" font-size=\"11\">" + ylabel + "</text>\n";
  return s;
}

}  // namespace detail

/// Two panels: symlog mean return with a standard-error band on the left,
/// log10 mistake rate on the right. Output bytes depend only on the input.
inline std::string render_svg(const std::vector<PlotSeries>& series, const PlotOptions& opt = {}) {
  using detail::svg_num;
  if (series.empty()) throw std::invalid_argument("plot needs at least one series");
  for (const auto& s : series) {
    if (s.table.rows.empty()) throw std::invalid_argument("plot series '" + s.label + "' has no rows");
  }
  auto log_rate = [&](double r) { return std::log10(std::max(r, opt.min_rate)); };

  detail::Range xr{1e300, -1e300}, ret{1e300, -1e300}, rate{1e300, -1e300};
  for (const auto& s : series) {
    for (const auto& r : s.table.rows) {
      const double e = static_cast<double>(r.episode);
      xr.lo = std::min(xr.lo, e);
      xr.hi = std::max(xr.hi, e);
      ret.lo = std::min(ret.lo, symlog(r.mean_return - r.se_return));
      ret.hi = std::max(ret.hi, symlog(r.mean_return + r.se_return));
      rate.lo = std::min(rate.lo, log_rate(r.mean_mistake_rate));
      rate.hi = std::max(rate.hi, log_rate(r.mean_mistake_rate));
    }
  }
  xr.widen();
  ret.widen();
  rate.widen();

  const double margin = 60.0, top = 50.0, gap = 80.0;
  const double width = 2 * opt.panel_width + gap + 2 * margin;
  const double height = opt.panel_height + top + 60.0 + 18.0 * static_cast<double>(series.size());
  const detail::Panel left{margin, top, opt.panel_width, opt.panel_height, xr, ret};
  const detail::Panel right{margin + opt.panel_width + gap, top, opt.panel_width, opt.panel_height, xr, rate};

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg_num(width) + "\" height=\"" +
                    svg_num(height) + "\" viewBox=\"0 0 " + svg_num(width) + " " + svg_num(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!opt.title.empty()) {
    svg += "<text x=\"" + svg_num(width / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
           detail::svg_escape(opt.title) + "</text>\n";
  }
  svg += "<g class=\"panel-return\">\n" + detail::axes(left, "symlog mean return", "episode");
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& rows = series[i].table.rows;
    const char* color = detail::series_color(i);
    if (series[i].table.runs > 1) {
      std::string pts;
      for (const auto& r : rows) {
        pts += svg_num(left.px(double(r.episode))) + "," + svg_num(left.py(symlog(r.mean_return + r.se_return))) + " ";
      }
      for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
        pts += svg_num(left.px(double(it->episode))) + "," +
               svg_num(left.py(symlog(it->mean_return - it->se_return))) + " ";
      }
      svg += "<polygon class=\"se-band\" points=\"" + pts + "\" fill=\"" + color +
             "\" fill-opacity=\"0.25\" stroke=\"none\"/>\n";
    }
    std::string line;
    for (const auto& r : rows) {
      line += svg_num(left.px(double(r.episode))) + "," + svg_num(left.py(symlog(r.mean_return))) + " ";
    }
    svg += "<polyline class=\"series\" points=\"" + line + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1.5\"/>\n";
  }
  svg += "</g>\n<g class=\"panel-mistake-rate\">\n" + detail::axes(right, "log10 mistake rate", "episode");
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::string line;
    for (const auto& r : series[i].table.rows) {
      line += svg_num(right.px(double(r.episode))) + "," + svg_num(right.py(log_rate(r.mean_mistake_rate))) + " ";
    }
    svg += "<polyline class=\"series\" points=\"" + line + "\" fill=\"none\" stroke=\"" + detail::series_color(i) +
           "\" stroke-width=\"1.5\"/>\n";
  }
  svg += "</g>\n<g class=\"legend\">\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = top + opt.panel_height + 50.0 + 18.0 * static_cast<double>(i);
    svg += "<g class=\"legend-entry\"><rect x=\"" + svg_num(margin) + "\" y=\"" + svg_num(y - 9) +
           "\" width=\"12\" height=\"12\" fill=\"" + detail::series_color(i) + "\"/><text x=\"" +
           svg_num(margin + 18) + "\" y=\"" + svg_num(y + 1) + "\" font-size=\"11\">" +
           detail::svg_escape(series[i].label) + "</text></g>\n";
  }
  svg += "</g>\n</svg>\n";
  return svg;
}

}  // namespace shieldbench

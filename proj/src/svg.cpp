#include "svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace knnqe::detail {

namespace {

constexpr double kWidth = 640, kHeight = 480;
constexpr double kLeft = 70, kRight = 160, kTop = 40, kBottom = 60;

const char* const kColours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (lo > hi) lo = 0, hi = 1;
    if (lo == hi) lo -= 0.5, hi += 0.5;
    const double pad = (hi - lo) * 0.05;
    lo -= pad;
    hi += pad;
  }
};

}  // namespace

std::string render_svg(const Plot& plot) {
  Range xr, yr;
  for (const auto& s : plot.series) {
    for (const auto& p : s.points) xr.add(p.x), yr.add(p.y);
  }
  xr.finish();
  yr.finish();
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto sx = [&](double x) { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto sy = [&](double y) { return kTop + ph - (y - yr.lo) / (yr.hi - yr.lo) * ph; };

  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" +
                    num(kHeight) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + num(kLeft + pw / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
         escape(plot.title) + "</text>\n";
  out += "<rect x=\"" + num(kLeft) + "\" y=\"" + num(kTop) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    const double fy = yr.lo + (yr.hi - yr.lo) * i / 4.0;
    out += "<text x=\"" + num(sx(fx)) + "\" y=\"" + num(kTop + ph + 18) + "\" text-anchor=\"middle\">" + tick(fx) +
           "</text>\n";
    out += "<text x=\"" + num(kLeft - 6) + "\" y=\"" + num(sy(fy) + 4) + "\" text-anchor=\"end\">" + tick(fy) +
           "</text>\n";
  }
  out += "<text x=\"" + num(kLeft + pw / 2) + "\" y=\"" + num(kHeight - 15) + "\" text-anchor=\"middle\">" +
         escape(plot.x_label) + "</text>\n";
  out += "<text transform=\"translate(18," + num(kTop + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
         escape(plot.y_label) + "</text>\n";

  for (std::size_t s = 0; s < plot.series.size(); ++s) {
    const auto& series = plot.series[s];
    const std::string colour = kColours[s % std::size(kColours)];
    if (series.connect && series.points.size() > 1) {
      out += "<polyline fill=\"none\" stroke=\"" + colour + "\" points=\"";
      for (const auto& p : series.points) out += num(sx(p.x)) + "," + num(sy(p.y)) + " ";
      out += "\"/>\n";
    }
    for (const auto& p : series.points) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) continue;
      out += "<circle cx=\"" + num(sx(p.x)) + "\" cy=\"" + num(sy(p.y)) + "\" r=\"4\" fill=\"" + colour + "\">";
      if (!p.label.empty()) out += "<title>" + escape(p.label) + "</title>";
      out += "</circle>\n";
    }
    const double ly = kTop + 10 + 18.0 * static_cast<double>(s);
    out += "<circle cx=\"" + num(kWidth - kRight + 16) + "\" cy=\"" + num(ly) + "\" r=\"4\" fill=\"" + colour +
           "\"/>\n";
    out += "<text x=\"" + num(kWidth - kRight + 26) + "\" y=\"" + num(ly + 4) + "\">" + escape(series.name) +
           "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace knnqe::detail

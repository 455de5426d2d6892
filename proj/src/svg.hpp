#pragma once

// Minimal scatter and line plots as standalone SVG text.

#include <string>
#include <vector>

namespace knnqe::detail {

struct PlotPoint {
  double x;
  double y;
  std::string label;
};

struct PlotSeries {
  std::string name;
  std::vector<PlotPoint> points;
  bool connect = false;  // draw a polyline through the points in order
};

struct Plot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<PlotSeries> series;
};

std::string render_svg(const Plot& plot);

}  // namespace knnqe::detail

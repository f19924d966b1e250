#pragma once

#include <string>
#include <utility>
#include <vector>

namespace lenspsych {

struct SvgSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
  bool line = true;
  bool markers = true;
};

struct SvgChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<SvgSeries> series;
  bool log10_x = false;  // tick labels show 10^x
};

/// Self-contained static SVG line/scatter chart.
std::string render_svg(const SvgChart& chart);

}  // namespace lenspsych

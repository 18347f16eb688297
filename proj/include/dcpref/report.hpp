#pragma once

// Plain-text outputs: deterministic number formatting, CSV rows and a small
// SVG line chart.

#include <ostream>
#include <string>
#include <vector>

namespace dcpref {

/// Shortest decimal form that round-trips to the same double.
std::string format_double(double v);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartOptions {
  std::string title;
  std::string x_label = "query";
  std::string y_label = "relative gap";
  int width = 640;
  int height = 400;
};

void write_svg_chart(std::ostream& out, const std::vector<Series>& series, const ChartOptions& options);

}  // namespace dcpref

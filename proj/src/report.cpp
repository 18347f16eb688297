#include "dcpref/report.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>

namespace dcpref {

namespace {

std::string escape_xml(const std::string& s) {
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

std::string fixed(double v, int digits) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, digits);
  return std::string(buf, r.ptr);
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

void write_svg_chart(std::ostream& out, const std::vector<Series>& series, const ChartOptions& o) {
  static constexpr std::array<const char*, 8> palette{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                                      "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  const double left = 60, right = 160, top = 40, bottom = 50;
  const double pw = o.width - left - right, ph = o.height - top - bottom;

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y)
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  y0 = std::min(y0, 0.0);
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << o.width << "\" height=\"" << o.height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << fixed(left + pw / 2, 1) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << escape_xml(o.title) << "</text>\n";
  out << "<line x1=\"" << fixed(left, 1) << "\" y1=\"" << fixed(top + ph, 1) << "\" x2=\"" << fixed(left + pw, 1)
      << "\" y2=\"" << fixed(top + ph, 1) << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << fixed(left, 1) << "\" y1=\"" << fixed(top, 1) << "\" x2=\"" << fixed(left, 1)
      << "\" y2=\"" << fixed(top + ph, 1) << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double xv = x0 + (x1 - x0) * k / 5.0, yv = y0 + (y1 - y0) * k / 5.0;
    out << "<text x=\"" << fixed(px(xv), 1) << "\" y=\"" << fixed(top + ph + 16, 1)
        << "\" text-anchor=\"middle\">" << fixed(xv, 0) << "</text>\n";
    out << "<text x=\"" << fixed(left - 6, 1) << "\" y=\"" << fixed(py(yv) + 4, 1) << "\" text-anchor=\"end\">"
        << fixed(yv, 2) << "</text>\n";
  }
  out << "<text x=\"" << fixed(left + pw / 2, 1) << "\" y=\"" << o.height - 12 << "\" text-anchor=\"middle\">"
      << escape_xml(o.x_label) << "</text>\n";
  out << "<text transform=\"translate(16," << fixed(top + ph / 2, 1) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape_xml(o.y_label) << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = palette[s % palette.size()];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    const std::size_t n = std::min(series[s].x.size(), series[s].y.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(series[s].y[i])) continue;
      out << fixed(px(series[s].x[i]), 2) << ',' << fixed(py(series[s].y[i]), 2) << ' ';
    }
    out << "\"/>\n";
    const double ly = top + 14.0 + 18.0 * static_cast<double>(s);
    out << "<line x1=\"" << fixed(left + pw + 10, 1) << "\" y1=\"" << fixed(ly, 1) << "\" x2=\""
        << fixed(left + pw + 30, 1) << "\" y2=\"" << fixed(ly, 1) << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << fixed(left + pw + 34, 1) << "\" y=\"" << fixed(ly + 4, 1) << "\">"
        << escape_xml(series[s].label) << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace dcpref

#include "cprobe/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace cprobe::svg {
namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace

std::string escape_xml(const std::string& text) {
  std::string out;
  for (const char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string render(const LineChart& chart) {
  const double left = 70;
  const double right = 170;
  const double top = 40;
  const double bottom = 55;
  const double plot_w = chart.width - left - right;
  const double plot_h = chart.height - top - bottom;

  double xmin = std::numeric_limits<double>::infinity();
  double xmax = -xmin;
  double ymin = xmin;
  double ymax = -xmin;
  for (const auto& s : chart.series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  for (const auto& b : chart.bands) {
    xmin = std::min(xmin, b.x0);
    xmax = std::max(xmax, b.x1);
  }
  if (!std::isfinite(xmin)) {
    xmin = 0;
    xmax = 1;
  }
  if (!std::isfinite(ymin)) {
    ymin = 0;
    ymax = 1;
  }
  if (chart.y_range) {
    ymin = chart.y_range->first;
    ymax = chart.y_range->second;
  }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;

  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * plot_w; };
  auto py = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * plot_h; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << chart.width << "\" height=\"" << chart.height
    << "\" viewBox=\"0 0 " << chart.width << ' ' << chart.height << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << fmt(chart.width / 2.0) << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
    << "font-size=\"16\">" << escape_xml(chart.title) << "</text>\n";

  o << "<g class=\"bands\">\n";
  for (const auto& b : chart.bands) {
    o << "<rect x=\"" << fmt(px(b.x0)) << "\" y=\"" << fmt(top) << "\" width=\"" << fmt(px(b.x1) - px(b.x0))
      << "\" height=\"" << fmt(plot_h) << "\" fill=\"" << b.color << "\" fill-opacity=\"" << fmt(b.opacity)
      << "\"/>\n";
  }
  o << "</g>\n";

  o << "<g class=\"axes\" stroke=\"black\" stroke-width=\"1\">\n";
  o << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(top + plot_h) << "\" x2=\"" << fmt(left + plot_w) << "\" y2=\""
    << fmt(top + plot_h) << "\"/>\n";
  o << "<line x1=\"" << fmt(left) << "\" y1=\"" << fmt(top) << "\" x2=\"" << fmt(left) << "\" y2=\"" << fmt(top + plot_h)
    << "\"/>\n";
  o << "</g>\n";

  o << "<g class=\"ticks\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int t = 0; t <= 5; ++t) {
    const double xv = xmin + (xmax - xmin) * t / 5.0;
    const double yv = ymin + (ymax - ymin) * t / 5.0;
    o << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << fmt(top + plot_h + 16) << "\" text-anchor=\"middle\">"
      << tick_label(xv) << "</text>\n";
    o << "<text x=\"" << fmt(left - 6) << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">" << tick_label(yv)
      << "</text>\n";
  }
  o << "</g>\n";
  o << "<text x=\"" << fmt(left + plot_w / 2) << "\" y=\"" << fmt(chart.height - 12.0)
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << escape_xml(chart.x_label)
    << "</text>\n";
  o << "<text transform=\"translate(18," << fmt(top + plot_h / 2) << ") rotate(-90)\" text-anchor=\"middle\" "
    << "font-family=\"sans-serif\" font-size=\"13\">" << escape_xml(chart.y_label) << "</text>\n";

  for (const double h : chart.hlines) {
    if (h < ymin || h > ymax) continue;
    o << "<line class=\"hline\" x1=\"" << fmt(left) << "\" y1=\"" << fmt(py(h)) << "\" x2=\"" << fmt(left + plot_w)
      << "\" y2=\"" << fmt(py(h)) << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  }

  for (std::size_t si = 0; si < chart.series.size(); ++si) {
    const auto& s = chart.series[si];
    o << "<g class=\"series\" data-name=\"" << escape_xml(s.name) << "\">\n";
    o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (!first) o << ' ';
      o << fmt(px(s.x[i])) << ',' << fmt(py(std::clamp(s.y[i], ymin, ymax)));
      first = false;
    }
    o << "\"/>\n";
    if (s.markers) {
      for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
        if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
        o << "<circle cx=\"" << fmt(px(s.x[i])) << "\" cy=\"" << fmt(py(std::clamp(s.y[i], ymin, ymax)))
          << "\" r=\"2.5\" fill=\"" << s.color << "\"/>\n";
      }
    }
    o << "</g>\n";
    const double ly = top + 14.0 + 18.0 * static_cast<double>(si);
    o << "<line x1=\"" << fmt(left + plot_w + 12) << "\" y1=\"" << fmt(ly) << "\" x2=\"" << fmt(left + plot_w + 32)
      << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << fmt(left + plot_w + 36) << "\" y=\"" << fmt(ly + 4)
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape_xml(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace cprobe::svg

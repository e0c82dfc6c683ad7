#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

// Minimal deterministic SVG line charts.
namespace cprobe::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  std::string color = "#1f77b4";
  bool markers = false;
};

// Shaded vertical band, e.g. one sentence of a story.
struct Band {
  double x0 = 0.0;
  double x1 = 0.0;
  std::string color;
  double opacity = 0.15;
};

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  std::vector<Band> bands;
  std::vector<double> hlines;  // dashed horizontal reference lines
  std::optional<std::pair<double, double>> y_range;
  int width = 900;
  int height = 420;
};

std::string render(const LineChart& chart);

std::string escape_xml(const std::string& text);

}  // namespace cprobe::svg

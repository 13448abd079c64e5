#pragma once

// Minimal scatter-plot SVG writer for the pca command.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <string>
#include <vector>

namespace pargan::cli {

struct Series {
  std::string name;
  std::string color;  // any SVG colour
  std::vector<std::array<double, 2>> points;
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, std::round(v * 100) / 100);
  return std::string(buf, end);
}

inline std::string escape(const std::string& s) {
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

}  // namespace detail

/// Points as small circles, each series' centroid as a larger outlined cross,
/// legend top-left. Axes share one scale so distances read true.
inline std::string scatter_svg(const std::vector<Series>& series, const std::string& x_label,
                               const std::string& y_label) {
  constexpr double kSize = 480, kPad = 40;
  double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
  bool first = true;
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      if (first) lo_x = hi_x = p[0], lo_y = hi_y = p[1], first = false;
      lo_x = std::min(lo_x, p[0]), hi_x = std::max(hi_x, p[0]);
      lo_y = std::min(lo_y, p[1]), hi_y = std::max(hi_y, p[1]);
    }
  }
  const double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-12});
  const double cx = 0.5 * (lo_x + hi_x), cy = 0.5 * (lo_y + hi_y);
  const double k = (kSize - 2 * kPad) / span;
  auto sx = [&](double x) { return kSize / 2 + (x - cx) * k; };
  auto sy = [&](double y) { return kSize / 2 - (y - cy) * k; };

  using detail::num;
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kSize) + "\" height=\"" + num(kSize) +
                    "\" viewBox=\"0 0 " + num(kSize) + " " + num(kSize) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + num(kSize / 2) + "\" y=\"" + num(kSize - 8) + "\" text-anchor=\"middle\">" +
         detail::escape(x_label) + "</text>\n";
  out += "<text x=\"12\" y=\"" + num(kSize / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 12 " +
         num(kSize / 2) + ")\">" + detail::escape(y_label) + "</text>\n";
  for (const auto& s : series) {
    out += "<g fill=\"" + s.color + "\" fill-opacity=\"0.6\">\n";
    for (const auto& p : s.points) out += "<circle cx=\"" + num(sx(p[0])) + "\" cy=\"" + num(sy(p[1])) + "\" r=\"2.5\"/>\n";
    out += "</g>\n";
  }
  for (const auto& s : series) {
    if (s.points.empty()) continue;
    double mx = 0, my = 0;
    for (const auto& p : s.points) mx += p[0], my += p[1];
    mx = sx(mx / s.points.size()), my = sy(my / s.points.size());
    out += "<path d=\"M" + num(mx - 7) + " " + num(my) + "h14M" + num(mx) + " " + num(my - 7) + "v14\" stroke=\"black\" stroke-width=\"4\"/>\n";
    out += "<path d=\"M" + num(mx - 6) + " " + num(my) + "h12M" + num(mx) + " " + num(my - 6) + "v12\" stroke=\"" + s.color +
           "\" stroke-width=\"2\"/>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = 18 + 16 * static_cast<double>(i);
    out += "<circle cx=\"" + num(kPad - 20) + "\" cy=\"" + num(y - 4) + "\" r=\"4\" fill=\"" + series[i].color + "\"/>\n";
    out += "<text x=\"" + num(kPad - 10) + "\" y=\"" + num(y) + "\">" + detail::escape(series[i].name) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace pargan::cli

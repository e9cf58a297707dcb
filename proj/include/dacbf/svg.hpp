#ifndef DACBF_SVG_HPP
#define DACBF_SVG_HPP

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dacbf::svg {

/// Minimal fixed-layout plots. Output depends only on the inputs, so reports
/// stay byte-stable.

struct Series {
  std::string label;
  std::vector<double> x, y;
};

namespace detail {

inline std::string num(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

inline std::string tick(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
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

constexpr double kW = 640, kH = 400, kL = 70, kR = 20, kT = 40, kB = 50;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kL + (x - x0) / (x1 - x0) * (kW - kL - kR); }
  double py(double y) const { return kH - kB - (y - y0) / (y1 - y0) * (kH - kT - kB); }
};

inline Frame frame(double x0, double x1, double y0, double y1) {
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) y1 = y0 + 1.0;
  const double pad = 0.05 * (y1 - y0);
  return {x0, x1, y0 - pad, y1 + pad};
}

inline void axes(std::ostringstream& os, const Frame& f, const std::string& title, const std::string& xl,
                 const std::string& yl) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n"
     << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << kH - kB + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
       << tick(xv) << "</text>\n"
       << "<text x=\"" << kL - 6 << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
       << tick(yv) << "</text>\n";
  }
  os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(xl)
     << "</text>\n"
     << "<text x=\"16\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << kH / 2 << ")\">" << escape(yl) << "</text>\n";
}

}  // namespace detail

/// Line plot with markers; every series must have matching x/y lengths.
inline std::string line_plot(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                             const std::string& ylabel) {
  using namespace detail;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("svg::line_plot: x/y size mismatch");
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  const auto f = frame(x0, x1, y0, y1);
  std::ostringstream os;
  axes(os, f, title, xlabel, ylabel);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* col = kColors[k % 6];
    const auto& s = series[k];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) os << (i ? " " : "") << num(f.px(s.x[i])) << ',' << num(f.py(s.y[i]));
    os << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      os << "<circle cx=\"" << num(f.px(s.x[i])) << "\" cy=\"" << num(f.py(s.y[i])) << "\" r=\"3\" fill=\"" << col
         << "\"/>\n";
    os << "<text x=\"" << kW - kR - 4 << "\" y=\"" << kT + 14 * (k + 1) << "\" text-anchor=\"end\" font-size=\"12\" fill=\""
       << col << "\">" << escape(s.label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Histogram of `values` over `bins` equal-width bins; returns the SVG and
/// fills `counts` and `edges` (bins + 1) for the companion CSV.
inline std::string histogram(const std::vector<double>& values, int bins, const std::string& title,
                             const std::string& xlabel, std::vector<int>* counts = nullptr,
                             std::vector<double>* edges = nullptr) {
  using namespace detail;
  if (bins < 1) throw std::invalid_argument("svg::histogram: bins must be >= 1");
  double lo = 0.0, hi = 1.0;
  if (!values.empty()) {
    lo = *std::min_element(values.begin(), values.end());
    hi = *std::max_element(values.begin(), values.end());
  }
  if (!(hi > lo)) hi = lo + 1.0;
  std::vector<int> c(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    auto b = static_cast<int>((v - lo) / (hi - lo) * bins);
    ++c[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))];
  }
  std::vector<double> e;
  for (int i = 0; i <= bins; ++i) e.push_back(lo + (hi - lo) * i / bins);
  const int cmax = c.empty() ? 1 : std::max(1, *std::max_element(c.begin(), c.end()));
  const auto f = frame(lo, hi, 0.0, cmax);
  std::ostringstream os;
  axes(os, f, title, xlabel, "count");
  for (int i = 0; i < bins; ++i) {
    const double xa = f.px(e[i]), xb = f.px(e[i + 1]), ya = f.py(c[i]), yb = f.py(0.0);
    os << "<rect x=\"" << num(xa) << "\" y=\"" << num(ya) << "\" width=\"" << num(std::max(0.0, xb - xa - 1))
       << "\" height=\"" << num(yb - ya) << "\" fill=\"" << kColors[0] << "\"/>\n";
  }
  os << "</svg>\n";
  if (counts) *counts = c;
  if (edges) *edges = e;
  return os.str();
}

}  // namespace dacbf::svg

#endif  // DACBF_SVG_HPP

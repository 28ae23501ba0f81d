#include "lsdm/trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace lsdm {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void check_grid(const TraceGrid& g) {
  if (!g.aie.allFinite() || !std::isfinite(g.ate)) throw std::invalid_argument("grid contains non-finite values");
  if (static_cast<std::size_t>(g.aie.rows()) != g.rows.size())
    throw std::invalid_argument("grid row labels do not match the data");
}

// White to dark purple, like the usual tracing heatmaps.
std::string color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(255 - t * (255 - 84)));
  const int g = static_cast<int>(std::lround(255 - t * (255 - 39)));
  const int b = static_cast<int>(std::lround(255 - t * (255 - 143)));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << body;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

std::string grid_csv(const TraceGrid& g) {
  check_grid(g);
  std::string out = "role";
  for (int l = 0; l < g.aie.cols(); ++l) out += ",layer_" + std::to_string(l);
  out += "\n";
  for (int r = 0; r < g.aie.rows(); ++r) {
    out += g.rows[r];
    for (int l = 0; l < g.aie.cols(); ++l) out += "," + fmt("%.9g", g.aie(r, l));
    out += "\n";
  }
  return out;
}

std::string grid_svg(const TraceGrid& g, const std::string& title) {
  check_grid(g);
  const int rows = static_cast<int>(g.aie.rows());
  const int cols = static_cast<int>(g.aie.cols());
  const int cell = 36, left = 90, top = 40, bar_w = 14;
  const int width = left + cols * cell + 80;
  const int height = top + rows * cell + 50;
  double vmax = g.aie.size() ? g.aie.maxCoeff() : 0.0;
  double vmin = g.aie.size() ? std::min(0.0, g.aie.minCoeff()) : 0.0;
  if (vmax <= vmin) vmax = vmin + 1e-12;

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
       std::to_string(height) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + std::to_string(left) + "\" y=\"20\" font-size=\"13\">" + title + "</text>\n";
  for (int r = 0; r < rows; ++r) {
    const int y = top + r * cell;
    s += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" + std::to_string(y + cell / 2 + 4) +
         "\" text-anchor=\"end\">" + g.rows[r] + "</text>\n";
    for (int l = 0; l < cols; ++l) {
      const double v = g.aie(r, l);
      s += "<rect x=\"" + std::to_string(left + l * cell) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
           std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"" +
           color((v - vmin) / (vmax - vmin)) + "\"><title>" + fmt("%.6g", v) + "</title></rect>\n";
    }
  }
  const int axis_y = top + rows * cell;
  for (int l = 0; l < cols; ++l)
    s += "<text x=\"" + std::to_string(left + l * cell + cell / 2) + "\" y=\"" + std::to_string(axis_y + 14) +
         "\" text-anchor=\"middle\">" + std::to_string(l) + "</text>\n";
  s += "<text x=\"" + std::to_string(left + cols * cell / 2) + "\" y=\"" + std::to_string(axis_y + 32) +
       "\" text-anchor=\"middle\">layer</text>\n";

  // color scale
  const int bx = left + cols * cell + 16;
  const int steps = 10;
  const int bh = std::max(1, rows * cell / steps);
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / (steps - 1);
    s += "<rect x=\"" + std::to_string(bx) + "\" y=\"" + std::to_string(top + k * bh) + "\" width=\"" +
         std::to_string(bar_w) + "\" height=\"" + std::to_string(bh) + "\" fill=\"" + color(t) + "\"/>\n";
  }
  s += "<text x=\"" + std::to_string(bx + bar_w + 4) + "\" y=\"" + std::to_string(top + 9) + "\">" +
       fmt("%.3g", vmax) + "</text>\n";
  s += "<text x=\"" + std::to_string(bx + bar_w + 4) + "\" y=\"" + std::to_string(top + steps * bh) + "\">" +
       fmt("%.3g", vmin) + "</text>\n";
  s += "</svg>\n";
  return s;
}

void emit_grid(const TraceGrid& grid, const std::filesystem::path& stem, const std::string& title) {
  // Render both documents first so a bad grid leaves nothing on disk.
  const std::string csv = grid_csv(grid);
  const std::string svg = grid_svg(grid, title.empty() ? to_string(grid.component) : title);
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  auto csv_path = stem;
  csv_path += ".csv";
  auto svg_path = stem;
  svg_path += ".svg";
  write_file(csv_path, csv);
  write_file(svg_path, svg);
}

}  // namespace lsdm

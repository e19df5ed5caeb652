#include "stgc/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>

#include <json.hpp>

#include "stgc/error.hpp"

namespace stgc {

namespace {

using json = nlohmann::json;

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

struct Point {
  double x;
  double y;
};

// Consecutive runs of finite points; a null or missing value breaks the line.
using Polyline = std::vector<std::vector<Point>>;

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string tick_label(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

const json* lookup(const json& record, const std::string& path) {
  const json* cur = &record;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (cur->is_object()) {
      const auto it = cur->find(part);
      if (it == cur->end()) return nullptr;
      cur = &*it;
    } else if (cur->is_array()) {
      if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) return nullptr;
      const std::size_t idx = std::stoul(part);
      if (idx >= cur->size()) return nullptr;
      cur = &(*cur)[idx];
    } else {
      return nullptr;
    }
    if (dot == std::string::npos) return cur;
    start = dot + 1;
  }
}

std::vector<json> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::vector<json> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      fail(ErrorKind::Parse, path.string() + ":" + std::to_string(line_no) + ": invalid JSON: " + e.what());
    }
    if (!out.back().is_object()) {
      fail(ErrorKind::Parse, path.string() + ":" + std::to_string(line_no) + ": expected a JSON object");
    }
  }
  return out;
}

Polyline extract(const std::vector<json>& records, const std::string& series, const std::filesystem::path& path) {
  Polyline line(1);
  bool present = false;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const json* step = lookup(records[i], "step");
    const double x = step && step->is_number() ? step->get<double>() : static_cast<double>(i);
    const json* v = lookup(records[i], series);
    if (v) present = true;
    if (v && v->is_number() && std::isfinite(v->get<double>())) {
      line.back().push_back({x, v->get<double>()});
    } else if (!line.back().empty()) {
      line.emplace_back();
    }
  }
  if (!present) fail(ErrorKind::InvalidArgument, "series '" + series + "' not found in '" + path.string() + "'");
  std::erase_if(line, [](const auto& run) { return run.empty(); });
  return line;
}

}  // namespace

std::string render_svg(const std::vector<std::filesystem::path>& jsonl_paths,
                       const std::vector<std::string>& series, const PlotOptions& options) {
  require(!series.empty(), ErrorKind::InvalidArgument, "plot: empty series list");
  require(!jsonl_paths.empty(), ErrorKind::InvalidArgument, "plot: no input files");

  std::vector<std::vector<json>> files;
  for (const auto& p : jsonl_paths) files.push_back(read_records(p));

  const int w = options.panel_width, h = options.panel_height;
  const int left = 70, right = 20, top = options.title.empty() ? 20 : 44, bottom = 50;
  const int legend_rows = static_cast<int>(jsonl_paths.size());
  const int legend_h = 18 * legend_rows + 10;
  const int total_h = top + static_cast<int>(series.size()) * (h + bottom) + legend_h;
  const int total_w = left + w + right;

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(total_w) + "\" height=\"" +
         std::to_string(total_h) + "\" viewBox=\"0 0 " + std::to_string(total_w) + " " + std::to_string(total_h) +
         "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!options.title.empty()) {
    svg += "<text x=\"" + std::to_string(total_w / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" +
           escape(options.title) + "</text>\n";
  }

  for (std::size_t s = 0; s < series.size(); ++s) {
    std::vector<Polyline> lines;
    for (std::size_t f = 0; f < files.size(); ++f) lines.push_back(extract(files[f], series[s], jsonl_paths[f]));

    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& line : lines) {
      for (const auto& run : line) {
        for (const auto& p : run) {
          x0 = std::min(x0, p.x);
          x1 = std::max(x1, p.x);
          y0 = std::min(y0, p.y);
          y1 = std::max(y1, p.y);
        }
      }
    }
    if (!std::isfinite(x0)) {
      x0 = 0;
      x1 = 1;
      y0 = 0;
      y1 = 1;
    }
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) {
      y0 -= 0.5;
      y1 += 0.5;
    }
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;

    const int oy = top + static_cast<int>(s) * (h + bottom);
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * w; };
    auto py = [&](double y) { return oy + h - (y - y0) / (y1 - y0) * h; };

    svg += "<g>\n";
    svg += "<rect x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(oy) + "\" width=\"" + std::to_string(w) +
           "\" height=\"" + std::to_string(h) + "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double fx = x0 + (x1 - x0) * t / 4.0;
      const double fy = y0 + (y1 - y0) * t / 4.0;
      svg += "<line x1=\"" + num(px(fx)) + "\" y1=\"" + std::to_string(oy + h) + "\" x2=\"" + num(px(fx)) +
             "\" y2=\"" + std::to_string(oy + h + 4) + "\" stroke=\"#333\"/>\n";
      svg += "<text x=\"" + num(px(fx)) + "\" y=\"" + std::to_string(oy + h + 16) + "\" text-anchor=\"middle\">" +
             escape(tick_label(fx)) + "</text>\n";
      svg += "<line x1=\"" + std::to_string(left - 4) + "\" y1=\"" + num(py(fy)) + "\" x2=\"" + std::to_string(left) +
             "\" y2=\"" + num(py(fy)) + "\" stroke=\"#333\"/>\n";
      svg += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + num(py(fy)) + "\" x2=\"" + std::to_string(left + w) +
             "\" y2=\"" + num(py(fy)) + "\" stroke=\"#ddd\"/>\n";
      svg += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" + num(py(fy) + 4) + "\" text-anchor=\"end\">" +
             escape(tick_label(fy)) + "</text>\n";
    }
    svg += "<text x=\"" + std::to_string(left + w / 2) + "\" y=\"" + std::to_string(oy + h + 34) +
           "\" text-anchor=\"middle\">step</text>\n";
    svg += "<text x=\"14\" y=\"" + std::to_string(oy + h / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
           std::to_string(oy + h / 2) + ")\">" + escape(series[s]) + "</text>\n";
    for (std::size_t f = 0; f < lines.size(); ++f) {
      const char* color = kPalette[f % std::size(kPalette)];
      for (const auto& run : lines[f]) {
        std::string pts;
        for (const auto& p : run) {
          if (!pts.empty()) pts += ' ';
          pts += num(px(p.x)) + "," + num(py(p.y));
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" + pts +
               "\"/>\n";
      }
    }
    svg += "</g>\n";
  }

  const int ly = top + static_cast<int>(series.size()) * (h + bottom);
  svg += "<g>\n";
  for (std::size_t f = 0; f < jsonl_paths.size(); ++f) {
    const int y = ly + 18 * static_cast<int>(f) + 10;
    const char* color = kPalette[f % std::size(kPalette)];
    svg += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(y) + "\" x2=\"" +
           std::to_string(left + 24) + "\" y2=\"" + std::to_string(y) + "\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + std::to_string(left + 30) + "\" y=\"" + std::to_string(y + 4) + "\">" +
           escape(jsonl_paths[f].string()) + "</text>\n";
  }
  svg += "</g>\n</svg>\n";
  return svg;
}

}  // namespace stgc

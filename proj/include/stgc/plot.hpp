#pragma once

// Line charts of JSONL metric traces rendered straight to SVG.

#include <filesystem>
#include <string>
#include <vector>

namespace stgc {

struct PlotOptions {
  std::string title;
  int panel_width = 640;
  int panel_height = 320;
};

/// One panel per series, one polyline per file, x = "step". A series is a
/// field name; dotted paths reach into arrays and objects
/// ("per_layer_conflicting_ratio.0", "per_layer_consistency.2"). Null values
/// leave gaps and unknown fields are ignored. A series absent from every
/// record of a file is an error naming the series and the file.
std::string render_svg(const std::vector<std::filesystem::path>& jsonl_paths,
                       const std::vector<std::string>& series, const PlotOptions& options = {});

}  // namespace stgc

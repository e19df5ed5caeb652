#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "stgc/losses.hpp"
#include "stgc/numkit.hpp"

namespace stgc {

inline constexpr int kMetricsSchemaVersion = 1;

struct MetricsSnapshot {
  std::size_t step = 0;
  LossBreakdown loss;
  std::optional<double> gradient_consistency;
  std::optional<double> gradient_consistency_std;
  std::optional<double> conflicting_ratio;
  std::optional<Vec> per_layer_conflicting_ratio;
  std::optional<Vec> per_layer_consistency;
  std::vector<Vec> load_fractions;  // L x E
  std::vector<Vec> mean_scores;     // L x E
  std::optional<double> val_accuracy;
  std::size_t num_conflicting = 0;
  std::size_t num_records = 0;
  // Timing stays out of the metrics line so that traces are byte-stable.
  double wall_ms = 0.0;
  double capture_ms = 0.0;
};

/// One JSONL metrics line (no trailing newline). Non-finite numbers and
/// absent values are written as null.
std::string metrics_json_line(const MetricsSnapshot& m, const std::vector<std::size_t>& consistency_layers);

/// {"step", "wall_ms", "capture_ms"} line for the timing sidecar.
std::string timing_json_line(const MetricsSnapshot& m);

}  // namespace stgc

#include "stgc/metrics.hpp"

#include <cmath>

#include <json.hpp>

namespace stgc {

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json num(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

ordered_json opt(const std::optional<double>& v) { return v ? num(*v) : ordered_json(nullptr); }

ordered_json vec(const Vec& v) {
  ordered_json a = ordered_json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

}  // namespace

std::string metrics_json_line(const MetricsSnapshot& m,
                              const std::vector<std::size_t>& consistency_layers) {
  ordered_json j;
  j["v"] = kMetricsSchemaVersion;
  j["step"] = m.step;
  j["loss_main"] = num(m.loss.main);
  j["loss_aux"] = num(m.loss.aux);
  j["loss_cel"] = num(m.loss.cel);
  j["loss_total"] = num(m.loss.total);
  j["grad_consistency"] = opt(m.gradient_consistency);
  j["grad_consistency_std"] = opt(m.gradient_consistency_std);
  j["conflicting_ratio"] = opt(m.conflicting_ratio);
  j["per_layer_conflicting_ratio"] =
      m.per_layer_conflicting_ratio ? vec(*m.per_layer_conflicting_ratio) : ordered_json(nullptr);
  ordered_json load = ordered_json::array();
  for (const auto& row : m.load_fractions) load.push_back(vec(row));
  j["load_fractions"] = load;
  ordered_json scores = ordered_json::array();
  for (const auto& row : m.mean_scores) scores.push_back(vec(row));
  j["mean_scores"] = scores;
  j["val_acc"] = opt(m.val_accuracy);
  j["n_conflicting"] = m.num_conflicting;
  j["n_records"] = m.num_records;
  if (!consistency_layers.empty()) {
    ordered_json pl = ordered_json::object();
    for (std::size_t l : consistency_layers) {
      const bool have = m.per_layer_consistency && l < m.per_layer_consistency->size();
      pl[std::to_string(l + 1)] = have ? num((*m.per_layer_consistency)[l]) : ordered_json(nullptr);
    }
    j["per_layer_consistency"] = pl;
  }
  return j.dump();
}

std::string timing_json_line(const MetricsSnapshot& m) {
  ordered_json j;
  j["step"] = m.step;
  j["wall_ms"] = m.wall_ms;
  j["capture_ms"] = m.capture_ms;
  return j.dump();
}

}  // namespace stgc

#include "stgc/reports.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "stgc/analysis.hpp"
#include "stgc/conflict.hpp"
#include "stgc/error.hpp"
#include "stgc/losses.hpp"

namespace stgc {

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json num(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

ordered_json vec(const Vec& v) {
  ordered_json a = ordered_json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

struct Probe {
  Matrix features;
  std::vector<std::uint32_t> labels;
};

Probe leading_samples(const Dataset& data, std::size_t tokens) {
  require(data.size() > 0, ErrorKind::InvalidArgument, "dataset is empty");
  const std::size_t n = std::min(tokens, data.size());
  require(n >= 2, ErrorKind::InvalidArgument, "studies need at least 2 tokens");
  Probe p{Matrix(n, data.input_dim()), {data.labels.begin(), data.labels.begin() + static_cast<std::ptrdiff_t>(n)}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = data.features.row(i);
    std::copy(src.begin(), src.end(), p.features.row(i).begin());
  }
  return p;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

const std::vector<std::string>& study_names() {
  static const std::vector<std::string> names{"hist", "proxy", "featgrad", "layers", "load"};
  return names;
}

const char* to_string(Study s) {
  switch (s) {
    case Study::Hist: return "hist";
    case Study::Proxy: return "proxy";
    case Study::Featgrad: return "featgrad";
    case Study::Layers: return "layers";
    case Study::Load: return "load";
  }
  return "?";
}

Study parse_study(const std::string& name) {
  const auto& names = study_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<Study>(i);
  }
  std::string valid;
  for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
  fail(ErrorKind::InvalidArgument, "unknown study '" + name + "' (valid: " + valid + ")");
}

StudyOutput run_study(const Model& model, const Dataset& data, Study study,
                      const std::filesystem::path& out_dir, const StudyOptions& options) {
  const ModelConfig& cfg = model.config;
  require(data.input_dim() == cfg.input_dim, ErrorKind::Dimension,
          "dataset input_dim " + std::to_string(data.input_dim()) + " != model input_dim " +
              std::to_string(cfg.input_dim));
  require(data.num_classes <= cfg.num_classes, ErrorKind::Dimension,
          "dataset has more classes than the model outputs");
  const Probe probe = leading_samples(data, options.tokens);
  const ForwardTrace trace = forward(model.params, cfg, probe.features);
  const MainLoss ml = main_loss(trace.logits, probe.labels);

  std::filesystem::create_directories(out_dir);
  StudyOutput out;
  ordered_json j;
  j["study"] = to_string(study);
  j["tokens"] = probe.labels.size();
  j["checkpoint_checksum"] = checksum(model.params);

  switch (study) {
    case Study::Hist: {
      const auto records = capture_token_bias_grads(model.params, cfg, trace, ml.logit_grads);
      const ConflictReport report = identify_conflicting(records, cfg.tau, cfg.num_layers);
      const Vec sims = similarities(report);
      const Histogram h = similarity_histogram(sims);
      std::size_t below_zero = 0;
      for (double s : sims) below_zero += s < 0.0 ? 1 : 0;
      j["tau"] = cfg.tau;
      j["records"] = sims.size();
      j["fraction_below_zero"] = sims.empty() ? 0.0 : static_cast<double>(below_zero) / static_cast<double>(sims.size());
      j["conflicting_ratio"] = report.conflicting_ratio;
      j["bin_lo"] = h.lo;
      j["bin_width"] = h.width;
      j["counts"] = h.counts;
      j["frequencies"] = vec(h.frequencies);
      std::string csv = "bin_lo,bin_hi,count,frequency\n";
      for (std::size_t b = 0; b < h.counts.size(); ++b) {
        const double lo = h.lo + h.width * static_cast<double>(b);
        csv += fixed(lo, 2) + "," + fixed(lo + h.width, 2) + "," + std::to_string(h.counts[b]) + "," +
               fixed(h.frequencies[b], 6) + "\n";
      }
      write_text(out_dir / "hist.csv", csv);
      out.files.push_back(out_dir / "hist.csv");
      break;
    }
    case Study::Proxy: {
      const ProxyValidation pv = proxy_validation(model.params, cfg, trace, ml.logit_grads, options.seed);
      j["records"] = pv.records;
      j["pearson"] = num(pv.pearson);
      j["permuted_pearson"] = num(pv.permuted_pearson);
      j["permutation_seed"] = options.seed;
      break;
    }
    case Study::Featgrad: {
      const auto records = capture_token_bias_grads(model.params, cfg, trace, ml.logit_grads);
      const FeatureGradCorrelation fg = feature_gradient_correlation(trace, records);
      j["pearson"] = num(fg.pearson);
      j["pairs"] = fg.pairs;
      j["groups"] = fg.groups;
      break;
    }
    case Study::Layers: {
      const auto records = capture_token_bias_grads(model.params, cfg, trace, ml.logit_grads);
      const ConflictReport report = identify_conflicting(records, cfg.tau, cfg.num_layers);
      j["tau"] = cfg.tau;
      j["conflicting_ratio"] = report.conflicting_ratio;
      j["per_layer_ratio"] = vec(report.per_layer_ratio);
      j["per_layer_records"] = report.per_layer_records;
      j["per_layer_conflicting"] = report.per_layer_conflicting;
      const std::size_t half = cfg.num_layers / 2;
      std::size_t shallow = 0, deep = 0;
      for (std::size_t l = 0; l < cfg.num_layers; ++l) (l < half ? shallow : deep) += report.per_layer_conflicting[l];
      j["shallow_conflicting"] = shallow;
      j["deep_conflicting"] = deep;
      break;
    }
    case Study::Load: {
      ordered_json layers = ordered_json::array();
      for (const auto& l : load_distribution(trace, cfg.num_experts)) {
        ordered_json e;
        e["fractions"] = vec(l.fractions);
        e["mean_scores"] = vec(l.mean_scores);
        e["aux"] = num(l.aux);
        layers.push_back(e);
      }
      j["layers"] = layers;
      break;
    }
  }
  out.json = j.dump(2);
  const auto path = out_dir / (std::string(to_string(study)) + ".json");
  write_text(path, out.json + "\n");
  out.files.insert(out.files.begin(), path);
  return out;
}

std::string eval_report_json(const EvalReport& r) {
  ordered_json j;
  j["accuracy"] = num(r.accuracy);
  j["task_accuracy"] = vec(r.task_accuracy);
  j["task_counts"] = r.task_counts;
  j["capacity_limited"] = r.capacity_limited;
  j["capacity_factor"] = r.capacity_limited ? num(r.capacity_factor) : ordered_json(nullptr);
  j["bpr"] = r.bpr;
  j["batch_size"] = r.batch_size;
  if (r.capacity_limited) {
    j["batch_capacity"] = r.batch_capacity;
    j["drops"] = r.drops;
    j["max_admitted"] = r.max_admitted;
  }
  return j.dump(2);
}

std::string dataset_summary_json(const Dataset& data, const SynthSpec& spec) {
  ordered_json j;
  j["samples"] = data.size();
  j["input_dim"] = data.input_dim();
  j["num_classes"] = data.num_classes;
  j["num_tasks"] = data.num_tasks;
  j["seed"] = spec.seed;
  const auto counts = class_counts(data);
  j["class_counts"] = counts;
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  const double mean_count = static_cast<double>(data.size()) / static_cast<double>(counts.size());
  j["class_balance_spread"] = mean_count > 0 ? static_cast<double>(*hi - *lo) / mean_count : 0.0;
  std::vector<std::size_t> per_task(data.num_tasks, 0);
  for (auto t : data.tasks) ++per_task.at(t);
  j["task_counts"] = per_task;
  ordered_json pairs = ordered_json::array();
  const auto maps = label_maps(spec);
  for (const auto& [a, b] : spec.confusion_pairs) {
    ordered_json p;
    p["owner_task"] = a;
    p["borrowing_task"] = b;
    p["owner_labels"] = maps[a];
    p["borrowing_labels"] = maps[b];
    pairs.push_back(p);
  }
  j["confusion_pairs"] = pairs;
  j["label_maps"] = maps;
  return j.dump(2);
}

SweepResult run_sweep(const ModelConfig& mc, const TrainConfig& tc, const Dataset& data,
                      const std::vector<double>& taus, const std::vector<double>& betas,
                      const std::filesystem::path& out_dir) {
  require(!taus.empty() && !betas.empty(), ErrorKind::InvalidArgument, "sweep needs at least one tau and one beta");
  std::filesystem::create_directories(out_dir);
  SweepResult res;
  for (double tau : taus) {
    for (double beta : betas) {
      ModelConfig m = mc;
      m.tau = tau;
      m.beta = beta;
      TrainConfig t = tc;
      t.stgc_enabled = true;
      RunOutputs ro{out_dir / ("tau_" + fixed(tau, 2) + "_beta_" + fixed(beta, 2))};
      const RunResult run = run_experiment(m, t, data, &ro);
      SweepCell cell{tau, beta};
      cell.final_val_accuracy = run.final_val_accuracy;
      cell.final_aux = run.metrics.back().loss.aux;
      cell.final_cel = run.metrics.back().loss.cel;
      const std::size_t window_start = t.steps > 100 ? t.steps - 100 : 0;
      double ratio = 0.0, cons = 0.0;
      std::size_t n_ratio = 0, n_cons = 0;
      for (const auto& s : run.metrics) {
        if (s.step < window_start) continue;
        if (s.conflicting_ratio) {
          ratio += *s.conflicting_ratio;
          ++n_ratio;
        }
        if (s.gradient_consistency) {
          cons += *s.gradient_consistency;
          ++n_cons;
        }
      }
      cell.mean_conflicting_ratio = n_ratio ? ratio / static_cast<double>(n_ratio) : std::nan("");
      cell.mean_consistency = n_cons ? cons / static_cast<double>(n_cons) : std::nan("");
      res.cells.push_back(cell);
    }
  }

  std::string md = "| tau | beta | val_acc | aux | cel | conflicting_ratio | consistency |\n";
  md += "|---|---|---|---|---|---|---|\n";
  std::string csv = "tau,beta,val_acc,aux,cel,conflicting_ratio,consistency\n";
  ordered_json cells = ordered_json::array();
  for (const auto& c : res.cells) {
    md += "| " + fixed(c.tau, 2) + " | " + fixed(c.beta, 2) + " | " + fixed(c.final_val_accuracy, 4) + " | " +
          fixed(c.final_aux, 4) + " | " + fixed(c.final_cel, 4) + " | " + fixed(c.mean_conflicting_ratio, 4) +
          " | " + fixed(c.mean_consistency, 4) + " |\n";
    csv += fixed(c.tau, 2) + "," + fixed(c.beta, 2) + "," + fixed(c.final_val_accuracy, 6) + "," +
           fixed(c.final_aux, 6) + "," + fixed(c.final_cel, 6) + "," + fixed(c.mean_conflicting_ratio, 6) + "," +
           fixed(c.mean_consistency, 6) + "\n";
    ordered_json cj;
    cj["tau"] = c.tau;
    cj["beta"] = c.beta;
    cj["val_acc"] = num(c.final_val_accuracy);
    cj["aux"] = num(c.final_aux);
    cj["cel"] = num(c.final_cel);
    cj["conflicting_ratio"] = num(c.mean_conflicting_ratio);
    cj["consistency"] = num(c.mean_consistency);
    cells.push_back(cj);
  }
  res.table = md;
  write_text(out_dir / "sweep.md", md);
  write_text(out_dir / "sweep.csv", csv);
  ordered_json j;
  j["steps"] = tc.steps;
  j["seed"] = tc.seed;
  j["cells"] = cells;
  write_text(out_dir / "sweep.json", j.dump(2) + "\n");
  return res;
}

}  // namespace stgc

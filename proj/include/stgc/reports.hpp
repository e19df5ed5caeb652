#pragma once

// Report files produced by the analyze, eval, gen-data and sweep commands.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stgc/model.hpp"
#include "stgc/synthdata.hpp"
#include "stgc/train.hpp"

namespace stgc {

enum class Study { Hist, Proxy, Featgrad, Layers, Load };

const std::vector<std::string>& study_names();
Study parse_study(const std::string& name);
const char* to_string(Study s);

struct StudyOptions {
  std::size_t tokens = 512;  // leading samples of the dataset fed through the model
  std::uint64_t seed = 7;    // permutation control of the proxy study
};

struct StudyOutput {
  std::string json;  // the report, also written to <out_dir>/<study>.json
  std::vector<std::filesystem::path> files;
};

StudyOutput run_study(const Model& model, const Dataset& data, Study study,
                      const std::filesystem::path& out_dir, const StudyOptions& options = {});

std::string eval_report_json(const EvalReport& report);

/// Class balance and the confusion-pair manifest of a generated dataset.
std::string dataset_summary_json(const Dataset& data, const SynthSpec& spec);

struct SweepCell {
  double tau = 0.0;
  double beta = 0.0;
  double final_val_accuracy = 0.0;
  double final_aux = 0.0;
  double final_cel = 0.0;
  double mean_conflicting_ratio = 0.0;  // over the last stats window
  double mean_consistency = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::string table;  // markdown comparison table
};

/// Trains one run per (tau, beta) pair. Each run writes its metrics into
/// out_dir/tau_<t>_beta_<b>/; the table goes to out_dir/sweep.md and the
/// cells to out_dir/sweep.json and out_dir/sweep.csv.
SweepResult run_sweep(const ModelConfig& mc, const TrainConfig& tc, const Dataset& data,
                      const std::vector<double>& taus, const std::vector<double>& betas,
                      const std::filesystem::path& out_dir);

}  // namespace stgc

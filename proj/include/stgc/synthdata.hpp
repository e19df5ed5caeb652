#pragma once

// Labeled token datasets with engineered gradient conflict: tasks in a
// confusion pair share the same Gaussian cluster centers but map clusters to
// different labels, so nearby features pull the classifier in opposite
// directions. A small per-task offset ("task cue") keeps the tasks
// distinguishable in principle.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "stgc/numkit.hpp"

namespace stgc {

struct SynthSpec {
  std::size_t num_tasks = 4;
  std::size_t clusters_per_task = 4;
  std::size_t input_dim = 16;
  std::size_t num_classes = 8;
  std::size_t samples = 8192;
  std::vector<std::pair<std::size_t, std::size_t>> confusion_pairs{{0, 1}, {2, 3}};
  double noise_sigma = 0.1;
  double center_scale = 1.0;
  double task_cue = 0.5;
  // Relative sample share per task; empty means equal shares.
  std::vector<std::size_t> task_weights;
  std::uint64_t seed = 7;

  void validate() const;
};

struct Dataset {
  Matrix features;  // N x input_dim
  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> tasks;
  std::vector<std::uint32_t> clusters;  // only known for generated data
  std::size_t num_classes = 0;
  std::size_t num_tasks = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t input_dim() const { return features.cols(); }

  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Task of each slot in the repeating sample pattern: task t appears
/// task_weights[t] times, in task order.
std::vector<std::size_t> task_schedule(const SynthSpec& spec);

/// Deterministic in `spec.seed`. Sample i belongs to task
/// schedule[i mod |schedule|]; each task cycles through its clusters in order.
Dataset generate(const SynthSpec& spec);

/// Label assigned to each (task, cluster), indexed [task][cluster].
std::vector<std::vector<std::uint32_t>> label_maps(const SynthSpec& spec);

struct DatasetSplit {
  Dataset train;
  Dataset val;
};

/// The last floor(N * val_fraction) samples form the validation split.
DatasetSplit split(const Dataset& data, double val_fraction);

/// STGD layout, little-endian: "STGD", u32 version, u32 N, u32 dim, u32 C,
/// u32 T, then per sample dim f64 features, u32 label, u32 task.
inline constexpr std::uint32_t kDatasetFormatVersion = 1;
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
void export_csv(const Dataset& data, const std::filesystem::path& path);

/// Per-class sample counts.
std::vector<std::size_t> class_counts(const Dataset& data);

}  // namespace stgc

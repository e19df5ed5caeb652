#include "stgc/synthdata.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>

#include "stgc/binio.hpp"
#include "stgc/error.hpp"

namespace stgc {

void SynthSpec::validate() const {
  require(num_tasks >= 1, ErrorKind::InvalidArgument, "num_tasks must be >= 1");
  require(clusters_per_task >= 1, ErrorKind::InvalidArgument, "clusters_per_task must be >= 1");
  require(input_dim >= 1, ErrorKind::InvalidArgument, "input_dim must be >= 1");
  require(num_classes >= 2, ErrorKind::InvalidArgument,
          "num_classes must be >= 2 (got " + std::to_string(num_classes) + ")");
  require(samples >= 1, ErrorKind::InvalidArgument, "samples must be >= 1");
  require(noise_sigma >= 0.0 && std::isfinite(noise_sigma), ErrorKind::InvalidArgument,
          "noise_sigma must be finite and >= 0");
  require(task_cue >= 0.0 && std::isfinite(task_cue), ErrorKind::InvalidArgument,
          "task_cue must be finite and >= 0");
  require(task_weights.empty() || task_weights.size() == num_tasks, ErrorKind::InvalidArgument,
          "task_weights must be empty or list one weight per task");
  for (std::size_t w : task_weights) {
    require(w >= 1, ErrorKind::InvalidArgument, "task_weights entries must be >= 1");
  }
  std::vector<int> role(num_tasks, 0);  // 1 = owns shared centers, 2 = borrows them
  for (const auto& [a, b] : confusion_pairs) {
    require(a < num_tasks && b < num_tasks, ErrorKind::InvalidArgument,
            "confusion pair (" + std::to_string(a) + "," + std::to_string(b) +
                ") references a task >= num_tasks");
    require(a != b, ErrorKind::InvalidArgument, "confusion pair must name two different tasks");
    require(role[a] != 2 && role[b] == 0, ErrorKind::InvalidArgument,
            "confusion pairs must be disjoint: task " + std::to_string(b) + " already paired");
    role[a] = 1;
    role[b] = 2;
  }
}

namespace {

// Which task's cluster centers each task draws from.
std::vector<std::size_t> center_owner(const SynthSpec& spec) {
  std::vector<std::size_t> owner(spec.num_tasks);
  std::iota(owner.begin(), owner.end(), std::size_t{0});
  for (const auto& [a, b] : spec.confusion_pairs) owner[b] = a;
  return owner;
}

}  // namespace

std::vector<std::size_t> task_schedule(const SynthSpec& spec) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    const std::size_t w = spec.task_weights.empty() ? 1 : spec.task_weights[t];
    out.insert(out.end(), w, t);
  }
  return out;
}

std::vector<std::vector<std::uint32_t>> label_maps(const SynthSpec& spec) {
  spec.validate();
  const std::size_t t_count = spec.num_tasks, k = spec.clusters_per_task, c = spec.num_classes;
  Rng rng(derive_seed(spec.seed, 0x1AB));
  std::vector<std::vector<std::uint32_t>> maps(t_count, std::vector<std::uint32_t>(k));
  std::vector<std::vector<std::size_t>> perms(t_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    perms[t].resize(k);
    std::iota(perms[t].begin(), perms[t].end(), std::size_t{0});
    rng.shuffle(perms[t]);
    for (std::size_t cl = 0; cl < k; ++cl) {
      maps[t][cl] = static_cast<std::uint32_t>((t * k + perms[t][cl]) % c);
    }
  }
  // A borrowing task must disagree with its partner on every shared cluster.
  for (const auto& [a, b] : spec.confusion_pairs) {
    bool ok = false;
    for (std::size_t rot = 0; rot < k && !ok; ++rot) {
      std::vector<std::uint32_t> cand(k);
      ok = true;
      for (std::size_t cl = 0; cl < k; ++cl) {
        cand[cl] = static_cast<std::uint32_t>((b * k + perms[b][(cl + rot) % k]) % c);
        if (cand[cl] == maps[a][cl]) ok = false;
      }
      if (ok) maps[b] = cand;
    }
    require(ok, ErrorKind::InvalidArgument,
            "confusion pair (" + std::to_string(a) + "," + std::to_string(b) +
                "): no label permutation disagrees on every shared cluster");
  }
  return maps;
}

Dataset generate(const SynthSpec& spec) {
  spec.validate();
  const auto maps = label_maps(spec);
  const auto owner = center_owner(spec);
  const std::size_t dim = spec.input_dim, k = spec.clusters_per_task;

  Rng center_rng(derive_seed(spec.seed, 0xCE7));
  std::vector<Matrix> centers(spec.num_tasks);
  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    centers[t] = Matrix(k, dim);
    for (auto& v : centers[t].flat()) v = center_rng.normal(0.0, spec.center_scale);
  }
  Rng cue_rng(derive_seed(spec.seed, 0xC0E));
  Matrix cues(spec.num_tasks, dim);
  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    auto row = cues.row(t);
    for (auto& v : row) v = cue_rng.normal();
    const double nrm = norm2(row);
    for (auto& v : row) v *= spec.task_cue / nrm;
  }

  Rng noise_rng(derive_seed(spec.seed, 0x0153));
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.num_tasks = spec.num_tasks;
  ds.features = Matrix(spec.samples, dim);
  ds.labels.resize(spec.samples);
  ds.tasks.resize(spec.samples);
  ds.clusters.resize(spec.samples);
  const auto schedule = task_schedule(spec);
  std::vector<std::size_t> seen(spec.num_tasks, 0);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const std::size_t t = schedule[i % schedule.size()];
    const std::size_t cl = seen[t]++ % k;
    const auto center = centers[owner[t]].row(cl);
    auto f = ds.features.row(i);
    for (std::size_t j = 0; j < dim; ++j) {
      f[j] = center[j] + cues(t, j) + spec.noise_sigma * noise_rng.normal();
    }
    ds.labels[i] = maps[t][cl];
    ds.tasks[i] = static_cast<std::uint32_t>(t);
    ds.clusters[i] = static_cast<std::uint32_t>(cl);
  }
  return ds;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.num_tasks = num_tasks;
  out.features = Matrix(indices.size(), input_dim());
  out.labels.reserve(indices.size());
  out.tasks.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    require(i < size(), ErrorKind::InvalidArgument, "subset: index out of range");
    const auto src = features.row(i);
    std::copy(src.begin(), src.end(), out.features.row(r).begin());
    out.labels.push_back(labels[i]);
    out.tasks.push_back(tasks[i]);
    if (!clusters.empty()) out.clusters.push_back(clusters[i]);
  }
  return out;
}

DatasetSplit split(const Dataset& data, double val_fraction) {
  require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorKind::InvalidArgument,
          "val_fraction must lie in [0, 1)");
  const std::size_t n_val = static_cast<std::size_t>(std::floor(data.size() * val_fraction));
  const std::size_t n_train = data.size() - n_val;
  std::vector<std::size_t> train_idx(n_train), val_idx(n_val);
  std::iota(train_idx.begin(), train_idx.end(), std::size_t{0});
  std::iota(val_idx.begin(), val_idx.end(), n_train);
  return {data.subset(train_idx), data.subset(val_idx)};
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  binio::Writer w;
  w.bytes("STGD", 4);
  w.u32(kDatasetFormatVersion);
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(static_cast<std::uint32_t>(data.input_dim()));
  w.u32(static_cast<std::uint32_t>(data.num_classes));
  w.u32(static_cast<std::uint32_t>(data.num_tasks));
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.features.row(i)) w.f64(v);
    w.u32(data.labels[i]);
    w.u32(data.tasks[i]);
  }
  w.save(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  auto r = binio::Reader::open(path);
  char magic[4];
  r.bytes(magic, 4);
  require(std::string(magic, 4) == "STGD", ErrorKind::Parse,
          "'" + path.string() + "' is not an STGD dataset (bad magic)");
  const std::uint32_t version = r.u32();
  require(version == kDatasetFormatVersion, ErrorKind::Parse,
          "'" + path.string() + "': unsupported STGD version " + std::to_string(version));
  const std::uint32_t n = r.u32(), dim = r.u32(), c = r.u32(), t = r.u32();
  Dataset ds;
  ds.num_classes = c;
  ds.num_tasks = t;
  ds.features = Matrix(n, dim);
  ds.labels.resize(n);
  ds.tasks.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (auto& v : ds.features.row(i)) v = r.f64();
    ds.labels[i] = r.u32();
    ds.tasks[i] = r.u32();
    require(ds.labels[i] < c, ErrorKind::Parse,
            "'" + path.string() + "': sample " + std::to_string(i) + " label out of range");
  }
  require(r.at_end(), ErrorKind::Parse, "'" + path.string() + "': trailing bytes after samples");
  return ds;
}

void export_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  for (std::size_t j = 0; j < data.input_dim(); ++j) out << 'f' << j << ',';
  out << "label,task\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.features.row(i)) out << v << ',';
    out << data.labels[i] << ',' << data.tasks[i] << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

std::vector<std::size_t> class_counts(const Dataset& data) {
  std::vector<std::size_t> counts(data.num_classes, 0);
  for (auto l : data.labels) ++counts.at(l);
  return counts;
}

}  // namespace stgc

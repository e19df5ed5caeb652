#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "stgc/analysis.hpp"
#include "stgc/error.hpp"
#include "stgc/losses.hpp"
#include "stgc/model.hpp"
#include "stgc/synthdata.hpp"

namespace stgc {
namespace {

namespace fs = std::filesystem;

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "stgc_test_synthdata";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Synth, DefaultShapeAndBalance) {
  const SynthSpec spec;
  const Dataset d = generate(spec);
  EXPECT_EQ(d.size(), 8192u);
  EXPECT_EQ(d.input_dim(), 16u);
  EXPECT_EQ(d.num_classes, 8u);
  EXPECT_EQ(d.num_tasks, 4u);
  const auto counts = class_counts(d);
  const double expect = 8192.0 / 8.0;
  for (std::size_t c : counts) EXPECT_LE(std::abs(static_cast<double>(c) - expect) / expect, 0.05);
  for (std::uint32_t l : d.labels) EXPECT_LT(l, 8u);
  EXPECT_TRUE(d.features.all_finite());
}

TEST(Synth, ByteIdenticalFilesUnderSeed) {
  const SynthSpec spec;
  save_dataset(generate(spec), temp_file("a.stgd"));
  save_dataset(generate(spec), temp_file("b.stgd"));
  const std::string a = read_bytes(temp_file("a.stgd"));
  EXPECT_EQ(a, read_bytes(temp_file("b.stgd")));
  // Header: magic, version, N, dim, C, T.
  ASSERT_GE(a.size(), 24u);
  EXPECT_EQ(a.substr(0, 4), "STGD");
  auto u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(a[off + i]);
    return v;
  };
  EXPECT_EQ(u32(4), kDatasetFormatVersion);
  EXPECT_EQ(u32(8), 8192u);
  EXPECT_EQ(u32(12), 16u);
  EXPECT_EQ(u32(16), 8u);
  EXPECT_EQ(u32(20), 4u);
  EXPECT_EQ(a.size(), 24u + 8192u * (16u * 8u + 8u));

  SynthSpec other = spec;
  other.seed = 8;
  save_dataset(generate(other), temp_file("c.stgd"));
  EXPECT_NE(a, read_bytes(temp_file("c.stgd")));
}

TEST(Synth, RoundTripAndCsv) {
  SynthSpec spec;
  spec.samples = 64;
  const Dataset d = generate(spec);
  save_dataset(d, temp_file("r.stgd"));
  const Dataset back = load_dataset(temp_file("r.stgd"));
  EXPECT_EQ(back.features, d.features);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.tasks, d.tasks);
  export_csv(d, temp_file("r.csv"));
  std::ifstream in(temp_file("r.csv"));
  std::string header;
  std::getline(in, header);
  EXPECT_NE(header.find("label"), std::string::npos);
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 64u);
}

TEST(Synth, RejectsCorruptFiles) {
  std::ofstream(temp_file("bad.stgd"), std::ios::binary) << "NOPE";
  try {
    load_dataset(temp_file("bad.stgd"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_TRUE(e.kind() == ErrorKind::Parse || e.kind() == ErrorKind::Io);
  }
  EXPECT_THROW(load_dataset(temp_file("missing.stgd")), Error);
}

TEST(Synth, RejectsInvalidSpecs) {
  SynthSpec s;
  s.num_classes = 1;
  EXPECT_THROW(generate(s), Error);
  s = SynthSpec{};
  s.confusion_pairs = {{0, 7}};
  EXPECT_THROW(generate(s), Error);
  s = SynthSpec{};
  s.task_weights = {1, 2};
  EXPECT_THROW(generate(s), Error);
}

TEST(Synth, SeparableCaseReachesFullAccuracyWithLinearProbe) {
  SynthSpec s;
  s.num_tasks = 1;
  s.confusion_pairs.clear();
  s.noise_sigma = 0.0;
  s.samples = 400;
  const Dataset d = generate(s);
  // Nearest class mean is a linear classifier: argmax_c mu_c.x - |mu_c|^2 / 2.
  std::map<std::uint32_t, Vec> mu;
  std::map<std::uint32_t, double> cnt;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto& m = mu[d.labels[i]];
    m.resize(d.input_dim(), 0.0);
    for (std::size_t j = 0; j < d.input_dim(); ++j) m[j] += d.features(i, j);
    cnt[d.labels[i]] += 1;
  }
  for (auto& [c, m] : mu)
    for (double& v : m) v /= cnt[c];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    double best = -INFINITY;
    std::uint32_t arg = 0;
    for (const auto& [c, m] : mu) {
      const double s2 = dot(m, d.features.row(i)) - 0.5 * dot(m, m);
      if (s2 > best) {
        best = s2;
        arg = c;
      }
    }
    correct += arg == d.labels[i];
  }
  EXPECT_EQ(correct, d.size());
}

TEST(Synth, SharedClusterCapsAnyClassifierAtHalf) {
  SynthSpec s;
  s.num_tasks = 2;
  s.clusters_per_task = 1;
  s.num_classes = 2;
  s.confusion_pairs = {{0, 1}};
  s.noise_sigma = 0.0;
  s.task_cue = 0.0;
  s.samples = 200;
  const Dataset d = generate(s);
  // Every input is the same point, so the best any function can do is the
  // majority label.
  std::map<std::uint32_t, std::size_t> by_label;
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.input_dim(); ++j) ASSERT_EQ(d.features(i, j), d.features(0, j));
    ++by_label[d.labels[i]];
  }
  ASSERT_EQ(by_label.size(), 2u);
  std::size_t majority = 0;
  for (const auto& [l, c] : by_label) majority = std::max(majority, c);
  EXPECT_LE(static_cast<double>(majority) / d.size(), 0.5);
}

TEST(Synth, ConfusionPairsDisagreeOnEverySharedCluster) {
  const SynthSpec spec;
  const auto maps = label_maps(spec);
  for (const auto& [a, b] : spec.confusion_pairs)
    for (std::size_t c = 0; c < spec.clusters_per_task; ++c) EXPECT_NE(maps[a][c], maps[b][c]);
}

TEST(Synth, TaskWeightsShapeSchedule) {
  SynthSpec s;
  s.task_weights = {3, 1, 1, 3};
  EXPECT_EQ(task_schedule(s), (std::vector<std::size_t>{0, 0, 0, 1, 2, 3, 3, 3}));
  s.samples = 800;
  const Dataset d = generate(s);
  std::vector<std::size_t> per(4, 0);
  for (auto t : d.tasks) ++per[t];
  EXPECT_EQ(per, (std::vector<std::size_t>{300, 100, 100, 300}));
}

TEST(Synth, SplitKeepsTail) {
  SynthSpec s;
  s.samples = 100;
  const Dataset d = generate(s);
  const auto sp = split(d, 0.2);
  EXPECT_EQ(sp.train.size(), 80u);
  EXPECT_EQ(sp.val.size(), 20u);
  EXPECT_EQ(sp.val.labels[0], d.labels[80]);
}

// Fitness for purpose: on a fresh model, feature-similar tokens from a
// confusion pair should disagree in gradient direction far more often than
// feature-similar tokens of the same task.
TEST(Synth, ConfusedTokensConflictMoreThanBaseline) {
  const SynthSpec spec;
  const Dataset d = generate(spec);
  ModelConfig cfg;
  const Model m = Model::create(cfg, 7);
  const std::size_t n = 512;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const Dataset b = d.subset(idx);
  const ForwardTrace t = forward(m.params, cfg, b.features);
  const MainLoss ml = main_loss(t.logits, b.labels);
  const auto records = capture_token_bias_grads(m.params, cfg, t, ml.logit_grads);

  std::set<std::size_t> partner_of[4];
  for (const auto& [x, y] : spec.confusion_pairs) {
    partner_of[x].insert(y);
    partner_of[y].insert(x);
  }
  std::size_t confused = 0, confused_neg = 0, base = 0, base_neg = 0;
  for (const auto& g : group_records(records)) {
    for (std::size_t i = 0; i < g.indices.size(); ++i) {
      for (std::size_t j = i + 1; j < g.indices.size(); ++j) {
        const auto& ri = records[g.indices[i]];
        const auto& rj = records[g.indices[j]];
        const std::size_t ti = b.tasks[ri.token_index], tj = b.tasks[rj.token_index];
        if (b.clusters[ri.token_index] != b.clusters[rj.token_index]) continue;
        const double c = cosine_sim(concat_gradient(ri), concat_gradient(rj));
        if (ti == tj) {
          ++base;
          base_neg += c < 0.0;
        } else if (partner_of[ti].count(tj)) {
          ++confused;
          confused_neg += c < 0.0;
        }
      }
    }
  }
  ASSERT_GT(confused, 100u);
  ASSERT_GT(base, 100u);
  const double confused_rate = static_cast<double>(confused_neg) / confused;
  const double base_rate = static_cast<double>(base_neg) / base;
  EXPECT_GT(confused_rate, 0.0);
  EXPECT_GE(confused_rate, 2.0 * base_rate) << confused_rate << " vs " << base_rate;
}

}  // namespace
}  // namespace stgc

#include "stgc/conflict.hpp"

#include <map>
#include <optional>
#include <utility>

#include "stgc/error.hpp"

namespace stgc {

bool is_zero_gradient(const TokenGradRecord& record) {
  return norm2(record.g1) < kZeroNormEps && norm2(record.g2) < kZeroNormEps;
}

std::optional<GradientMeans> average_gradient(std::span<const TokenGradRecord* const> records) {
  std::optional<GradientMeans> out;
  std::size_t count = 0;
  for (const TokenGradRecord* r : records) {
    if (is_zero_gradient(*r)) continue;
    if (!out) out = GradientMeans{Vec(r->g1.size(), 0.0), Vec(r->g2.size(), 0.0)};
    require(r->g1.size() == out->g1_mean.size() && r->g2.size() == out->g2_mean.size(),
            ErrorKind::Dimension, "average_gradient: inconsistent record widths");
    for (std::size_t i = 0; i < r->g1.size(); ++i) out->g1_mean[i] += r->g1[i];
    for (std::size_t i = 0; i < r->g2.size(); ++i) out->g2_mean[i] += r->g2[i];
    ++count;
  }
  if (out) {
    const double inv = 1.0 / static_cast<double>(count);
    for (auto& v : out->g1_mean) v *= inv;
    for (auto& v : out->g2_mean) v *= inv;
  }
  return out;
}

std::optional<GradientMeans> average_gradient(std::span<const TokenGradRecord> records) {
  std::vector<const TokenGradRecord*> ptrs;
  ptrs.reserve(records.size());
  for (const auto& r : records) ptrs.push_back(&r);
  return average_gradient(std::span<const TokenGradRecord* const>(ptrs));
}

double token_similarity(const TokenGradRecord& record, const GradientMeans& means) {
  return 0.5 * (cosine(record.g1, means.g1_mean).value + cosine(record.g2, means.g2_mean).value);
}

std::vector<RecordGroup> group_records(std::span<const TokenGradRecord> records) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) {
    groups[{records[i].layer_index, records[i].expert_id}].push_back(i);
  }
  std::vector<RecordGroup> out;
  out.reserve(groups.size());
  for (auto& [key, idx] : groups) out.push_back({key.first, key.second, std::move(idx)});
  return out;
}

ConflictReport identify_conflicting(std::span<const TokenGradRecord> records, double tau,
                                    std::size_t num_layers) {
  ConflictReport rep;
  rep.tau = tau;
  rep.per_layer_records.assign(num_layers, 0);
  rep.per_layer_conflicting.assign(num_layers, 0);
  rep.per_layer_ratio.assign(num_layers, 0.0);

  for (const auto& group : group_records(records)) {
    require(group.layer_index < num_layers, ErrorKind::InvalidArgument,
            "identify_conflicting: layer index out of range");
    rep.num_records += group.indices.size();
    rep.per_layer_records[group.layer_index] += group.indices.size();

    std::vector<const TokenGradRecord*> members;
    members.reserve(group.indices.size());
    for (std::size_t i : group.indices) members.push_back(&records[i]);
    const auto means = average_gradient(std::span<const TokenGradRecord* const>(members));
    if (!means) continue;  // every member had a zero gradient

    ExpertConflict ec;
    ec.layer_index = group.layer_index;
    ec.expert_id = group.expert_id;
    ec.means = *means;
    for (std::size_t i : group.indices) {
      const TokenGradRecord& r = records[i];
      TokenVerdict v;
      v.record_index = i;
      v.token_index = r.token_index;
      v.zero_gradient = is_zero_gradient(r);
      if (!v.zero_gradient) {
        v.similarity = token_similarity(r, ec.means);
        v.conflicting = v.similarity < tau;
      }
      if (v.conflicting) {
        rep.flagged.push_back({r.token_index, r.layer_index, r.expert_id});
        ++rep.num_conflicting;
        ++rep.per_layer_conflicting[group.layer_index];
      }
      ec.tokens.push_back(v);
    }
    rep.experts.push_back(std::move(ec));
  }

  if (rep.num_records > 0) {
    rep.conflicting_ratio =
        static_cast<double>(rep.num_conflicting) / static_cast<double>(rep.num_records);
  }
  for (std::size_t l = 0; l < num_layers; ++l) {
    if (rep.per_layer_records[l] > 0) {
      rep.per_layer_ratio[l] = static_cast<double>(rep.per_layer_conflicting[l]) /
                               static_cast<double>(rep.per_layer_records[l]);
    }
  }
  return rep;
}

}  // namespace stgc

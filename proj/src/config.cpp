#include "stgc/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "stgc/binio.hpp"
#include "stgc/error.hpp"

namespace stgc {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  fail(ErrorKind::Parse, key + ": expected " + expected + ", got '" + value + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t parse_count(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_float(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out)) {
    bad_value(key, v, "a finite number");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  bad_value(key, v, "on/off or true/false");
}

std::string fmt(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string fmt(bool v) { return v ? "on" : "off"; }

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> parse_pairs(const std::string& key, const std::string& v) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (v == "none") return out;
  for (const auto& item : split_list(v)) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) bad_value(key, v, "pairs like '0-1, 2-3' or 'none'");
    out.emplace_back(parse_count(key, trim(item.substr(0, dash))), parse_count(key, trim(item.substr(dash + 1))));
  }
  return out;
}

std::string format_pairs(const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  if (pairs.empty()) return "none";
  std::string out;
  for (const auto& [a, b] : pairs) {
    if (!out.empty()) out += ", ";
    out += std::to_string(a) + "-" + std::to_string(b);
  }
  return out;
}

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Field>
Entry count_entry(std::string name, std::string help, Field field) {
  return {{name, "count", std::move(help)},
          [name, field](RunConfig& c, const std::string& v) { field(c) = parse_count(name, v); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <typename Field>
Entry float_entry(std::string name, std::string help, Field field) {
  return {{name, "float", std::move(help)},
          [name, field](RunConfig& c, const std::string& v) { field(c) = parse_float(name, v); },
          [field](const RunConfig& c) { return fmt(field(const_cast<RunConfig&>(c))); }};
}

template <typename Field>
Entry bool_entry(std::string name, std::string help, Field field) {
  return {{name, "bool", std::move(help)},
          [name, field](RunConfig& c, const std::string& v) { field(c) = parse_bool(name, v); },
          [field](const RunConfig& c) { return fmt(static_cast<bool>(field(const_cast<RunConfig&>(c)))); }};
}

std::vector<Entry> make_entries() {
  std::vector<Entry> e;
  e.push_back(count_entry("model.hidden_size", "token width", [](RunConfig& c) -> auto& { return c.model.hidden_size; }));
  e.push_back(count_entry("model.intermediate_size", "expert FFN width",
                          [](RunConfig& c) -> auto& { return c.model.intermediate_size; }));
  e.push_back(count_entry("model.num_experts", "experts per MoE layer",
                          [](RunConfig& c) -> auto& { return c.model.num_experts; }));
  e.push_back(count_entry("model.top_k", "experts per token", [](RunConfig& c) -> auto& { return c.model.top_k; }));
  e.push_back(count_entry("model.num_layers", "MoE blocks", [](RunConfig& c) -> auto& { return c.model.num_layers; }));
  e.push_back(count_entry("model.num_classes", "output classes", [](RunConfig& c) -> auto& { return c.model.num_classes; }));
  e.push_back(count_entry("model.input_dim", "feature width", [](RunConfig& c) -> auto& { return c.model.input_dim; }));
  e.push_back(float_entry("model.tau", "conflict threshold on s_n", [](RunConfig& c) -> auto& { return c.model.tau; }));
  e.push_back(float_entry("model.alpha", "load balancing weight", [](RunConfig& c) -> auto& { return c.model.alpha; }));
  e.push_back(float_entry("model.beta", "conflict elimination weight", [](RunConfig& c) -> auto& { return c.model.beta; }));
  e.push_back({{"model.cel_kind", "ce_like|mse_like", "conflict elimination variant"},
               [](RunConfig& c, const std::string& v) {
                 try {
                   c.model.cel_kind = parse_cel_kind(v);
                 } catch (const Error&) {
                   bad_value("model.cel_kind", v, "ce_like or mse_like");
                 }
               },
               [](const RunConfig& c) { return std::string(to_string(c.model.cel_kind)); }});
  e.push_back({{"model.capacity_factor", "float|none", "evaluation-time expert capacity factor"},
               [](RunConfig& c, const std::string& v) {
                 if (v == "none") {
                   c.model.capacity_factor.reset();
                 } else {
                   c.model.capacity_factor = parse_float("model.capacity_factor", v);
                 }
               },
               [](const RunConfig& c) {
                 return c.model.capacity_factor ? fmt(*c.model.capacity_factor) : std::string("none");
               }});
  e.push_back(bool_entry("model.bpr", "batch prioritized routing under capacity",
                         [](RunConfig& c) -> auto& { return c.model.bpr; }));

  e.push_back(count_entry("train.steps", "optimizer updates", [](RunConfig& c) -> auto& { return c.train.steps; }));
  e.push_back(count_entry("train.batch_size", "tokens per micro-batch",
                          [](RunConfig& c) -> auto& { return c.train.batch_size; }));
  e.push_back(float_entry("train.lr", "learning rate", [](RunConfig& c) -> auto& { return c.train.lr; }));
  e.push_back({{"train.optimizer", "sgd|adam", "optimizer"},
               [](RunConfig& c, const std::string& v) {
                 try {
                   c.train.optimizer = parse_optimizer(v);
                 } catch (const Error&) {
                   bad_value("train.optimizer", v, "sgd or adam");
                 }
               },
               [](const RunConfig& c) { return std::string(to_string(c.train.optimizer)); }});
  e.push_back(float_entry("train.adam_beta1", "first-moment decay", [](RunConfig& c) -> auto& { return c.train.adam_beta1; }));
  e.push_back(float_entry("train.adam_beta2", "second-moment decay", [](RunConfig& c) -> auto& { return c.train.adam_beta2; }));
  e.push_back(float_entry("train.adam_eps", "adam epsilon", [](RunConfig& c) -> auto& { return c.train.adam_eps; }));
  e.push_back(bool_entry("train.cosine_decay", "cosine learning-rate decay to 0",
                         [](RunConfig& c) -> auto& { return c.train.cosine_decay; }));
  e.push_back({{"train.seed", "seed", "model init and batch order"},
               [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("train.seed", v); },
               [](const RunConfig& c) { return std::to_string(c.train.seed); }});
  e.push_back(bool_entry("train.stgc", "conflict elimination on/off",
                         [](RunConfig& c) -> auto& { return c.train.stgc_enabled; }));
  e.push_back(bool_entry("train.verify_mode", "update with the conflict elimination loss only",
                         [](RunConfig& c) -> auto& { return c.train.verify_mode; }));
  e.push_back(count_entry("train.grad_accum", "micro-batches per update",
                          [](RunConfig& c) -> auto& { return c.train.grad_accum; }));
  e.push_back(count_entry("train.stats_stride", "steps between consistency statistics",
                          [](RunConfig& c) -> auto& { return c.train.stats_stride; }));
  e.push_back(count_entry("train.eval_stride", "steps between validation passes",
                          [](RunConfig& c) -> auto& { return c.train.eval_stride; }));
  e.push_back(float_entry("train.val_fraction", "trailing share held out for validation",
                          [](RunConfig& c) -> auto& { return c.train.val_fraction; }));
  e.push_back(bool_entry("train.capacity_in_training", "apply model.capacity_factor while training",
                         [](RunConfig& c) -> auto& { return c.train.capacity_in_training; }));
  e.push_back(bool_entry("train.cel_literal_sign", "use the sign-flipped conflict elimination loss",
                         [](RunConfig& c) -> auto& { return c.train.cel_literal_sign; }));
  e.push_back(bool_entry("train.consistency_include_diagonal", "count self-pairs in consistency",
                         [](RunConfig& c) -> auto& { return c.train.consistency_include_diagonal; }));
  e.push_back(bool_entry("train.pool_accum_stats", "pool accumulation micro-batches for consistency",
                         [](RunConfig& c) -> auto& { return c.train.pool_accum_stats; }));
  e.push_back(bool_entry("train.per_layer_consistency", "log consistency at L/4, L/2, 3L/4",
                         [](RunConfig& c) -> auto& { return c.train.per_layer_consistency; }));

  e.push_back(count_entry("synth.num_tasks", "tasks", [](RunConfig& c) -> auto& { return c.synth.num_tasks; }));
  e.push_back(count_entry("synth.clusters_per_task", "feature clusters per task",
                          [](RunConfig& c) -> auto& { return c.synth.clusters_per_task; }));
  e.push_back(count_entry("synth.input_dim", "feature width", [](RunConfig& c) -> auto& { return c.synth.input_dim; }));
  e.push_back(count_entry("synth.num_classes", "classes", [](RunConfig& c) -> auto& { return c.synth.num_classes; }));
  e.push_back(count_entry("synth.samples", "samples", [](RunConfig& c) -> auto& { return c.synth.samples; }));
  e.push_back({{"synth.confusion_pairs", "pairs", "owner-borrower task pairs, e.g. 0-1, 2-3, or none"},
               [](RunConfig& c, const std::string& v) {
                 c.synth.confusion_pairs = parse_pairs("synth.confusion_pairs", v);
               },
               [](const RunConfig& c) { return format_pairs(c.synth.confusion_pairs); }});
  e.push_back(float_entry("synth.noise_sigma", "per-dimension feature noise",
                          [](RunConfig& c) -> auto& { return c.synth.noise_sigma; }));
  e.push_back(float_entry("synth.center_scale", "cluster center spread",
                          [](RunConfig& c) -> auto& { return c.synth.center_scale; }));
  e.push_back(float_entry("synth.task_cue", "length of the per-task feature offset",
                          [](RunConfig& c) -> auto& { return c.synth.task_cue; }));
  e.push_back({{"synth.task_weights", "counts", "relative task shares, e.g. 3, 1, 1, 3, or equal"},
               [](RunConfig& c, const std::string& v) {
                 c.synth.task_weights.clear();
                 if (v == "equal") return;
                 for (const auto& item : split_list(v)) {
                   c.synth.task_weights.push_back(parse_count("synth.task_weights", item));
                 }
               },
               [](const RunConfig& c) {
                 if (c.synth.task_weights.empty()) return std::string("equal");
                 std::string out;
                 for (std::size_t w : c.synth.task_weights) {
                   if (!out.empty()) out += ", ";
                   out += std::to_string(w);
                 }
                 return out;
               }});
  e.push_back({{"synth.seed", "seed", "dataset seed"},
               [](RunConfig& c, const std::string& v) { c.synth.seed = parse_u64("synth.seed", v); },
               [](const RunConfig& c) { return std::to_string(c.synth.seed); }});

  e.push_back({{"data.path", "path", "STGD dataset used by train/verify"},
               [](RunConfig& c, const std::string& v) {
                 if (v.empty()) fail(ErrorKind::Parse, "data.path: empty path");
                 c.data_path = v;
               },
               [](const RunConfig& c) { return c.data_path ? c.data_path->string() : std::string(); }});
  return e;
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> e = make_entries();
  return e;
}

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key.name == key) return e;
  }
  fail(ErrorKind::Parse, "unknown key '" + key + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value,
                      const std::string& where) {
  try {
    find_entry(key).set(cfg, value);
  } catch (const Error& e) {
    if (where.empty()) throw;
    fail(e.kind(), where + ": " + e.what());
  }
}

std::string config_value(const RunConfig& cfg, const std::string& key) { return find_entry(key).get(cfg); }

RunConfig parse_config(std::string_view text, const std::string& source) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Parse, where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(ErrorKind::Parse, where + ": missing key");
    if (!seen.insert(key).second) fail(ErrorKind::Parse, where + ": duplicate key '" + key + "'");
    set_config_value(cfg, key, value, where);
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  RunConfig cfg = parse_config(std::string_view(bytes.data(), bytes.size()), path.string());
  if (cfg.data_path && cfg.data_path->is_relative()) {
    cfg.data_path = path.parent_path() / *cfg.data_path;
  }
  return cfg;
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : entries()) {
    const std::string value = e.get(cfg);
    if (e.key.name == "data.path" && value.empty()) continue;
    const std::string prefix = e.key.name.substr(0, e.key.name.find('.'));
    if (prefix != section) {
      if (!section.empty()) out += '\n';
      section = prefix;
    }
    out += e.key.name + " = " + value + '\n';
  }
  return out;
}

}  // namespace stgc

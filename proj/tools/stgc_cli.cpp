// Command-line front end. Talks to the library only through the C API.
//
// Exit codes: 0 success, 1 usage error (bad flags, config or arguments),
// 2 runtime failure (I/O, numeric, degenerate data).

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stgc/stgc.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct CommandError {
  int code;
  std::string message;
};

int exit_code_for(stgc_status s) {
  return s == STGC_ERR_INVALID_ARGUMENT || s == STGC_ERR_PARSE ? kExitUsage : kExitRuntime;
}

void check(stgc_status s, const std::string& context) {
  if (s != STGC_OK) throw CommandError{exit_code_for(s), context + ": " + stgc_last_error()};
}

[[noreturn]] void usage(const std::string& message) { throw CommandError{kExitUsage, message}; }

struct ConfigDeleter {
  void operator()(stgc_config* p) const { stgc_config_free(p); }
};
struct DatasetDeleter {
  void operator()(stgc_dataset* p) const { stgc_dataset_free(p); }
};
struct ModelDeleter {
  void operator()(stgc_model* p) const { stgc_model_free(p); }
};
struct RunDeleter {
  void operator()(stgc_run* p) const { stgc_run_free(p); }
};
using ConfigPtr = std::unique_ptr<stgc_config, ConfigDeleter>;
using DatasetPtr = std::unique_ptr<stgc_dataset, DatasetDeleter>;
using ModelPtr = std::unique_ptr<stgc_model, ModelDeleter>;
using RunPtr = std::unique_ptr<stgc_run, RunDeleter>;

std::string take(char* s) {
  std::string out = s ? s : "";
  stgc_string_free(s);
  return out;
}

ConfigPtr load_config(const std::string& path) {
  stgc_config* c = nullptr;
  check(stgc_config_load(path.c_str(), &c), "config");
  return ConfigPtr(c);
}

void set(stgc_config* cfg, const std::string& key, const std::string& value) {
  check(stgc_config_set(cfg, key.c_str(), value.c_str()), "--" + key);
}

std::string get(const stgc_config* cfg, const std::string& key) {
  char* v = nullptr;
  check(stgc_config_get(cfg, key.c_str(), &v), key);
  return take(v);
}

DatasetPtr load_dataset(const std::string& path) {
  stgc_dataset* d = nullptr;
  check(stgc_dataset_load(path.c_str(), &d), "dataset");
  return DatasetPtr(d);
}

ModelPtr load_model(const std::string& path) {
  stgc_model* m = nullptr;
  check(stgc_model_load(path.c_str(), &m), "checkpoint");
  return ModelPtr(m);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CommandError{kExitRuntime, "cannot open '" + path.string() + "' for writing"};
  out << text;
  if (!out) throw CommandError{kExitRuntime, "write failed for '" + path.string() + "'"};
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

nlohmann::ordered_json config_snapshot(const stgc_config* cfg) {
  char* keys = nullptr;
  check(stgc_config_keys(&keys), "config keys");
  std::istringstream rows(take(keys));
  nlohmann::ordered_json snap = nlohmann::ordered_json::object();
  std::string row;
  while (std::getline(rows, row)) {
    const std::string key = row.substr(0, row.find('\t'));
    snap[key] = get(cfg, key);
  }
  return snap;
}

// Flags shared by train and verify.
struct TrainFlags {
  std::string config;
  std::string out;
  std::optional<std::string> data;
  std::optional<std::string> stgc;
  std::optional<double> tau, alpha, beta;
  std::optional<std::string> cel_kind;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  bool per_layer = false;
  bool cel_literal_sign = false;
  bool quiet = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool verify) {
  cmd->add_option("config", f.config, "run configuration file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory")->required();
  cmd->add_option("--data", f.data, "STGD dataset (overrides data.path)");
  if (!verify) {
    cmd->add_option("--stgc", f.stgc, "conflict elimination on|off")->check(CLI::IsMember({"on", "off"}));
    cmd->add_option("--alpha", f.alpha, "load balancing weight");
  }
  cmd->add_option("--tau", f.tau, "conflict threshold");
  cmd->add_option("--beta", f.beta, "conflict elimination weight");
  cmd->add_option("--cel-kind", f.cel_kind, "ce_like|mse_like")->check(CLI::IsMember({"ce_like", "mse_like"}));
  cmd->add_option("--seed", f.seed, "training seed");
  cmd->add_option("--steps", f.steps, "optimizer steps");
  cmd->add_flag("--per-layer", f.per_layer, "log consistency at L/4, L/2 and 3L/4");
  cmd->add_flag("--quiet", f.quiet, "no per-step progress");
  cmd->add_flag("--cel-literal-sign", f.cel_literal_sign)->group("");
}

struct Progress {
  std::size_t steps = 0;
  bool quiet = false;
};

void on_step(const char* line, void* user) {
  auto* p = static_cast<Progress*>(user);
  if (p->quiet) return;
  const auto j = nlohmann::json::parse(line);
  const std::size_t step = j["step"].get<std::size_t>();
  const bool last = step + 1 == p->steps;
  if (step % 100 != 0 && !last) return;
  std::fprintf(stderr, "step %zu/%zu loss_total=%.5f loss_cel=%.5f", step + 1, p->steps,
               j["loss_total"].get<double>(), j["loss_cel"].get<double>());
  if (j["conflicting_ratio"].is_number()) {
    std::fprintf(stderr, " conflicting_ratio=%.4f", j["conflicting_ratio"].get<double>());
  }
  if (j["val_acc"].is_number()) std::fprintf(stderr, " val_acc=%.4f", j["val_acc"].get<double>());
  std::fputc('\n', stderr);
}

int run_training(const TrainFlags& f, bool verify, const std::string& command, int argc, char** argv) {
  ConfigPtr cfg = load_config(f.config);
  if (f.stgc) set(cfg.get(), "train.stgc", *f.stgc);
  if (f.tau) set(cfg.get(), "model.tau", fmt_double(*f.tau));
  if (f.alpha) set(cfg.get(), "model.alpha", fmt_double(*f.alpha));
  if (f.beta) set(cfg.get(), "model.beta", fmt_double(*f.beta));
  if (f.cel_kind) set(cfg.get(), "model.cel_kind", *f.cel_kind);
  if (f.seed) set(cfg.get(), "train.seed", std::to_string(*f.seed));
  if (f.steps) set(cfg.get(), "train.steps", std::to_string(*f.steps));
  if (f.per_layer) set(cfg.get(), "train.per_layer_consistency", "on");
  if (f.cel_literal_sign) set(cfg.get(), "train.cel_literal_sign", "on");
  if (f.data) set(cfg.get(), "data.path", *f.data);
  if (verify) {
    set(cfg.get(), "train.verify_mode", "on");
    set(cfg.get(), "train.stgc", "on");
  }
  const std::string data_path = get(cfg.get(), "data.path");
  if (data_path.empty()) usage("no dataset: set data.path in the config or pass --data");
  DatasetPtr data = load_dataset(data_path);

  const fs::path out(f.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw CommandError{kExitRuntime, "cannot create '" + out.string() + "': " + ec.message()};

  nlohmann::ordered_json manifest;
  manifest["tool"] = "stgc";
  manifest["version"] = stgc_version();
  manifest["command"] = command;
  std::vector<std::string> args(argv, argv + argc);
  manifest["argv"] = args;
  manifest["seed"] = std::stoull(get(cfg.get(), "train.seed"));
  manifest["config"] = config_snapshot(cfg.get());
  manifest["dataset"] = data_path;
  manifest["outputs"] = {{"metrics", (out / "metrics.jsonl").string()},
                         {"timing", (out / "timing.jsonl").string()},
                         {"checkpoint", (out / "model.stgc").string()},
                         {"run_end", (out / "run_end.json").string()}};
  manifest["started_at"] = utc_now();
  write_file(out / "manifest.json", manifest.dump(2) + "\n");

  Progress progress{std::stoull(get(cfg.get(), "train.steps")), f.quiet};
  stgc_run* run = nullptr;
  check(stgc_train(cfg.get(), data.get(), out.string().c_str(), on_step, &progress, &run), command);
  RunPtr holder(run);
  char* summary = nullptr;
  check(stgc_run_summary(run, &summary), "summary");
  auto summary_json = nlohmann::ordered_json::parse(take(summary));
  nlohmann::ordered_json end;
  end["finished_at"] = utc_now();
  end["summary"] = summary_json;
  write_file(out / "run_end.json", end.dump(2) + "\n");
  std::cout << summary_json.dump(2) << "\n";
  return 0;
}

std::vector<double> parse_doubles(const std::string& list, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      usage(flag + ": '" + item + "' is not a number");
    }
  }
  if (out.empty()) usage(flag + ": empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-gradient conflict experiments on a toy mixture-of-experts classifier"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(stgc_version()));

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic STGD dataset from synth.* keys");
  std::string gen_config, gen_out, gen_csv;
  gen->add_option("config", gen_config, "configuration file with synth.* keys")->required()->check(CLI::ExistingFile);
  gen->add_option("-o,--out", gen_out, "output .stgd path")->required();
  gen->add_option("--csv", gen_csv, "also export CSV here");

  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "train and log per-step metrics");
  add_train_flags(train, train_flags, false);

  TrainFlags verify_flags;
  auto* verify = app.add_subcommand("verify", "update with the conflict elimination loss only");
  add_train_flags(verify, verify_flags, true);

  auto* analyze = app.add_subcommand("analyze", "run one analysis study on a checkpoint");
  std::string an_ckpt, an_data, an_which, an_out;
  std::size_t an_tokens = 512;
  std::uint64_t an_seed = 7;
  analyze->add_option("checkpoint", an_ckpt, "STGC checkpoint")->required();
  analyze->add_option("dataset", an_data, "STGD dataset")->required();
  analyze->add_option("--which", an_which, "hist, proxy, featgrad, layers or load")->required();
  analyze->add_option("--out", an_out, "report directory")->required();
  analyze->add_option("--tokens", an_tokens, "leading samples used")->capture_default_str();
  analyze->add_option("--seed", an_seed, "permutation seed for the proxy control")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "accuracy, optionally under an expert capacity limit");
  std::string ev_ckpt, ev_data, ev_out;
  std::optional<double> ev_capacity;
  bool ev_bpr = false;
  std::size_t ev_batch = 128;
  eval->add_option("checkpoint", ev_ckpt, "STGC checkpoint")->required();
  eval->add_option("dataset", ev_data, "STGD dataset")->required();
  eval->add_option("--capacity", ev_capacity, "capacity factor (default unlimited)");
  eval->add_flag("--bpr", ev_bpr, "batch prioritized routing");
  eval->add_option("--batch", ev_batch, "tokens per evaluation batch")->capture_default_str();
  eval->add_option("--out", ev_out, "also write the report here");

  auto* plot = app.add_subcommand("plot", "SVG line chart of metrics.jsonl files");
  std::vector<std::string> pl_inputs;
  std::string pl_series, pl_out, pl_title;
  plot->add_option("inputs", pl_inputs, "JSONL files")->required();
  plot->add_option("--series", pl_series, "comma-separated fields, e.g. loss_cel,grad_consistency")->required();
  plot->add_option("-o,--out", pl_out, "output .svg")->required();
  plot->add_option("--title", pl_title, "chart title");

  auto* sweep = app.add_subcommand("sweep", "train over a tau x beta grid and tabulate");
  std::string sw_config, sw_out, sw_taus = "-0.1,0,0.1", sw_betas = "0.5,1,2";
  std::optional<std::string> sw_data;
  std::optional<std::size_t> sw_steps;
  sweep->add_option("config", sw_config, "run configuration file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", sw_out, "output directory")->required();
  sweep->add_option("--data", sw_data, "STGD dataset (overrides data.path)");
  sweep->add_option("--taus", sw_taus, "comma-separated thresholds")->capture_default_str();
  sweep->add_option("--betas", sw_betas, "comma-separated weights")->capture_default_str();
  sweep->add_option("--steps", sw_steps, "optimizer steps per run");

  auto* keys = app.add_subcommand("keys", "list every configuration key");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) {
      ConfigPtr cfg = load_config(gen_config);
      stgc_dataset* d = nullptr;
      check(stgc_dataset_generate(cfg.get(), &d), "gen-data");
      DatasetPtr data(d);
      check(stgc_dataset_save(data.get(), gen_out.c_str()), "gen-data");
      char* summary = nullptr;
      check(stgc_dataset_summary(data.get(), cfg.get(), &summary), "gen-data");
      const std::string text = take(summary);
      write_file(gen_out + ".summary.json", text + "\n");
      if (!gen_csv.empty()) check(stgc_dataset_export_csv(data.get(), gen_csv.c_str()), "gen-data");
      std::cout << text << "\n";
      return 0;
    }
    if (*train) return run_training(train_flags, false, "train", argc, argv);
    if (*verify) return run_training(verify_flags, true, "verify", argc, argv);
    if (*analyze) {
      ModelPtr model = load_model(an_ckpt);
      DatasetPtr data = load_dataset(an_data);
      char* json = nullptr;
      check(stgc_analyze(model.get(), data.get(), an_which.c_str(), an_tokens, an_seed, an_out.c_str(), &json),
            "analyze");
      std::cout << take(json) << "\n";
      return 0;
    }
    if (*eval) {
      if (ev_capacity && *ev_capacity <= 0.0) usage("--capacity must be > 0");
      ModelPtr model = load_model(ev_ckpt);
      DatasetPtr data = load_dataset(ev_data);
      char* json = nullptr;
      check(stgc_evaluate(model.get(), data.get(), ev_capacity.value_or(0.0), ev_bpr ? 1 : 0, ev_batch, &json),
            "eval");
      const std::string text = take(json);
      if (!ev_out.empty()) write_file(ev_out, text + "\n");
      std::cout << text << "\n";
      return 0;
    }
    if (*plot) {
      std::vector<std::string> names;
      std::stringstream ss(pl_series);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) names.push_back(item);
      }
      std::vector<const char*> paths, series;
      for (const auto& p : pl_inputs) paths.push_back(p.c_str());
      for (const auto& s : names) series.push_back(s.c_str());
      check(stgc_plot(paths.data(), paths.size(), series.data(), series.size(),
                      pl_title.empty() ? nullptr : pl_title.c_str(), pl_out.c_str()),
            "plot");
      return 0;
    }
    if (*sweep) {
      ConfigPtr cfg = load_config(sw_config);
      if (sw_data) set(cfg.get(), "data.path", *sw_data);
      if (sw_steps) set(cfg.get(), "train.steps", std::to_string(*sw_steps));
      const std::string data_path = get(cfg.get(), "data.path");
      if (data_path.empty()) usage("no dataset: set data.path in the config or pass --data");
      const auto taus = parse_doubles(sw_taus, "--taus");
      const auto betas = parse_doubles(sw_betas, "--betas");
      DatasetPtr data = load_dataset(data_path);
      char* table = nullptr;
      check(stgc_sweep(cfg.get(), data.get(), taus.data(), taus.size(), betas.data(), betas.size(), sw_out.c_str(),
                       &table),
            "sweep");
      std::cout << take(table);
      return 0;
    }
    if (*keys) {
      char* text = nullptr;
      check(stgc_config_keys(&text), "keys");
      std::cout << take(text);
      return 0;
    }
  } catch (const CommandError& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  }
  return kExitUsage;
}

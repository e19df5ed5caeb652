#include "stgc/stgc.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <new>
#include <string>
#include <vector>

#include <json.hpp>

#include "stgc/checkpoint.hpp"
#include "stgc/config.hpp"
#include "stgc/error.hpp"
#include "stgc/plot.hpp"
#include "stgc/reports.hpp"
#include "stgc/train.hpp"

struct stgc_config {
  stgc::RunConfig value;
};

struct stgc_dataset {
  stgc::Dataset value;
};

struct stgc_model {
  stgc::Model value;
};

struct stgc_run {
  stgc::RunResult value;
};

namespace {

constexpr const char* kVersion = "0.1.0";

thread_local std::string last_error;

stgc_status to_status(stgc::ErrorKind kind) {
  switch (kind) {
    case stgc::ErrorKind::InvalidArgument: return STGC_ERR_INVALID_ARGUMENT;
    case stgc::ErrorKind::Dimension: return STGC_ERR_DIMENSION;
    case stgc::ErrorKind::Numeric: return STGC_ERR_NUMERIC;
    case stgc::ErrorKind::Io: return STGC_ERR_IO;
    case stgc::ErrorKind::Parse: return STGC_ERR_PARSE;
    case stgc::ErrorKind::Degenerate: return STGC_ERR_DEGENERATE;
  }
  return STGC_ERR_INTERNAL;
}

template <typename F>
stgc_status guarded(F&& f) {
  try {
    f();
    return STGC_OK;
  } catch (const stgc::Error& e) {
    last_error = e.what();
    return to_status(e.kind());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return STGC_ERR_INTERNAL;
  } catch (const std::filesystem::filesystem_error& e) {
    last_error = e.what();
    return STGC_ERR_IO;
  } catch (const std::exception& e) {
    last_error = e.what();
    return STGC_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (!p) stgc::fail(stgc::ErrorKind::InvalidArgument, std::string(what) + " is NULL");
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* stgc_version(void) { return kVersion; }

const char* stgc_last_error(void) { return last_error.c_str(); }

const char* stgc_status_name(stgc_status status) {
  switch (status) {
    case STGC_OK: return "ok";
    case STGC_ERR_INVALID_ARGUMENT: return "invalid argument";
    case STGC_ERR_DIMENSION: return "dimension mismatch";
    case STGC_ERR_NUMERIC: return "numeric failure";
    case STGC_ERR_IO: return "i/o error";
    case STGC_ERR_PARSE: return "parse error";
    case STGC_ERR_DEGENERATE: return "degenerate input";
    case STGC_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void stgc_string_free(char* s) { std::free(s); }

stgc_status stgc_config_default(stgc_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new stgc_config{};
  });
}

stgc_status stgc_config_load(const char* path, stgc_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new stgc_config{stgc::load_config(path)};
  });
}

stgc_status stgc_config_parse(const char* text, const char* source, stgc_config** out) {
  return guarded([&] {
    need(text, "text");
    need(out, "out");
    *out = new stgc_config{stgc::parse_config(text, source ? source : "<config>")};
  });
}

stgc_status stgc_config_set(stgc_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    stgc::set_config_value(cfg->value, key, value);
  });
}

stgc_status stgc_config_get(const stgc_config* cfg, const char* key, char** value) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    *value = copy_string(stgc::config_value(cfg->value, key));
  });
}

stgc_status stgc_config_format(const stgc_config* cfg, char** text) {
  return guarded([&] {
    need(cfg, "cfg");
    need(text, "text");
    *text = copy_string(stgc::format_config(cfg->value));
  });
}

stgc_status stgc_config_keys(char** text) {
  return guarded([&] {
    need(text, "text");
    std::string out;
    for (const auto& k : stgc::config_keys()) out += k.name + "\t" + k.type + "\t" + k.help + "\n";
    *text = copy_string(out);
  });
}

void stgc_config_free(stgc_config* cfg) { delete cfg; }

stgc_status stgc_dataset_generate(const stgc_config* cfg, stgc_dataset** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = new stgc_dataset{stgc::generate(cfg->value.synth)};
  });
}

stgc_status stgc_dataset_load(const char* path, stgc_dataset** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new stgc_dataset{stgc::load_dataset(path)};
  });
}

stgc_status stgc_dataset_save(const stgc_dataset* data, const char* path) {
  return guarded([&] {
    need(data, "data");
    need(path, "path");
    stgc::save_dataset(data->value, path);
  });
}

stgc_status stgc_dataset_export_csv(const stgc_dataset* data, const char* path) {
  return guarded([&] {
    need(data, "data");
    need(path, "path");
    stgc::export_csv(data->value, path);
  });
}

stgc_status stgc_dataset_summary(const stgc_dataset* data, const stgc_config* cfg, char** json) {
  return guarded([&] {
    need(data, "data");
    need(cfg, "cfg");
    need(json, "json");
    *json = copy_string(stgc::dataset_summary_json(data->value, cfg->value.synth));
  });
}

stgc_status stgc_dataset_shape(const stgc_dataset* data, size_t* samples, size_t* input_dim, size_t* num_classes,
                               size_t* num_tasks) {
  return guarded([&] {
    need(data, "data");
    if (samples) *samples = data->value.size();
    if (input_dim) *input_dim = data->value.input_dim();
    if (num_classes) *num_classes = data->value.num_classes;
    if (num_tasks) *num_tasks = data->value.num_tasks;
  });
}

void stgc_dataset_free(stgc_dataset* data) { delete data; }

stgc_status stgc_model_create(const stgc_config* cfg, stgc_model** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    cfg->value.model.validate();
    *out = new stgc_model{stgc::Model::create(cfg->value.model, stgc::derive_seed(cfg->value.train.seed, 1))};
  });
}

stgc_status stgc_model_load(const char* path, stgc_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new stgc_model{stgc::load_checkpoint(path)};
  });
}

stgc_status stgc_model_save(const stgc_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    stgc::save_checkpoint(model->value, path);
  });
}

stgc_status stgc_model_checksum(const stgc_model* model, uint64_t* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = stgc::checksum(model->value.params);
  });
}

void stgc_model_free(stgc_model* model) { delete model; }

stgc_status stgc_train(const stgc_config* cfg, const stgc_dataset* data, const char* out_dir,
                       stgc_step_callback on_step, void* user, stgc_run** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(data, "data");
    need(out, "out");
    const auto& rc = cfg->value;
    std::function<void(const stgc::MetricsSnapshot&)> cb;
    if (on_step) {
      const auto layers = rc.train.per_layer_consistency ? stgc::consistency_layers(rc.model.num_layers)
                                                         : std::vector<std::size_t>{};
      cb = [on_step, user, layers](const stgc::MetricsSnapshot& m) {
        on_step(stgc::metrics_json_line(m, layers).c_str(), user);
      };
    }
    std::optional<stgc::RunOutputs> outputs;
    if (out_dir) outputs = stgc::RunOutputs{out_dir};
    *out = new stgc_run{stgc::run_experiment(rc.model, rc.train, data->value, outputs ? &*outputs : nullptr, cb)};
  });
}

stgc_status stgc_run_summary(const stgc_run* run, char** json) {
  return guarded([&] {
    need(run, "run");
    need(json, "json");
    const auto& r = run->value;
    nlohmann::ordered_json j;
    j["steps"] = r.metrics.size();
    j["final_val_acc"] = r.final_val_accuracy;
    const auto& last = r.metrics.back().loss;
    j["final_loss_main"] = last.main;
    j["final_loss_aux"] = last.aux;
    j["final_loss_cel"] = last.cel;
    j["mean_step_ms"] = r.mean_step_ms;
    j["mean_capture_ms"] = r.mean_capture_ms;
    j["checksum"] = stgc::checksum(r.model.params);
    *json = copy_string(j.dump(2));
  });
}

stgc_status stgc_run_model(const stgc_run* run, stgc_model** out) {
  return guarded([&] {
    need(run, "run");
    need(out, "out");
    *out = new stgc_model{run->value.model};
  });
}

void stgc_run_free(stgc_run* run) { delete run; }

stgc_status stgc_analyze(const stgc_model* model, const stgc_dataset* data, const char* study, size_t tokens,
                         uint64_t seed, const char* out_dir, char** json) {
  return guarded([&] {
    need(model, "model");
    need(data, "data");
    need(study, "study");
    need(out_dir, "out_dir");
    stgc::StudyOptions opts;
    if (tokens > 0) opts.tokens = tokens;
    opts.seed = seed;
    const auto res = stgc::run_study(model->value, data->value, stgc::parse_study(study), out_dir, opts);
    if (json) *json = copy_string(res.json);
  });
}

stgc_status stgc_evaluate(const stgc_model* model, const stgc_dataset* data, double capacity_factor, int bpr,
                          size_t batch_size, char** json) {
  return guarded([&] {
    need(model, "model");
    need(data, "data");
    need(json, "json");
    stgc::CapacityPolicy policy;
    if (capacity_factor > 0.0) policy.capacity_factor = capacity_factor;
    policy.bpr = bpr != 0;
    const auto rep = stgc::evaluate(model->value, data->value, policy, batch_size);
    *json = copy_string(stgc::eval_report_json(rep));
  });
}

stgc_status stgc_plot(const char* const* jsonl_paths, size_t num_paths, const char* const* series,
                      size_t num_series, const char* title, const char* out_svg) {
  return guarded([&] {
    need(out_svg, "out_svg");
    if (num_paths > 0) need(jsonl_paths, "jsonl_paths");
    if (num_series > 0) need(series, "series");
    std::vector<std::filesystem::path> paths(jsonl_paths, jsonl_paths + num_paths);
    std::vector<std::string> names(series, series + num_series);
    stgc::PlotOptions opts;
    if (title) opts.title = title;
    const std::string svg = stgc::render_svg(paths, names, opts);
    std::ofstream f(out_svg, std::ios::binary | std::ios::trunc);
    if (!f) stgc::fail(stgc::ErrorKind::Io, std::string("cannot open '") + out_svg + "' for writing");
    f << svg;
    if (!f) stgc::fail(stgc::ErrorKind::Io, std::string("write failed for '") + out_svg + "'");
  });
}

stgc_status stgc_sweep(const stgc_config* cfg, const stgc_dataset* data, const double* taus, size_t num_taus,
                       const double* betas, size_t num_betas, const char* out_dir, char** table) {
  return guarded([&] {
    need(cfg, "cfg");
    need(data, "data");
    need(out_dir, "out_dir");
    if (num_taus > 0) need(taus, "taus");
    if (num_betas > 0) need(betas, "betas");
    const auto res = stgc::run_sweep(cfg->value.model, cfg->value.train, data->value,
                                     std::vector<double>(taus, taus + num_taus),
                                     std::vector<double>(betas, betas + num_betas), out_dir);
    if (table) *table = copy_string(res.table);
  });
}

}  // extern "C"

#ifndef STGC_STGC_H
#define STGC_STGC_H

/*
 * C interface to the stgc library. Objects are opaque handles released with
 * their matching *_free function (NULL is accepted). Every call that can fail
 * returns an stgc_status; on failure stgc_last_error() holds a message for the
 * calling thread until its next failing call. Strings returned through
 * char** are heap copies owned by the caller and released with
 * stgc_string_free.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define STGC_API __declspec(dllexport)
#else
#define STGC_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum stgc_status {
  STGC_OK = 0,
  STGC_ERR_INVALID_ARGUMENT = 1,
  STGC_ERR_DIMENSION = 2,
  STGC_ERR_NUMERIC = 3,
  STGC_ERR_IO = 4,
  STGC_ERR_PARSE = 5,
  STGC_ERR_DEGENERATE = 6,
  STGC_ERR_INTERNAL = 7
} stgc_status;

typedef struct stgc_config stgc_config;
typedef struct stgc_dataset stgc_dataset;
typedef struct stgc_model stgc_model;
typedef struct stgc_run stgc_run;

STGC_API const char* stgc_version(void);
STGC_API const char* stgc_last_error(void);
STGC_API const char* stgc_status_name(stgc_status status);
STGC_API void stgc_string_free(char* s);

/* Run configuration: flat "key = value" text with model.*, train.*, synth.*
 * and data.* keys. */
STGC_API stgc_status stgc_config_default(stgc_config** out);
STGC_API stgc_status stgc_config_load(const char* path, stgc_config** out);
STGC_API stgc_status stgc_config_parse(const char* text, const char* source, stgc_config** out);
STGC_API stgc_status stgc_config_set(stgc_config* cfg, const char* key, const char* value);
STGC_API stgc_status stgc_config_get(const stgc_config* cfg, const char* key, char** value);
STGC_API stgc_status stgc_config_format(const stgc_config* cfg, char** text);
/* Newline-separated "key<TAB>type<TAB>help" rows for every accepted key. */
STGC_API stgc_status stgc_config_keys(char** text);
STGC_API void stgc_config_free(stgc_config* cfg);

/* Datasets. */
STGC_API stgc_status stgc_dataset_generate(const stgc_config* cfg, stgc_dataset** out);
STGC_API stgc_status stgc_dataset_load(const char* path, stgc_dataset** out);
STGC_API stgc_status stgc_dataset_save(const stgc_dataset* data, const char* path);
STGC_API stgc_status stgc_dataset_export_csv(const stgc_dataset* data, const char* path);
/* Class balance and confusion-pair manifest as JSON, using cfg's synth.* keys. */
STGC_API stgc_status stgc_dataset_summary(const stgc_dataset* data, const stgc_config* cfg, char** json);
STGC_API stgc_status stgc_dataset_shape(const stgc_dataset* data, size_t* samples, size_t* input_dim,
                                        size_t* num_classes, size_t* num_tasks);
STGC_API void stgc_dataset_free(stgc_dataset* data);

/* Models. */
STGC_API stgc_status stgc_model_create(const stgc_config* cfg, stgc_model** out);
STGC_API stgc_status stgc_model_load(const char* path, stgc_model** out);
STGC_API stgc_status stgc_model_save(const stgc_model* model, const char* path);
STGC_API stgc_status stgc_model_checksum(const stgc_model* model, uint64_t* out);
STGC_API void stgc_model_free(stgc_model* model);

/* Training. Called once per step with the step's metrics line (no newline). */
typedef void (*stgc_step_callback)(const char* metrics_json, void* user);

/* Trains a fresh model on `data` with cfg's model.* and train.* keys. When
 * out_dir is non-NULL it receives metrics.jsonl, timing.jsonl and model.stgc. */
STGC_API stgc_status stgc_train(const stgc_config* cfg, const stgc_dataset* data, const char* out_dir,
                                stgc_step_callback on_step, void* user, stgc_run** out);
/* Final validation accuracy, mean step time and mean capture time as JSON. */
STGC_API stgc_status stgc_run_summary(const stgc_run* run, char** json);
STGC_API stgc_status stgc_run_model(const stgc_run* run, stgc_model** out);
STGC_API void stgc_run_free(stgc_run* run);

/* Analysis study by name: hist, proxy, featgrad, layers or load. Reports are
 * written into out_dir; the main report is also returned. */
STGC_API stgc_status stgc_analyze(const stgc_model* model, const stgc_dataset* data, const char* study,
                                  size_t tokens, uint64_t seed, const char* out_dir, char** json);

/* Accuracy overall and per task. capacity_factor <= 0 means unlimited. */
STGC_API stgc_status stgc_evaluate(const stgc_model* model, const stgc_dataset* data, double capacity_factor,
                                   int bpr, size_t batch_size, char** json);

/* SVG line chart of JSONL traces, one panel per series. */
STGC_API stgc_status stgc_plot(const char* const* jsonl_paths, size_t num_paths, const char* const* series,
                               size_t num_series, const char* title, const char* out_svg);

/* One training run per (tau, beta) pair; returns the markdown comparison table. */
STGC_API stgc_status stgc_sweep(const stgc_config* cfg, const stgc_dataset* data, const double* taus,
                                size_t num_taus, const double* betas, size_t num_betas, const char* out_dir,
                                char** table);

#ifdef __cplusplus
}
#endif

#endif

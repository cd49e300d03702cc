#ifndef CATFORMER_H
#define CATFORMER_H

#include <stddef.h>

#if defined(__GNUC__)
#define CATF_API __attribute__((visibility("default")))
#else
#define CATF_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as process exit codes for the command-line driver. */
typedef enum catf_status {
  CATF_OK = 0,
  CATF_ERR_INTERNAL = 1,
  CATF_ERR_CONFIG = 2,
  CATF_ERR_DATA = 3,
  CATF_ERR_INVARIANT = 4,
  CATF_ERR_CHECKPOINT = 5,
  CATF_ERR_METRICS = 6
} catf_status;

typedef struct catf_config catf_config;
typedef struct catf_model catf_model;

typedef struct catf_eval_result {
  size_t num_tasks;
  size_t samples;
  double overall_acc;
  double routing_acc;
  double oracle_acc;
  size_t bank_bytes;
} catf_eval_result;

CATF_API const char* catf_version(void);
/* Message of the last failed call on this thread ("" if none). */
CATF_API const char* catf_last_error(void);

/* Configuration: built-in defaults, then file, then individual keys. */
CATF_API catf_status catf_config_new(catf_config** out);
CATF_API void catf_config_free(catf_config* cfg);
CATF_API catf_status catf_config_load(catf_config* cfg, const char* path);
CATF_API catf_status catf_config_set(catf_config* cfg, const char* key, const char* value);
/* Applies CATF_OUT (if set) to run.out_dir. */
CATF_API catf_status catf_config_apply_env(catf_config* cfg);
/* Copies a value (or, with key == NULL, the resolved `key = value` text)
   into buf; *len receives the full length excluding the terminator. */
CATF_API catf_status catf_config_get(const catf_config* cfg, const char* key, char* buf, size_t cap,
                            size_t* len);

CATF_API catf_status catf_train(const catf_config* cfg);
CATF_API catf_status catf_eval(const catf_config* cfg, const char* checkpoint, catf_eval_result* out);
CATF_API catf_status catf_ablate(const catf_config* cfg, const char* variant, catf_eval_result* out);
/* Writes the CSV to out_csv, or to stdout when out_csv is NULL or "-". */
CATF_API catf_status catf_report(const char* const* metrics_paths, size_t count, const char* out_csv);

/* Inference on a finalized checkpoint. */
CATF_API catf_status catf_model_load(const char* checkpoint, catf_model** out);
CATF_API void catf_model_free(catf_model* model);
CATF_API catf_status catf_model_info(const catf_model* model, size_t* num_tasks, size_t* classes_per_task,
                            size_t* sample_len);
/* `sample` holds sample_len floats; returns the routed task and global class. */
CATF_API catf_status catf_model_classify(catf_model* model, const float* sample, size_t sample_len,
                                int* task, int* global_class);

#ifdef __cplusplus
}
#endif

#endif

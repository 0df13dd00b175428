#ifndef BFM_BFM_H
#define BFM_BFM_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define BFM_API __declspec(dllexport)
#else
#define BFM_API __attribute__((visibility("default")))
#endif

typedef enum bfm_status {
  BFM_OK = 0,
  BFM_ERR_IO = 1,
  BFM_ERR_FORMAT = 2,
  BFM_ERR_UNSUPPORTED_SHAPE = 3,
  BFM_ERR_UNSUPPORTED_DATATYPE = 4,
  BFM_ERR_DUPLICATE_MODALITY = 5,
  BFM_ERR_NOT_FOUND = 6,
  BFM_ERR_INVALID_NAME = 7,
  BFM_ERR_UNKNOWN_MODALITY = 8,
  BFM_ERR_DIMENSION_MISMATCH = 9,
  BFM_ERR_SHAPE = 10,
  BFM_ERR_RANGE = 11,
  BFM_ERR_EMPTY_BATCH = 12,
  BFM_ERR_EMPTY_SESSION = 13,
  BFM_ERR_DEGENERATE_LOSS = 14,
  BFM_ERR_INSUFFICIENT_BATCH = 15,
  BFM_ERR_NONFINITE_LOSS = 16,
  BFM_ERR_NONFINITE_GRADIENT = 17,
  BFM_ERR_VERSION = 18,
  BFM_ERR_CONFIG = 19,
  BFM_ERR_INVALID_ARGUMENT = 20,
  BFM_ERR_INTERNAL = 99
} bfm_status;

typedef struct bfm_manifest bfm_manifest;
typedef struct bfm_volume bfm_volume;
typedef struct bfm_checkpoint bfm_checkpoint;

/* Message of the last failure on the calling thread ("" if none). */
BFM_API const char* bfm_last_error(void);
BFM_API const char* bfm_status_name(int status);
BFM_API const char* bfm_version(void);

/* Strings returned through char** out-parameters are owned by the caller. */
BFM_API void bfm_string_free(char* s);

/* ---- configuration ----
 * Configs are flat JSON objects. Resolution applies `overrides_json` over
 * `base_json` (either may be NULL) and validates the result. */
BFM_API bfm_status bfm_config_resolve(const char* base_json, const char* overrides_json,
                                      char** out_json);
BFM_API bfm_status bfm_config_tiny(char** out_json);

/* ---- corpus ---- */
BFM_API bfm_status bfm_scan_corpus(const char* root, bfm_manifest** out);
BFM_API bfm_status bfm_manifest_load(const char* path, bfm_manifest** out);
BFM_API bfm_status bfm_manifest_save(const bfm_manifest* m, const char* path);
BFM_API size_t bfm_manifest_case_count(const bfm_manifest* m);
BFM_API bfm_status bfm_manifest_to_json(const bfm_manifest* m, char** out_json);
BFM_API void bfm_manifest_free(bfm_manifest* m);

BFM_API bfm_status bfm_volume_read(const char* path, bfm_volume** out);
BFM_API bfm_status bfm_volume_create(const int dims[3], const double spacing[3], const float* voxels,
                                     bfm_volume** out);
BFM_API bfm_status bfm_volume_write(const bfm_volume* v, const char* path);
BFM_API void bfm_volume_dims(const bfm_volume* v, int dims[3]);
BFM_API void bfm_volume_spacing(const bfm_volume* v, double spacing[3]);
/* x-fastest voxel order; valid until the volume is freed. */
BFM_API const float* bfm_volume_data(const bfm_volume* v);
BFM_API void bfm_volume_free(bfm_volume* v);

/* ---- checkpoints ---- */
BFM_API bfm_status bfm_checkpoint_load(const char* path, bfm_checkpoint** out);
BFM_API bfm_status bfm_checkpoint_save(const bfm_checkpoint* c, const char* path);
/* {"task", "step", "epoch", "config", "extra", "tensors", "parameters"} */
BFM_API bfm_status bfm_checkpoint_info(const bfm_checkpoint* c, char** out_json);
BFM_API void bfm_checkpoint_free(bfm_checkpoint* c);

/* ---- workflows ----
 * `manifest_path` NULL selects the synthetic corpus described by the config.
 * Output directories are created as needed. */
BFM_API bfm_status bfm_synth_corpus(const char* config_json, const char* out_dir,
                                    bfm_manifest** out);
BFM_API bfm_status bfm_pretrain(const char* config_json, const char* manifest_path,
                                const char* resume_checkpoint, const char* out_dir,
                                bfm_checkpoint** out);
/* Report: {"max_rel_error", "checked", "passed", "tol", "per_tensor"}. */
BFM_API bfm_status bfm_gradcheck(const char* config_json, char** report_json);
/* The last `val_cases` cases validate; the rest train. */
BFM_API bfm_status bfm_finetune(const char* config_json, const char* manifest_path,
                                const char* init_checkpoint, const char* out_dir,
                                bfm_checkpoint** out);
/* `matrix` is "default" or a path to a JSON list of {"name", "available"}.
 * `task` NULL uses the checkpoint's task. Returns the CSV text and a JSON
 * log of skipped sessions. */
BFM_API bfm_status bfm_evaluate(const char* checkpoint_path, const char* manifest_path,
                                const char* matrix, const char* task, int threads,
                                char** csv_out, char** log_json);
BFM_API bfm_status bfm_impute(const char* checkpoint_path, const char* manifest_path,
                              const char* case_id, const char* target_modality,
                              const char* out_path, char** report_json);
BFM_API bfm_status bfm_report(const char* metrics_path, const char* out_dir, char** report_json);

#ifdef __cplusplus
}
#endif

#endif

/* C interface to the sensory-stream policy library.
 *
 * Every function returns a moss_status; on failure the thread-local
 * message from moss_last_error() describes the problem. Objects are
 * opaque handles created/destroyed through this interface. Strings
 * returned via out-parameters are heap-allocated and must be released
 * with moss_string_free.
 */
#ifndef MOSS_C_H
#define MOSS_C_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
    MOSS_OK = 0,
    MOSS_ERR_VALIDATION = 1, /* bad arguments, config, or file format */
    MOSS_ERR_RUNTIME = 2     /* I/O or execution failure */
} moss_status;

typedef struct moss_ctx moss_ctx;     /* run configuration + workspace */
typedef struct moss_model moss_model; /* loaded checkpoint */

/* Message for the calling thread's most recent failure; never NULL. */
const char* moss_last_error(void);

void moss_string_free(char* s);

/* --- configuration ------------------------------------------------- */

/* config_json may be NULL or "" for the built-in defaults; unknown keys
 * are rejected. */
moss_status moss_ctx_create(const char* config_json, moss_ctx** out);
moss_status moss_ctx_create_from_file(const char* path, moss_ctx** out);
void moss_ctx_destroy(moss_ctx* ctx);

moss_status moss_ctx_config_json(const moss_ctx* ctx, char** out_json);
moss_status moss_ctx_set_seed(moss_ctx* ctx, uint64_t seed);

/* Override the stream set ("", "tactile", "torque", "tactile,torque")
 * and the control variant ("none", "fused", "single-stage", "no-pred"). */
moss_status moss_ctx_set_modalities(moss_ctx* ctx, const char* csv);
moss_status moss_ctx_set_control(moss_ctx* ctx, const char* control);

/* --- data and training ---------------------------------------------- */

/* Writes one demonstration file per task under <out_dir>/demos (skipping
 * files that already exist) plus a manifest; returns a JSON report. */
moss_status moss_gen_demos(moss_ctx* ctx, const char* out_dir,
                           char** out_report_json);

/* Pretrains the stream-free base policy; writes <out_dir>/base.ckpt. */
moss_status moss_train_base(moss_ctx* ctx, const char* out_dir,
                            char** out_ckpt_path);

/* Runs the stream-training pipeline under out_dir. stage: 1 (needs
 * base.ckpt), 2 (needs stage1.ckpt), or 0 for both chained. The
 * configured control variant selects the training recipe. */
moss_status moss_train_streams(moss_ctx* ctx, int stage, const char* out_dir,
                               char** out_ckpt_path);

/* --- evaluation and analysis ----------------------------------------- */

moss_status moss_model_load(const char* ckpt_path, moss_model** out);
void moss_model_destroy(moss_model* m);
moss_status moss_model_stage(const moss_model* m, char** out_stage);

/* task is "fragile-grasp" or "blind-insert". episodes <= 0 uses the
 * checkpoint's configured count. Returns the success report as JSON. */
moss_status moss_evaluate(const moss_model* m, const char* task,
                          int episodes, uint64_t seed0,
                          char** out_report_json);

/* One rollout; writes the per-step attention trace CSV and returns a
 * summary JSON (first contact step, pre/contact mean standardized
 * attention per stream). */
moss_status moss_dump_attention(const moss_model* m, const char* task,
                                uint64_t seed, const char* csv_path,
                                char** out_summary_json);

/* One rollout; writes predicted-vs-realized next-step physical signals
 * and returns per-modality RMSE (model vs persistence baseline) JSON. */
moss_status moss_dump_predictions(const moss_model* m, const char* task,
                                  uint64_t seed, const char* csv_path,
                                  char** out_summary_json);

/* --- benchmark surfaces ----------------------------------------------- */

/* Full ablation grid (resumable); artifacts under out_dir. Returns the
 * CSV path. */
moss_status moss_run_ablations(moss_ctx* ctx, const char* out_dir,
                               char** out_csv_path);

/* Physical-loss weight sweep on the grasp task; returns the CSV path. */
moss_status moss_sweep_lambda(moss_ctx* ctx, const char* out_dir,
                              char** out_csv_path);

/* Median per-chunk sampling latency for the four stream configurations;
 * writes csv_path and returns the table as JSON. */
moss_status moss_measure_latency(moss_ctx* ctx, const char* csv_path,
                                 char** out_table_json);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* MOSS_C_H */

#ifndef DRIFTCFL_H
#define DRIFTCFL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define DCFL_METRIC_L1 0

#define DCFL_METRIC_JENSEN_SHANNON 1

#define DCFL_METRIC_SQUARED_EUCLIDEAN 2

typedef enum DcflStatus {
  DCFL_STATUS_OK = 0,
  DCFL_STATUS_NULL_POINTER = 1,
  DCFL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The config or theory parameters failed validation.
   */
  DCFL_STATUS_VALIDATION = 3,
  /**
   * Simulation, clustering or I/O failure.
   */
  DCFL_STATUS_RUNTIME = 4,
  /**
   * The theory checks ran but at least one bound was violated.
   */
  DCFL_STATUS_THEORY_FAILED = 5,
  DCFL_STATUS_PANIC = 6,
} DcflStatus;

/**
 * Opaque simulator handle.
 */
typedef struct DcflEngine DcflEngine;

/**
 * One evaluated training round.
 */
typedef struct DcflRound {
  uint64_t round;
  double mean_accuracy;
  double mean_client_distance;
  double baseline_distance;
  size_t num_clusters;
  bool recluster_triggered;
} DcflRound;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy of the calling thread's last error message, or NULL when the last
 * call succeeded. Free with [`dcfl_string_free`].
 */
char *dcfl_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void dcfl_string_free(char *s);

/**
 * Builds an in-memory engine from TOML config text.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum DcflStatus dcfl_engine_new(const char *config_toml, struct DcflEngine **out);

/**
 * Like [`dcfl_engine_new`] but writes rounds, events and checkpoints
 * under `run_dir`.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be writable.
 */
enum DcflStatus dcfl_engine_new_with_output(const char *config_toml,
                                            const char *run_dir,
                                            struct DcflEngine **out);

/**
 * Reopens a run directory at its latest checkpoint.
 *
 * # Safety
 * `run_dir` must be NUL-terminated; `out` must be writable.
 */
enum DcflStatus dcfl_engine_resume(const char *run_dir, struct DcflEngine **out);

/**
 * # Safety
 * `engine` must be NULL or a handle from this library, not yet freed.
 */
void dcfl_engine_free(struct DcflEngine *engine);

/**
 * Advances one round. `*has_round` is false once the run is finished, in
 * which case `*out` is left untouched.
 *
 * # Safety
 * `engine` must be a live handle; `out` and `has_round` must be writable.
 */
enum DcflStatus dcfl_engine_step_round(struct DcflEngine *engine,
                                       struct DcflRound *out,
                                       bool *has_round);

/**
 * Runs the remaining rounds and reports the final mean accuracy.
 *
 * # Safety
 * `engine` must be a live handle; `final_accuracy` must be writable.
 */
enum DcflStatus dcfl_engine_run(struct DcflEngine *engine, double *final_accuracy);

/**
 * # Safety
 * `engine` must be a live handle; `out` must be writable.
 */
enum DcflStatus dcfl_engine_num_clusters(const struct DcflEngine *engine, size_t *out);

/**
 * Cluster index of `client`; `InvalidArgument` when it is not clustered.
 *
 * # Safety
 * `engine` must be a live handle; `out` must be writable.
 */
enum DcflStatus dcfl_engine_cluster_of(const struct DcflEngine *engine,
                                       uint32_t client,
                                       size_t *out);

/**
 * Number of parameters of every cluster model.
 *
 * # Safety
 * `engine` must be a live handle; `out` must be writable.
 */
enum DcflStatus dcfl_engine_model_dim(const struct DcflEngine *engine, size_t *out);

/**
 * Copies cluster `k`'s parameters into `buf`, which holds `len` doubles
 * and must be exactly the model dimension.
 *
 * # Safety
 * `engine` must be a live handle; `buf` must point to `len` writable doubles.
 */
enum DcflStatus dcfl_engine_copy_model(const struct DcflEngine *engine,
                                       size_t k,
                                       double *buf,
                                       size_t len);

/**
 * Distance between two vectors of length `len` under a `DCFL_METRIC_*`.
 *
 * # Safety
 * `a` and `b` must point to `len` doubles; `out` must be writable.
 */
enum DcflStatus dcfl_distance(const double *a,
                              const double *b,
                              size_t len,
                              uint32_t metric,
                              double *out);

/**
 * Normalized label histogram of `n` labels into `out` (`num_labels`
 * doubles). An empty input gives all zeros.
 *
 * # Safety
 * `labels` must point to `n` values (may be NULL when `n` is 0); `out`
 * must point to `num_labels` writable doubles.
 */
enum DcflStatus dcfl_label_histogram(const uint32_t *labels,
                                     size_t n,
                                     size_t num_labels,
                                     double *out);

/**
 * Silhouette-selected k-means over `n` row-major points of `dim` values.
 * Writes one cluster label per point and the chosen K.
 *
 * # Safety
 * `points` must hold `n * dim` doubles, `labels_out` `n` writable slots.
 */
enum DcflStatus dcfl_choose_k(const double *points,
                              size_t n,
                              size_t dim,
                              uint32_t metric,
                              size_t k_min,
                              size_t k_max,
                              uint64_t seed,
                              size_t *labels_out,
                              size_t *k_out);

/**
 * Runs the convergence checks. `params_toml` may be NULL for defaults.
 * The JSON report is written to `*report_json` whenever the checks ran,
 * including when they fail with `TheoryFailed`.
 *
 * # Safety
 * `params_toml` must be NULL or NUL-terminated; `report_json` writable.
 */
enum DcflStatus dcfl_verify_theory(const char *params_toml, char **report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRIFTCFL_H */

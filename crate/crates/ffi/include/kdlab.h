#ifndef KDLAB_H
#define KDLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KdlabStatus {
  KDLAB_STATUS_OK = 0,
  KDLAB_STATUS_NULL_POINTER = 1,
  KDLAB_STATUS_INVALID_ARGUMENT = 2,
  KDLAB_STATUS_SHAPE = 3,
  KDLAB_STATUS_DOMAIN = 4,
  KDLAB_STATUS_IO = 5,
  KDLAB_STATUS_FORMAT = 6,
  KDLAB_STATUS_CONFIG = 7,
  KDLAB_STATUS_VERIFICATION_FAILED = 8,
  KDLAB_STATUS_DEGENERATE = 9,
  KDLAB_STATUS_PANIC = 10,
} KdlabStatus;

/**
 * Opaque dataset handle.
 */
typedef struct KdlabDataset KdlabDataset;

/**
 * Opaque multi-head network handle.
 */
typedef struct KdlabModel KdlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Release with
 * `kdlab_string_free`.
 */
char *kdlab_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void kdlab_string_free(char *s);

/**
 * Runs the theory checks. `out_json` receives the reports as a JSON array,
 * `out_passed` whether all of them passed.
 *
 * # Safety
 * Output pointers must be valid for writes.
 */
enum KdlabStatus kdlab_verify(uint64_t seed, char **out_json, bool *out_passed);

/**
 * Gaussian-blob dataset with `classes × n_per_class` items.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum KdlabStatus kdlab_dataset_blobs(size_t classes,
                                     size_t dim,
                                     size_t n_per_class,
                                     double separation,
                                     uint64_t seed,
                                     struct KdlabDataset **out);

/**
 * Loads an uncompressed IDX image/label pair with pixels scaled to [0, 1].
 *
 * # Safety
 * Paths must be nul-terminated; `out` must be valid for writes.
 */
enum KdlabStatus kdlab_dataset_load_idx(const char *images,
                                        const char *labels,
                                        struct KdlabDataset **out);

/**
 * Number of items; 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t kdlab_dataset_len(const struct KdlabDataset *ds);

/**
 * Feature dimension; 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t kdlab_dataset_dim(const struct KdlabDataset *ds);

/**
 * Class count; 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t kdlab_dataset_classes(const struct KdlabDataset *ds);

/**
 * Copies the row-major features (`len × dim`) and labels (`len`).
 * Either output may be null to skip it.
 *
 * # Safety
 * Non-null outputs must hold the stated number of elements.
 */
enum KdlabStatus kdlab_dataset_copy(const struct KdlabDataset *ds,
                                    double *out_features,
                                    size_t *out_labels);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void kdlab_dataset_free(struct KdlabDataset *ds);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be nul-terminated; `out` must be valid for writes.
 */
enum KdlabStatus kdlab_model_load(const char *path, struct KdlabModel **out);

/**
 * Writes a model checkpoint atomically.
 *
 * # Safety
 * `model` must be a live handle and `path` nul-terminated.
 */
enum KdlabStatus kdlab_model_save(const struct KdlabModel *model, const char *path);

/**
 * Input dimension; 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t kdlab_model_input_dim(const struct KdlabModel *model);

/**
 * Number of output heads; 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t kdlab_model_num_heads(const struct KdlabModel *model);

/**
 * Argmax class of `head` for each of `rows` row-major inputs of width
 * `cols`.
 *
 * # Safety
 * `x` must hold `rows × cols` values and `out_labels` `rows` slots.
 */
enum KdlabStatus kdlab_model_predict(const struct KdlabModel *model,
                                     const double *x,
                                     size_t rows,
                                     size_t cols,
                                     size_t head,
                                     size_t *out_labels);

/**
 * Accuracy of `head` on a dataset.
 *
 * # Safety
 * Handles must be live; `out` valid for writes.
 */
enum KdlabStatus kdlab_model_accuracy(const struct KdlabModel *model,
                                      const struct KdlabDataset *ds,
                                      size_t head,
                                      double *out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void kdlab_model_free(struct KdlabModel *model);

/**
 * Batch-mean `KL(p_t ‖ p_s)` over `rows` probability rows of width `k`.
 *
 * # Safety
 * Inputs must hold `rows × k` values; `out` valid for writes.
 */
enum KdlabStatus kdlab_kl_divergence(const double *p_t,
                                     const double *p_s,
                                     size_t rows,
                                     size_t k,
                                     double *out);

/**
 * Recovered performance ratio `(acc_kd − base)/(acc_teacher − base)`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum KdlabStatus kdlab_rpr(double acc_kd, double base, double acc_teacher, double *out);

/**
 * Standardizes a weight diagonal in place (mean 1, unit spread) and
 * clamps negatives to zero. `out_clamp_fraction` may be null.
 *
 * # Safety
 * `w` must hold `len` values.
 */
enum KdlabStatus kdlab_normalize_weight_diag(double *w, size_t len, double *out_clamp_fraction);

/**
 * Runs an experiment subcommand: `train-teacher`, `distill` (arg = variant),
 * `sweep-width`, `incremental` (arg = method) with a config path, or
 * `report` (arg = results directory, config may be null). The summary is
 * returned as JSON in `out_json`.
 *
 * # Safety
 * String arguments must be null or nul-terminated; `out_json` valid for
 * writes.
 */
enum KdlabStatus kdlab_run_experiment(const char *command,
                                      const char *config_path,
                                      const char *arg,
                                      char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDLAB_H */

#ifndef KDMTL_H
#define KDMTL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bytes needed for a dataset hash: 64 hex digits and a terminating NUL.
 */
#define KD_HASH_LEN 65

/**
 * Iteration cap of [`kd_min_norm`].
 */
#define KD_MIN_NORM_MAX_ITER 1000

typedef enum KdStatus {
  KD_STATUS_OK = 0,
  /**
   * A required pointer was NULL.
   */
  KD_STATUS_NULL = 1,
  KD_STATUS_INVALID_ARGUMENT = 2,
  KD_STATUS_IO = 3,
  /**
   * Malformed dataset or checkpoint file.
   */
  KD_STATUS_FORMAT = 4,
  KD_STATUS_SHAPE = 5,
  /**
   * A feature with (near) zero norm reached the distillation loss.
   */
  KD_STATUS_DEGENERATE = 6,
  KD_STATUS_DIVERGENCE = 7,
  KD_STATUS_CONFIG = 8,
  /**
   * A bug: an unexpected panic or error.
   */
  KD_STATUS_INTERNAL = 9,
} KdStatus;

/**
 * Dataset handle.
 */
typedef struct KdDataset KdDataset;

/**
 * Model checkpoint handle.
 */
typedef struct KdModel KdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful one. Valid until the next call on the same thread.
 */
const char *kd_last_error_message(void);

/**
 * Generates the scale-clash dataset with default noise and scale.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum KdStatus kd_scale_clash_generate(size_t n, size_t d, uint64_t seed, struct KdDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum KdStatus kd_dataset_load(const char *path, struct KdDataset **out);

/**
 * # Safety
 * `ds` must be a live handle; `path` a NUL-terminated string.
 */
enum KdStatus kd_dataset_save(const struct KdDataset *ds, const char *path);

/**
 * # Safety
 * `ds` must be a live handle; `out` valid for writes.
 */
enum KdStatus kd_dataset_len(const struct KdDataset *ds, size_t *out);

/**
 * Writes the SHA-256 content hash as NUL-terminated hex into `buf`, which
 * must hold at least [`KD_HASH_LEN`] bytes.
 *
 * # Safety
 * `ds` must be a live handle; `buf` valid for `len` bytes.
 */
enum KdStatus kd_dataset_hash(const struct KdDataset *ds, char *buf, size_t len);

/**
 * Releases a dataset. NULL is ignored.
 *
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void kd_dataset_free(struct KdDataset *ds);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for writes.
 */
enum KdStatus kd_model_load(const char *path, struct KdModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void kd_model_free(struct KdModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` valid for writes.
 */
enum KdStatus kd_model_num_params(const struct KdModel *model, size_t *out);

/**
 * Metric of `task` on `ds`: accuracy for classification, mean absolute
 * error for L1 tasks, mean `1 - cos` for cosine tasks.
 *
 * # Safety
 * Handles must be live; `task` a NUL-terminated string; `out` valid for writes.
 */
enum KdStatus kd_model_evaluate(const struct KdModel *model,
                                const struct KdDataset *ds,
                                const char *task,
                                double *out);

/**
 * Distillation loss between `batch` student and teacher feature maps of
 * `features` values each: the batch mean of `||a/|a| - b/|b|||^2`.
 *
 * # Safety
 * `student` and `teacher` must each hold `batch * features` values.
 */
enum KdStatus kd_distill_loss(const double *student,
                              const double *teacher,
                              size_t batch,
                              size_t features,
                              double *out);

/**
 * Minimum-norm point in the convex hull of `tasks` gradients of `dim`
 * values each, stored row by row. Writes the `tasks` simplex weights and,
 * when `objective` is not NULL, the squared norm of the combination.
 *
 * # Safety
 * `grads` must hold `tasks * dim` values and `weights` room for `tasks`.
 */
enum KdStatus kd_min_norm(const double *grads,
                          size_t tasks,
                          size_t dim,
                          double tol,
                          double *weights,
                          double *objective);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDMTL_H */

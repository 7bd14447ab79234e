#ifndef EDGEDOC_H
#define EDGEDOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every exported function.
 */
typedef enum EdgedocStatus {
  EDGEDOC_STATUS_OK = 0,
  EDGEDOC_STATUS_INVALID_ARGUMENT = 1,
  EDGEDOC_STATUS_IO = 2,
  EDGEDOC_STATUS_FORMAT = 3,
  EDGEDOC_STATUS_NUMERIC = 4,
  EDGEDOC_STATUS_CHECKPOINT = 5,
  EDGEDOC_STATUS_ID_MISMATCH = 6,
  EDGEDOC_STATUS_DEGENERATE = 7,
  EDGEDOC_STATUS_INTERNAL = 8,
} EdgedocStatus;

/**
 * Opaque model handle.
 */
typedef struct EdgedocModel EdgedocModel;

typedef struct EdgedocMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1_weighted;
  double roc_auc;
  double mcc;
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
} EdgedocMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *edgedoc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *edgedoc_version(void);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum EdgedocStatus edgedoc_model_load(const char *path, struct EdgedocModel **out);

/**
 * Freshly initialized model; `reduced` selects the small widths.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum EdgedocStatus edgedoc_model_new(uint64_t seed,
                                     bool reduced,
                                     uint32_t height,
                                     uint32_t width,
                                     struct EdgedocModel **out);

/**
 * Writes a model to a checkpoint directory.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum EdgedocStatus edgedoc_model_save(const struct EdgedocModel *model, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void edgedoc_model_free(struct EdgedocModel *model);

/**
 * Expected input height and width.
 *
 * # Safety
 * All pointers must be valid.
 */
enum EdgedocStatus edgedoc_model_input_size(const struct EdgedocModel *model,
                                            uint32_t *height,
                                            uint32_t *width);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * All pointers must be valid.
 */
enum EdgedocStatus edgedoc_model_num_params(const struct EdgedocModel *model, uint64_t *out);

/**
 * Scores one 2×H×W input (green channel, then residual). Writes the attack
 * probability to `score` and H·W mask probabilities to `mask`, which may be
 * NULL when `mask_len` is 0.
 *
 * # Safety
 * `input` must hold `input_len` floats and `mask` `mask_len` floats.
 */
enum EdgedocStatus edgedoc_model_predict(const struct EdgedocModel *model,
                                         const float *input,
                                         size_t input_len,
                                         float *score,
                                         float *mask,
                                         size_t mask_len);

/**
 * Detection metrics with the attack class (label 1) as positive.
 *
 * # Safety
 * `labels` and `scores` must hold `n` elements.
 */
enum EdgedocStatus edgedoc_metrics(const uint8_t *labels,
                                   const float *scores,
                                   size_t n,
                                   float threshold,
                                   struct EdgedocMetrics *out);

/**
 * # Safety
 * `labels` and `scores` must hold `n` elements.
 */
enum EdgedocStatus edgedoc_roc_auc(const uint8_t *labels,
                                   const float *scores,
                                   size_t n,
                                   double *out);

/**
 * Fuses two detectors' outputs for one sample. Either mask may be NULL;
 * when both are given they must hold `mask_len` probabilities and the fused
 * mask is written to `mask_out` (which may then not be NULL).
 *
 * # Safety
 * Non-NULL buffers must hold `mask_len` floats.
 */
enum EdgedocStatus edgedoc_fuse(float score_a,
                                const float *mask_a,
                                float score_b,
                                const float *mask_b,
                                size_t mask_len,
                                float weight,
                                float alpha,
                                float *score_out,
                                float *mask_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDGEDOC_H */

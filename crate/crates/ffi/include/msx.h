#ifndef MSX_H
#define MSX_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bits of [`MsxMetrics::degenerate`]: set when the metric's denominator
 * was zero and the value was reported as 0.
 */
#define MSX_DEGENERATE_PRECISION 1

#define MSX_DEGENERATE_RECALL 2

#define MSX_DEGENERATE_F1 4

#define MSX_DEGENERATE_MCC 8

#define MSX_DEGENERATE_DICE 16

/**
 * Result code of every fallible call.
 */
typedef enum MsxStatus {
  MSX_STATUS_OK = 0,
  MSX_STATUS_NULL_POINTER = 1,
  MSX_STATUS_INVALID_ARGUMENT = 2,
  MSX_STATUS_IO = 3,
  MSX_STATUS_CHECKPOINT = 4,
  MSX_STATUS_DIMENSION = 5,
  MSX_STATUS_NON_FINITE = 6,
  MSX_STATUS_PANIC = 7,
} MsxStatus;

/**
 * Classification model handle.
 */
typedef struct MsxClsModel MsxClsModel;

/**
 * Segmentation model handle.
 */
typedef struct MsxSegModel MsxSegModel;

typedef struct MsxCounts {
  uint64_t tp;
  uint64_t tn;
  uint64_t fp;
  uint64_t fn_;
} MsxCounts;

typedef struct MsxMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
  double mcc;
  double dice;
  uint32_t degenerate;
} MsxMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t msx_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *msx_version(void);

/**
 * Loads a segmentation checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MsxStatus msx_seg_model_load(const char *path, struct MsxSegModel **out);

/**
 * Input side length of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t msx_seg_model_side(const struct MsxSegModel *model);

/**
 * Predicts binary lung masks: `masks` receives `n * side * side` bytes of 0/1.
 *
 * # Safety
 * `model` must be a live handle, `pixels` readable and `masks` writable
 * for `n * side * side` elements.
 */
enum MsxStatus msx_seg_predict(const struct MsxSegModel *model,
                               const float *pixels,
                               size_t n,
                               size_t side,
                               double threshold,
                               uint8_t *masks);

/**
 * # Safety
 * `model` must be null or a handle from [`msx_seg_model_load`] not yet freed.
 */
void msx_seg_model_free(struct MsxSegModel *model);

/**
 * Loads a classification checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MsxStatus msx_cls_model_load(const char *path, struct MsxClsModel **out);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t msx_cls_model_side(const struct MsxClsModel *model);

/**
 * Positive-class probability per image into `probs` (`n` floats).
 *
 * # Safety
 * `model` must be a live handle, `pixels` readable for `n * side * side`
 * floats and `probs` writable for `n` floats.
 */
enum MsxStatus msx_cls_predict(const struct MsxClsModel *model,
                               const float *pixels,
                               size_t n,
                               size_t side,
                               float *probs);

/**
 * # Safety
 * `model` must be null or a handle from [`msx_cls_model_load`] not yet freed.
 */
void msx_cls_model_free(struct MsxClsModel *model);

/**
 * Confusion counts of two binary sequences of length `len`.
 *
 * # Safety
 * `pred` and `truth` must be readable for `len` bytes; `out` writable.
 */
enum MsxStatus msx_tally(const uint8_t *pred,
                         const uint8_t *truth,
                         size_t len,
                         struct MsxCounts *out);

/**
 * Accuracy, precision, recall, F1, MCC and Dice of `counts`.
 *
 * # Safety
 * `out` must be writable.
 */
enum MsxStatus msx_metric_suite(struct MsxCounts counts, struct MsxMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSX_H */

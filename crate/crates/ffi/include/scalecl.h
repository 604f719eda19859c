#ifndef SCALECL_H
#define SCALECL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SCALECL_STATUS_OK = 0,
  SCALECL_STATUS_NULL_POINTER = 1,
  SCALECL_STATUS_INVALID_ARGUMENT = 2,
  SCALECL_STATUS_SHAPE_MISMATCH = 3,
  SCALECL_STATUS_NO_POSITIVE_PAIRS = 4,
  SCALECL_STATUS_NON_FINITE = 5,
  SCALECL_STATUS_CHECKPOINT = 6,
  SCALECL_STATUS_IO = 7,
  SCALECL_STATUS_PANIC = 8,
  SCALECL_STATUS_INTERNAL = 9,
} ScaleclStatus;

/**
 * A segmentation model restored from a checkpoint.
 */
typedef struct ScaleclModel ScaleclModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or NULL if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *scalecl_last_error(void);

/**
 * Loads a model from a checkpoint file. On success `*out` owns a handle that
 * must be released with [`scalecl_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
ScaleclStatus scalecl_model_load(const char *path, ScaleclModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`scalecl_model_load`] not yet freed.
 */
void scalecl_model_free(ScaleclModel *model);

/**
 * Number of output classes, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t scalecl_model_num_classes(const ScaleclModel *model);

/**
 * Fused logits for `batch x 3 x height x width` images (NCHW, row-major) in
 * evaluation mode. `logits_out` receives `batch x classes x height x width`
 * values; `logits_len` must equal that count.
 *
 * # Safety
 * `images` must hold `batch*3*height*width` doubles and `logits_out`
 * `logits_len` writable doubles.
 */
ScaleclStatus scalecl_model_logits(const ScaleclModel *model,
                                   const double *images,
                                   size_t batch,
                                   size_t height,
                                   size_t width,
                                   double *logits_out,
                                   size_t logits_len);

/**
 * Per-pixel argmax class of the fused logits. `labels_out` receives
 * `batch*height*width` class ids.
 *
 * # Safety
 * `images` must hold `batch*3*height*width` doubles and `labels_out`
 * `labels_len` writable `uint32_t`s.
 */
ScaleclStatus scalecl_model_predict(const ScaleclModel *model,
                                    const double *images,
                                    size_t batch,
                                    size_t height,
                                    size_t width,
                                    uint32_t *labels_out,
                                    size_t labels_len);

/**
 * Supervised InfoNCE over `n` rows of `dim` embeddings with class ids.
 * Rows are L2-normalized first when `normalize` is true. `grad_out` may be
 * NULL; otherwise it receives `n*dim` values of dloss/dembeddings.
 *
 * # Safety
 * `embeddings` must hold `n*dim` doubles, `classes` `n` ids, `loss_out` one
 * writable double and `grad_out`, when not NULL, `n*dim` writable doubles.
 */
ScaleclStatus scalecl_info_nce(const double *embeddings,
                               const uint32_t *classes,
                               size_t n,
                               size_t dim,
                               double tau,
                               bool normalize,
                               double *loss_out,
                               double *grad_out);

/**
 * Majority-vote downsampling of a `batch x height x width` label map by
 * `stride`, ignoring `ignore_index`. `out` receives
 * `batch*(height/stride)*(width/stride)` labels.
 *
 * # Safety
 * `labels` must hold `batch*height*width` ids and `out` `out_len` writable ids.
 */
ScaleclStatus scalecl_downsample_labels(const uint32_t *labels,
                                        size_t batch,
                                        size_t height,
                                        size_t width,
                                        uint32_t ignore_index,
                                        size_t stride,
                                        uint32_t *out,
                                        size_t out_len);

/**
 * Mean IoU of `len` predicted labels against ground truth. Pixels where
 * either label equals `ignore_index` are skipped. `per_class_out`, when not
 * NULL, receives `n_classes` IoUs with NaN for classes absent from both.
 * `*miou_out` is NaN when no class is present.
 *
 * # Safety
 * `pred` and `gt` must hold `len` ids; `miou_out` must be writable and
 * `per_class_out`, when not NULL, hold `n_classes` writable doubles.
 */
ScaleclStatus scalecl_miou(const uint32_t *pred,
                           const uint32_t *gt,
                           size_t len,
                           size_t n_classes,
                           uint32_t ignore_index,
                           double *miou_out,
                           double *per_class_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCALECL_H */

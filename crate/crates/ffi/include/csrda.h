#ifndef CSRDA_H
#define CSRDA_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum CsrdaStatus {
  CSRDA_STATUS_OK = 0,
  CSRDA_STATUS_NULL_POINTER = 1,
  CSRDA_STATUS_INVALID_ARGUMENT = 2,
  CSRDA_STATUS_SHAPE_MISMATCH = 3,
  CSRDA_STATUS_IO = 4,
  CSRDA_STATUS_CHECKPOINT = 5,
  CSRDA_STATUS_CONFIG = 6,
  CSRDA_STATUS_NON_FINITE = 7,
  CSRDA_STATUS_INTERNAL = 8,
  CSRDA_STATUS_PANIC = 9,
} CsrdaStatus;

/**
 * Opaque model: a U-Net and one parameter set.
 */
typedef struct CsrdaModel CsrdaModel;

/**
 * Metrics of one image. Mirrors the library's per-image report.
 */
typedef struct CsrdaMetrics {
  double s_alpha;
  double f_beta_w;
  double e_ad;
  double e_mn;
  double e_mx;
  double f_ad;
  double f_mn;
  double f_mx;
  double mae;
} CsrdaMetrics;

/**
 * Loss values of the edge-aware saliency-weighted consistency.
 */
typedef struct CsrdaEsLoss {
  double ea;
  double sw;
  double es;
} CsrdaEsLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's most recent failure; empty if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *csrda_last_error(void);

/**
 * Freshly initialized model.
 *
 * # Safety
 * `widths` must point to `n_widths` values; `out` must be writable.
 */
enum CsrdaStatus csrda_model_new(uintptr_t in_channels,
                                 const uintptr_t *widths,
                                 uintptr_t n_widths,
                                 uintptr_t gn_groups,
                                 uint64_t seed,
                                 struct CsrdaModel **out);

/**
 * Model from a checkpoint file: the teacher when `use_student` is 0, else
 * the student.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum CsrdaStatus csrda_model_load(const char *path, int32_t use_student, struct CsrdaModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void csrda_model_free(struct CsrdaModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CsrdaStatus csrda_model_param_count(const struct CsrdaModel *model, uintptr_t *out);

/**
 * Foreground probabilities for one image.
 *
 * # Safety
 * `image` must hold `3·height·width` values and `probabilities`
 * `height·width` writable values.
 */
enum CsrdaStatus csrda_model_predict(const struct CsrdaModel *model,
                                     const float *image,
                                     uintptr_t height,
                                     uintptr_t width,
                                     float *probabilities);

/**
 * `teacher ← λ·teacher + (1−λ)·student`, in place. Both handles must share
 * one architecture.
 *
 * # Safety
 * Both handles must be live and distinct.
 */
enum CsrdaStatus csrda_ema_update(struct CsrdaModel *teacher,
                                  const struct CsrdaModel *student,
                                  double lambda);

/**
 * Full metric suite for one prediction. `gt` is binarized at 0.5.
 *
 * # Safety
 * `pred` and `gt` must hold `height·width` values; `out` must be writable.
 */
enum CsrdaStatus csrda_evaluate(const double *pred,
                                const double *gt,
                                uintptr_t height,
                                uintptr_t width,
                                struct CsrdaMetrics *out);

/**
 * Consistency loss between a student and a teacher probability map.
 * `grad` may be null; otherwise it receives `∂es/∂student`.
 *
 * # Safety
 * `student` and `teacher` must hold `height·width` values, as must `grad`
 * when non-null; `out` must be writable.
 */
enum CsrdaStatus csrda_es_loss(const double *student,
                               const double *teacher,
                               uintptr_t height,
                               uintptr_t width,
                               double alpha,
                               double beta,
                               double delta,
                               struct CsrdaEsLoss *out,
                               double *grad);

/**
 * Small-loss selection: `keep[i] = 1` iff `scores[i] ≤ mu · mean(scores)`.
 * `threshold` may be null.
 *
 * # Safety
 * `scores` must hold `n` values and `keep` `n` writable bytes.
 */
enum CsrdaStatus csrda_cls_select(const double *scores,
                                  uintptr_t n,
                                  double mu,
                                  uint8_t *keep,
                                  double *threshold);

/**
 * Pixel filter of a pseudo label: values below `tau` become 0. Writes the
 * filtered map and, through `keep_sample`, whether the sample survives
 * (surviving pixels exist and average at least `tau`).
 *
 * # Safety
 * `probabilities` and `filtered` must hold `n` values; `keep_sample` must be
 * writable.
 */
enum CsrdaStatus csrda_cls_filter(const float *probabilities,
                                  uintptr_t n,
                                  double tau,
                                  float *filtered,
                                  uint8_t *keep_sample);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSRDA_H */

#ifndef INFOCONS_H
#define INFOCONS_H

/* Generated by cbindgen from infocons-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum infocons_status {
  INFOCONS_STATUS_OK = 0,
  INFOCONS_STATUS_NULL_ARGUMENT = 1,
  INFOCONS_STATUS_INVALID_ARGUMENT = 2,
  INFOCONS_STATUS_IO_ERROR = 3,
  INFOCONS_STATUS_NUMERIC_ERROR = 4,
  INFOCONS_STATUS_PANIC = 5,
} infocons_status;

// Opaque trained explainer handle.
typedef struct infocons_explainer infocons_explainer;

// Opaque trained classifier handle.
typedef struct infocons_model infocons_model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread. The pointer
// stays valid until the next failing call on the same thread; never free
// it.
const char *infocons_last_error(void);

// Library version as a static string; never free it.
const char *infocons_version(void);

// Load a model checkpoint written by the `train` command.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer; the
// returned handle must be released with [`infocons_model_free`].
enum infocons_status infocons_model_load(const char *path, struct infocons_model **out);

// Release a model handle. Null is a no-op.
//
// # Safety
// `model` must have come from [`infocons_model_load`] and not been freed.
void infocons_model_free(struct infocons_model *model);

// Number of classes the model predicts.
//
// # Safety
// `model` must be a live handle (null returns 0).
size_t infocons_model_classes(const struct infocons_model *model);

// Smallest cloud the model accepts.
//
// # Safety
// `model` must be a live handle (null returns 0).
size_t infocons_model_min_points(const struct infocons_model *model);

// Class probabilities for a cloud. `probs_out` receives
// `infocons_model_classes` doubles.
//
// # Safety
// `xyz` must hold `3 * n_points` doubles; `probs_out` must hold
// `probs_len` doubles; `model` must be a live handle.
enum infocons_status infocons_model_classify(const struct infocons_model *model,
                                             const double *xyz,
                                             size_t n_points,
                                             double *probs_out,
                                             size_t probs_len);

// Load an explainer checkpoint written by the `train-explainer` command.
//
// # Safety
// As for [`infocons_model_load`]; release with
// [`infocons_explainer_free`].
enum infocons_status infocons_explainer_load(const char *path, struct infocons_explainer **out);

// Release an explainer handle. Null is a no-op.
//
// # Safety
// `explainer` must have come from [`infocons_explainer_load`] and not been
// freed.
void infocons_explainer_free(struct infocons_explainer *explainer);

// Learned parameter count of the explainer.
//
// # Safety
// `explainer` must be a live handle (null returns 0).
size_t infocons_explainer_param_count(const struct infocons_explainer *explainer);

// One-pass critical-score map: writes one score in [0, 1] per point into
// `scores_out`.
//
// # Safety
// `xyz` must hold `3 * n_points` doubles and `scores_out` `n_points`
// doubles; both handles must be live.
enum infocons_status infocons_score_map(const struct infocons_model *model,
                                        const struct infocons_explainer *explainer,
                                        const double *xyz,
                                        size_t n_points,
                                        double *scores_out);

// Iterated explain-then-drop score map (`iters` passes dropping
// `drop_per_iter` points each).
//
// # Safety
// As for [`infocons_score_map`].
enum infocons_status infocons_score_map_dynamic(const struct infocons_model *model,
                                                const struct infocons_explainer *explainer,
                                                const double *xyz,
                                                size_t n_points,
                                                size_t iters,
                                                size_t drop_per_iter,
                                                double *scores_out);

// Critical subset from the final max pooling: writes up to `cap` point
// indices and stores the true subset size in `len_out` (call with
// `cap = 0` to query the size first; indices arrive in ascending order).
//
// # Safety
// `idx_out` must hold `cap` entries when `cap > 0`; `len_out` must be a
// valid pointer; `model` must be a live handle.
enum infocons_status infocons_critical_subset(const struct infocons_model *model,
                                              const double *xyz,
                                              size_t n_points,
                                              size_t *idx_out,
                                              size_t cap,
                                              size_t *len_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFOCONS_H */

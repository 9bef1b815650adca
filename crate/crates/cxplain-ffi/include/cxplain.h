/* C interface for the cxplain explanation engine. */

#ifndef CXPLAIN_H
#define CXPLAIN_H

/* Generated by cbindgen from crates/cxplain-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result status of every fallible call.
typedef enum {
  // Success.
  CX_OK = 0,
  // Bad arguments: null pointers, shape mismatches, unreadable files.
  CX_INVALID_INPUT = 2,
  // Numeric failure in the model or training.
  CX_NUMERIC = 3,
  // The operation produced nothing to report.
  CX_EMPTY = 4,
  // An internal invariant broke; the library state is still consistent.
  CX_PANIC = 5,
} cx_status;

// Prediction error measure used when scoring masked inputs.
typedef enum {
  CX_LOSS_MEAN_SQUARED_ERROR = 0,
  CX_LOSS_CATEGORICAL_CROSSENTROPY = 1,
  CX_LOSS_BINARY_CROSSENTROPY = 2,
} cx_loss;

// Replacement values used when a feature group is masked out.
typedef enum {
  // Masked features become zero.
  CX_MASKING_ZERO = 0,
  // Masked features become their per-column mean over `x`.
  CX_MASKING_DATASET_MEAN = 1,
} cx_masking;

// Treatment of groups whose masking decreases the prediction error.
typedef enum {
  // Clip to zero: a group only earns importance by hurting the model.
  CX_NEGATIVE_DELTA_FLOOR = 0,
  // Use the magnitude: any effect on the error counts as importance.
  CX_NEGATIVE_DELTA_ABS = 1,
} cx_negative_delta;

// Opaque handle to a bootstrap ensemble of explainers.
typedef struct cx_ensemble cx_ensemble;

// Opaque handle to a trained explainer.
typedef struct cx_explainer cx_explainer;

// Batch prediction callback for a caller-owned model.
//
// `x` is row-major `n_rows x n_cols`; the callback must write
// `n_rows * output_dim` doubles to `out` (the `output_dim` passed to
// `cx_precompute_targets`) and return zero. A non-zero return aborts the
// sweep and surfaces as `CX_NUMERIC`. Calls arrive strictly sequentially
// on the thread that invoked the engine, so the callback needs no locking.
typedef int32_t (*cx_predict_fn)(void *user_data,
                                 const double *x,
                                 size_t n_rows,
                                 size_t n_cols,
                                 double *out);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Description of the most recent failure on this thread.
//
// The pointer stays valid until the next failing call on the same thread.
// Returns an empty string when no call has failed yet.
const char *cx_last_error_message(void);

// Loads an explainer saved by the engine (a JSON model file).
//
// On success writes a handle to `out`; release it with `cx_explainer_free`.
cx_status cx_explainer_load(const char *path, cx_explainer **out);

// Releases an explainer handle. Passing null is a no-op. The handle must
// not be used after this call.
void cx_explainer_free(cx_explainer *handle);

// Width of the feature vectors the explainer accepts.
cx_status cx_explainer_input_dim(const cx_explainer *handle, size_t *out);

// Number of feature groups in each attribution row.
cx_status cx_explainer_num_groups(const cx_explainer *handle, size_t *out);

// Attributes a batch of inputs.
//
// `x` is row-major `n_rows x n_cols` with `n_cols` equal to the explainer's
// input width and `n_rows >= 1`. `out` must hold `n_rows * num_groups`
// doubles; each written row is a non-negative importance distribution
// summing to one.
cx_status cx_explainer_explain(const cx_explainer *handle,
                               const double *x,
                               size_t n_rows,
                               size_t n_cols,
                               double *out);

// Loads an ensemble directory saved by the engine.
//
// On success writes a handle to `out`; release it with `cx_ensemble_free`.
cx_status cx_ensemble_load(const char *dir, cx_ensemble **out);

// Releases an ensemble handle. Passing null is a no-op.
void cx_ensemble_free(cx_ensemble *handle);

// Number of member explainers in the ensemble.
cx_status cx_ensemble_num_members(const cx_ensemble *handle, size_t *out);

// Width of the feature vectors the ensemble accepts.
cx_status cx_ensemble_input_dim(const cx_ensemble *handle, size_t *out);

// Number of feature groups in each attribution row.
cx_status cx_ensemble_num_groups(const cx_ensemble *handle, size_t *out);

// Attributes one input with per-group uncertainty.
//
// `x_row` has `n_cols` doubles matching the ensemble's input width, and
// `gamma` in (0, 1) is the central confidence mass. `median`, `lower`, and
// `upper` each receive `num_groups` doubles; any of them may be null to
// skip that output.
cx_status cx_ensemble_attribute(const cx_ensemble *handle,
                                const double *x_row,
                                size_t n_cols,
                                double gamma,
                                double *median,
                                double *lower,
                                double *upper);

// Computes per-feature importance targets by masked re-evaluation.
//
// `x` is row-major `n_rows x n_cols` (`n_rows >= 1`, `n_cols >= 1`) and
// `y` is row-major `n_rows x y_cols` holding the labels the loss compares
// against; `output_dim` is the width of each prediction row and must equal
// `y_cols`. Each feature forms its own group, masked by `masking`. The
// callback is invoked with batches of `n_cols + 1` rows, once per input
// row, for exactly `n_rows * (n_cols + 1)` sample evaluations.
//
// `omega_out` must hold `n_rows * n_cols` doubles and receives one
// importance distribution per input row. `evaluations_out`, if non-null,
// receives the total sample-evaluation count.
cx_status cx_precompute_targets(cx_predict_fn predict,
                                void *user_data,
                                size_t output_dim,
                                const double *x,
                                size_t n_rows,
                                size_t n_cols,
                                const double *y,
                                size_t y_cols,
                                cx_loss loss,
                                cx_masking masking,
                                cx_negative_delta negative_delta,
                                double *omega_out,
                                uint64_t *evaluations_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CXPLAIN_H */

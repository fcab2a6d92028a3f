#ifndef LRVB_H
#define LRVB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Outcome of a call. Values other than `Ok` match the library's error
 kinds one to one, plus three that only arise at the boundary.
 */
typedef enum LrvbStatus {
  LRVB_STATUS_OK = 0,
  LRVB_STATUS_DOMAIN_ERROR = 1,
  LRVB_STATUS_DIMENSION_MISMATCH = 2,
  LRVB_STATUS_NON_CONVERGENCE = 3,
  LRVB_STATUS_DOMAIN_VIOLATION = 4,
  LRVB_STATUS_SINGULAR_SYSTEM = 5,
  LRVB_STATUS_NON_DIFFERENTIABLE_PRIOR = 6,
  LRVB_STATUS_QUADRATURE_FAILURE = 7,
  LRVB_STATUS_ZERO_PRIOR_DENSITY = 8,
  LRVB_STATUS_NORMALIZATION_FAILURE = 9,
  LRVB_STATUS_NOT_CONJUGATE = 10,
  LRVB_STATUS_DEGENERATE_CHAIN = 11,
  LRVB_STATUS_NOT_FACTORIZED = 12,
  LRVB_STATUS_ZERO_VARIANCE = 13,
  LRVB_STATUS_UNKNOWN_HYPERPARAMETER = 14,
  LRVB_STATUS_INVALID_INPUT = 15,
  LRVB_STATUS_IO_ERROR = 16,
  /*
   A required pointer argument was null.
   */
  LRVB_STATUS_NULL_POINTER = 100,
  /*
   An output buffer was shorter than required; nothing was written.
   */
  LRVB_STATUS_BUFFER_TOO_SMALL = 101,
  LRVB_STATUS_PANIC = 102,
} LrvbStatus;

/*
 A converged fit together with its linear response system. Holds its own
 copy of the model, so later hyperparameter changes do not affect it.
 */
typedef struct LrvbFit LrvbFit;

/*
 A model with its data and current hyperparameters.
 */
typedef struct LrvbModel LrvbModel;

/*
 Scalar diagnostics of a fit.
 */
typedef struct LrvbFitSummary {
  double elbo;
  double grad_norm;
  size_t iterations;
  /*
   Condition number of `I - V H`.
   */
  double condition;
} LrvbFitSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Normal observations with known noise variance and a normal prior on the
 mean.

 # Safety
 `data` points to `n` doubles (may be null when `n == 0`); `out` is
 writable.
 */
enum LrvbStatus lrvb_model_normal_normal(const double *data,
                                         size_t n,
                                         double noise_var,
                                         double prior_mean,
                                         double prior_var,
                                         struct LrvbModel **out);

/*
 Normal observations with a normal-inverse-gamma prior, hyperparameters
 `mu0 = 0, kappa0 = 1, a0 = 2, b0 = 1`.

 # Safety
 `data` points to `n` doubles; `out` is writable.
 */
enum LrvbStatus lrvb_model_normal_inverse_gamma(const double *data,
                                                size_t n,
                                                struct LrvbModel **out);

/*
 Hierarchical treatment-effect model at the default priors. Row `i` has
 site index `site[i]`, treatment flag `treatment[i]` (0 or 1) and outcome
 `outcome[i]`; site indices must cover `0..K` with `K >= 2`.

 # Safety
 The three arrays hold `n` elements each; `out` is writable.
 */
enum LrvbStatus lrvb_model_microcredit(const uint32_t *site,
                                       const uint8_t *treatment,
                                       const double *outcome,
                                       size_t n,
                                       struct LrvbModel **out);

/*
 Same model read from a `site,treatment,outcome` CSV file.

 # Safety
 `path` is a NUL-terminated UTF-8 string; `out` is writable.
 */
enum LrvbStatus lrvb_model_microcredit_csv(const char *path, struct LrvbModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` came from a `lrvb_model_*` constructor and is not used again.
 */
void lrvb_model_free(struct LrvbModel *model);

/*
 Sets one hyperparameter by name, validating the full set.

 # Safety
 `model` is a live handle; `name` is NUL-terminated.
 */
enum LrvbStatus lrvb_model_set_hyperparameter(struct LrvbModel *model,
                                              const char *name,
                                              double value);

/*
 Reads one hyperparameter by name.

 # Safety
 `model` is a live handle; `name` is NUL-terminated; `out` is writable.
 */
enum LrvbStatus lrvb_model_hyperparameter(const struct LrvbModel *model,
                                          const char *name,
                                          double *out);

/*
 Number of tracked scalar quantities.

 # Safety
 `model` is a live handle; `out` is writable.
 */
enum LrvbStatus lrvb_model_num_quantities(const struct LrvbModel *model, size_t *out);

/*
 Copies the name of quantity `index` as a NUL-terminated string. The
 required size including the terminator is stored in `needed` (if
 non-null) whether or not `buf` is large enough.

 # Safety
 `model` is a live handle; `buf` holds `len` bytes.
 */
enum LrvbStatus lrvb_model_quantity_name(const struct LrvbModel *model,
                                         size_t index,
                                         char *buf,
                                         size_t len,
                                         size_t *needed);

/*
 Fits the mean-field approximation and builds the linear response
 system. `tol <= 0` and `max_iter == 0` select the defaults.

 # Safety
 `model` is a live handle; `out` is writable.
 */
enum LrvbStatus lrvb_fit(const struct LrvbModel *model,
                         double tol,
                         size_t max_iter,
                         struct LrvbFit **out);

/*
 Releases a fit. Null is ignored.

 # Safety
 `fit` came from `lrvb_fit` and is not used again.
 */
void lrvb_fit_free(struct LrvbFit *fit);

/*
 # Safety
 `fit` is a live handle; `out` is writable.
 */
enum LrvbStatus lrvb_fit_summary(const struct LrvbFit *fit, struct LrvbFitSummary *out);

/*
 Posterior means and mean-field and linear-response standard deviations
 of every quantity, in model order. Any output pointer may be null to
 skip it; non-null ones must hold `len >= number of quantities`.

 # Safety
 `fit` is a live handle; each non-null array holds `len` doubles.
 */
enum LrvbStatus lrvb_fit_quantities(const struct LrvbFit *fit,
                                    double *means,
                                    double *vb_sds,
                                    double *lrvb_sds,
                                    size_t len);

/*
 Derivative of each quantity's posterior mean with respect to one
 hyperparameter.

 # Safety
 `fit` is a live handle; `name` is NUL-terminated; `out` holds `len`
 doubles.
 */
enum LrvbStatus lrvb_fit_sensitivity(const struct LrvbFit *fit,
                                     const char *name,
                                     double *out,
                                     size_t len);

/*
 Influence of a point mass in the prior of `block` on the posterior mean
 of quantity `quantity`, at `n_points` points of dimension `point_dim`
 stored row by row.

 # Safety
 `fit` is a live handle; `points` holds `n_points * point_dim` doubles;
 `out` holds `len` doubles.
 */
enum LrvbStatus lrvb_fit_influence(const struct LrvbFit *fit,
                                   size_t block,
                                   size_t quantity,
                                   const double *points,
                                   size_t n_points,
                                   size_t point_dim,
                                   double *out,
                                   size_t len);

/*
 Copies the message of the last failed call on this thread into `buf`
 (truncated, always NUL-terminated when `len > 0`) and returns the full
 message length plus one. Returns 1 (an empty message) after a success.

 # Safety
 `buf` holds `len` bytes or is null with `len == 0`.
 */
size_t lrvb_last_error_message(char *buf, size_t len);

/*
 Static NUL-terminated name of a status code.
 */
const char *lrvb_status_name(enum LrvbStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LRVB_H */

#ifndef DREG_LAB_H
#define DREG_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DregStatus {
  DREG_STATUS_OK = 0,
  DREG_STATUS_NULL_POINTER = 1,
  DREG_STATUS_INVALID_ARGUMENT = 2,
  DREG_STATUS_NUMERICAL = 3,
  DREG_STATUS_BUFFER_TOO_SMALL = 4,
  DREG_STATUS_PANIC = 5,
} DregStatus;

/**
 * Linear-Gaussian model with fixed parameters.
 */
typedef struct DregToy DregToy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated, into
 * `buf`. Returns the message length in bytes excluding the terminator;
 * when that is `>= len` the message was truncated.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t dreg_last_error_message(char *buf, size_t len);

/**
 * Static NUL-terminated version string.
 */
const char *dreg_version(void);

/**
 * Builds a `dim`-dimensional model at the optimal inference network for
 * `theta`, with Gaussian noise of standard deviation `perturbation` added
 * to every parameter from stream `seed`. `q_variance <= 0` selects the
 * default inference variance.
 *
 * # Safety
 * `theta` must point to `dim` values and `out` to a writable pointer.
 */
enum DregStatus dreg_toy_new(size_t dim,
                             double q_variance,
                             const double *theta,
                             double perturbation,
                             uint64_t seed,
                             struct DregToy **out);

/**
 * # Safety
 * `handle` must be null or come from [`dreg_toy_new`] and not be used
 * afterwards.
 */
void dreg_toy_free(struct DregToy *handle);

/**
 * Number of inference-network coordinates, the length of every gradient
 * written by [`dreg_toy_estimate`]. Zero for a null handle.
 *
 * # Safety
 * `handle` must be null or valid.
 */
size_t dreg_toy_num_phi(const struct DregToy *handle);

/**
 * One inference-network gradient draw of the named estimator (for
 * example `"iwae-dreg"`) with `k` samples taken from batch `draw` of
 * stream `seed`. `alpha` is read only for `"dreg-alpha"`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `name` must be
 * NUL-terminated.
 */
enum DregStatus dreg_toy_estimate(const struct DregToy *handle,
                                  const char *name,
                                  double alpha,
                                  const double *x,
                                  size_t x_len,
                                  size_t k,
                                  uint64_t seed,
                                  uint64_t draw,
                                  double *out,
                                  size_t out_len);

/**
 * Exact `log p(x)` of the model.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum DregStatus dreg_toy_log_marginal(const struct DregToy *handle,
                                      const double *x,
                                      size_t x_len,
                                      double *out);

/**
 * Two-sided paired t-test of `a` against `b`.
 *
 * # Safety
 * `a` and `b` must point to `n` values; outputs must be writable.
 */
enum DregStatus dreg_paired_t_test(const double *a,
                                   const double *b,
                                   size_t n,
                                   double *out_t,
                                   double *out_p);

/**
 * Least-squares slope of `ln(stat)` against `ln(k)`.
 *
 * # Safety
 * `k` and `stat` must point to `n` values; `out` must be writable.
 */
enum DregStatus dreg_loglog_slope(const double *k, const double *stat, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DREG_LAB_H */

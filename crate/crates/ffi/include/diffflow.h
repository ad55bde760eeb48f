#ifndef DIFFFLOW_H
#define DIFFFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; the non-zero values other than `NullPointer`, `Panic` and
 * `BufferSize` match the CLI exit codes.
 */
typedef enum DfStatus {
  DF_STATUS_OK = 0,
  DF_STATUS_NULL_POINTER = 1,
  DF_STATUS_USAGE = 2,
  DF_STATUS_NUMERIC = 3,
  DF_STATUS_IO = 4,
  DF_STATUS_BUFFER_SIZE = 5,
  DF_STATUS_PANIC = 6,
} DfStatus;

/**
 * Opaque trained model.
 */
typedef struct DfModel DfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *df_last_error(void);

/**
 * Static NUL-terminated version string.
 */
const char *df_version(void);

/**
 * Loads a training checkpoint. `use_ema != 0` selects the averaged parameters.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DfStatus df_model_load(const char *path, int32_t use_ema, struct DfModel **out);

/**
 * Releases a handle from [`df_model_load`]; NULL is ignored.
 *
 * # Safety
 * `model` must come from [`df_model_load`] and not be used afterwards.
 */
void df_model_free(struct DfModel *model);

/**
 * Data dimension of the model, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t df_model_dim(const struct DfModel *model);

/**
 * Training iteration stored in the checkpoint, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint64_t df_model_iteration(const struct DfModel *model);

/**
 * Draws `n` samples into `out` (`n * dim` values). `steps == 0` uses the
 * step count in force at the end of training.
 *
 * # Safety
 * `out` must point to at least `out_len` writable doubles.
 */
enum DfStatus df_sample(const struct DfModel *model,
                        double lambda,
                        size_t steps,
                        size_t n,
                        int32_t denoise,
                        uint64_t seed,
                        double *out,
                        size_t out_len);

/**
 * Exact probability-flow NLL in nats of `rows` points; `out` gets one value
 * per row.
 *
 * # Safety
 * `x` must hold `rows * dim` doubles and `out` at least `rows`.
 */
enum DfStatus df_ode_nll(const struct DfModel *model,
                         const double *x,
                         size_t rows,
                         double atol,
                         double rtol,
                         double *out);

/**
 * Trajectory upper bound on the NLL with `n_mc` trajectories per point on a
 * fixed grid of `steps` steps (0: end-of-training count). Writes the mean and
 * standard error per row.
 *
 * # Safety
 * `x` must hold `rows * dim` doubles; `mean` and `std_err` at least `rows`.
 */
enum DfStatus df_elbo_nll(const struct DfModel *model,
                          const double *x,
                          size_t rows,
                          size_t steps,
                          size_t n_mc,
                          uint64_t seed,
                          double *mean,
                          double *std_err);

/**
 * Adjoint-vs-oracle check on a random instance. `passed` is set to 1 when the
 * oracle error is within tolerance.
 *
 * # Safety
 * The three output pointers must be valid.
 */
enum DfStatus df_gradcheck(size_t dims,
                           size_t steps,
                           uint64_t seed,
                           double *oracle_error,
                           double *fd_error,
                           int32_t *passed);

/**
 * Writes `n` points of the named synthetic dataset into `out` (`2 n` values).
 *
 * # Safety
 * `kind` must be NUL-terminated; `out` must hold `out_len` doubles.
 */
enum DfStatus df_generate_2d(const char *kind,
                             size_t n,
                             uint64_t seed,
                             double *out,
                             size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFFLOW_H */

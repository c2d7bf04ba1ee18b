#ifndef BDIFF_H
#define BDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BdStatus {
  BD_STATUS_OK = 0,
  BD_STATUS_NULL_POINTER = 1,
  BD_STATUS_INVALID_ARGUMENT = 2,
  BD_STATUS_SHAPE = 3,
  BD_STATUS_IO = 4,
  BD_STATUS_FORMAT = 5,
  BD_STATUS_NUMERIC = 6,
  BD_STATUS_PANIC = 7,
} BdStatus;

/**
 * Opaque blur kernel.
 */
typedef struct BdKernel BdKernel;

/**
 * Opaque trained model with its schedule and kernel basis.
 */
typedef struct BdModel BdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *bd_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *bd_version(void);

/**
 * Isotropic Gaussian kernel of odd `size` and width `sigma`.
 *
 * # Safety
 * `out` must be a valid pointer to write a handle into.
 */
enum BdStatus bd_kernel_isotropic(size_t size, double sigma, struct BdKernel **out);

/**
 * Reads a BDK1 kernel file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum BdStatus bd_kernel_load(const char *path, struct BdKernel **out);

/**
 * # Safety
 * `kernel` must come from this library; `path` must be nul-terminated.
 */
enum BdStatus bd_kernel_save(const struct BdKernel *kernel, const char *path);

/**
 * Side length of the kernel, or 0 for a null handle.
 *
 * # Safety
 * `kernel` must be null or come from this library.
 */
size_t bd_kernel_size(const struct BdKernel *kernel);

/**
 * Copies the `size*size` row-major weights into `out`.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum BdStatus bd_kernel_weights(const struct BdKernel *kernel, double *out, size_t len);

/**
 * # Safety
 * `kernel` must be null or come from this library, and not be used again.
 */
void bd_kernel_free(struct BdKernel *kernel);

/**
 * `y = (k ⊗ x)↓s + n` with `n ~ N(0, noise_sigma²)` seeded by `seed`.
 * `out` receives `c*(h/s)*(w/s)` values.
 *
 * # Safety
 * `x` must hold `c*h*w` doubles and `out` `out_len` doubles.
 */
enum BdStatus bd_degrade(const double *x,
                         size_t c,
                         size_t h,
                         size_t w,
                         const struct BdKernel *kernel,
                         size_t scale,
                         double noise_sigma,
                         uint64_t seed,
                         double *out,
                         size_t out_len);

/**
 * PSNR in dB of two arrays of `len` values, capped at 100.
 *
 * # Safety
 * `a` and `b` must hold `len` doubles; `out` must be writable.
 */
enum BdStatus bd_psnr(const double *a, const double *b, size_t len, double peak, double *out);

/**
 * Loads a model checkpoint written by `bdiff train`.
 *
 * # Safety
 * `path` must be nul-terminated and `out` writable.
 */
enum BdStatus bd_model_load(const char *path, struct BdModel **out);

/**
 * # Safety
 * `model` must be null or come from this library, and not be used again.
 */
void bd_model_free(struct BdModel *model);

/**
 * Restores an LR image `y [c,h,w]` at scale `s` with guidance weight
 * `lambda`. `out_x` receives `c*(h*s)*(w*s)` values; when `out_kernel`
 * is non-null it receives a new kernel handle.
 *
 * # Safety
 * Buffers must have the stated sizes; `model` must come from this library.
 */
enum BdStatus bd_restore(const struct BdModel *model,
                         const double *y,
                         size_t c,
                         size_t h,
                         size_t w,
                         size_t scale,
                         double lambda,
                         uint64_t seed,
                         double *out_x,
                         size_t out_len,
                         struct BdKernel **out_kernel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BDIFF_H */

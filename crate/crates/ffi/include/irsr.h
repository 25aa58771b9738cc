#ifndef IRSR_H
#define IRSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IrsrStatus {
  IRSR_STATUS_OK = 0,
  IRSR_STATUS_NULL_POINTER = 1,
  IRSR_STATUS_INVALID_ARGUMENT = 2,
  IRSR_STATUS_DIMENSION = 3,
  IRSR_STATUS_DATA = 4,
  IRSR_STATUS_NUMERIC = 5,
  IRSR_STATUS_IO = 6,
  IRSR_STATUS_PANIC = 7,
} IrsrStatus;

/**
 * Opaque model handle.
 */
typedef struct IrsrModel IrsrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *irsr_last_error_message(void);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum IrsrStatus irsr_model_load(const char *path, struct IrsrModel **out);

/**
 * Freshly initialised model with the default architecture at `scale`.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum IrsrStatus irsr_model_new(uint32_t scale, uint64_t seed, struct IrsrModel **out);

/**
 * Writes a checkpoint directory.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum IrsrStatus irsr_model_save(const struct IrsrModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void irsr_model_free(struct IrsrModel *model);

/**
 * Upsampling factor, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
uint32_t irsr_model_scale(const struct IrsrModel *model);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
uint64_t irsr_model_param_count(const struct IrsrModel *model);

/**
 * Super-resolves an interleaved 8-bit image. `output` must hold
 * `scale^2 * width * height * channels` bytes.
 *
 * # Safety
 * `input` must point to `width * height * channels` bytes and `output` to
 * `output_len` writable bytes.
 */
enum IrsrStatus irsr_model_super_resolve(const struct IrsrModel *model,
                                         const uint8_t *input,
                                         uint32_t width,
                                         uint32_t height,
                                         uint32_t channels,
                                         uint8_t *output,
                                         uintptr_t output_len);

/**
 * PSNR in dB. Identical inputs store positive infinity.
 *
 * # Safety
 * `sr` and `gt` must point to `len` doubles; `out` must be writable.
 */
enum IrsrStatus irsr_psnr(const double *sr,
                          const double *gt,
                          uintptr_t len,
                          double peak,
                          double *out);

/**
 * Mean SSIM of two `height x width` single-channel images.
 *
 * # Safety
 * `sr` and `gt` must point to `width * height` doubles; `out` must be writable.
 */
enum IrsrStatus irsr_ssim(const double *sr,
                          const double *gt,
                          uint32_t width,
                          uint32_t height,
                          double *out);

/**
 * Fractions of absolute residuals in `[0,5)`, `[5,10)`, `[10,15)`, `[15,inf)`.
 *
 * # Safety
 * `sr` and `gt` must point to `len` doubles; `out` must hold 4 doubles.
 */
enum IrsrStatus irsr_residual_distribution(const double *sr,
                                           const double *gt,
                                           uintptr_t len,
                                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IRSR_H */

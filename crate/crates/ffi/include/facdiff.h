#ifndef FACDIFF_H
#define FACDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. The non-zero values of the command-line tool are reused.
 */
typedef enum FacdiffStatus {
  FACDIFF_STATUS_OK = 0,
  /**
   * Invalid argument or configuration.
   */
  FACDIFF_STATUS_CONFIG = 2,
  /**
   * File system, decoding or checkpoint format error.
   */
  FACDIFF_STATUS_IO = 3,
  /**
   * Non-finite values or a tensor kernel failure.
   */
  FACDIFF_STATUS_NUMERIC = 4,
  /**
   * A required pointer was null.
   */
  FACDIFF_STATUS_NULL_POINTER = 5,
  /**
   * A Rust panic was caught.
   */
  FACDIFF_STATUS_PANIC = 6,
} FacdiffStatus;

/**
 * Opaque model handle.
 */
typedef struct FacdiffModel FacdiffModel;

/**
 * Shape information of a loaded model.
 */
typedef struct FacdiffModelInfo {
  uint32_t resolution;
  uint32_t channels;
  uint32_t regions;
  uint32_t diffusion_steps;
  uint32_t default_t_seg;
  uint64_t training_step;
} FacdiffModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Text of the last error on this thread; empty after a success. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *facdiff_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *facdiff_version(void);

/**
 * Load a checkpoint into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FacdiffStatus facdiff_model_load(const char *path, struct FacdiffModel **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `facdiff_model_load` and not be used afterwards.
 */
void facdiff_model_free(struct FacdiffModel *model);

/**
 * # Safety
 * `model` and `info` must be valid pointers.
 */
enum FacdiffStatus facdiff_model_info(const struct FacdiffModel *model,
                                      struct FacdiffModelInfo *info);

/**
 * One-step segmentation with the EMA weights.
 *
 * `images` holds `n` images as `C x H x W` floats in [-1, 1]. `labels`
 * receives `n x H x W` region indices. `soft`, if not null, receives
 * `n x K x H x W` mask values. `t_seg = 0` selects the model's default.
 *
 * # Safety
 * Buffers must be valid for the sizes above.
 */
enum FacdiffStatus facdiff_segment(const struct FacdiffModel *model,
                                   const float *images,
                                   size_t n,
                                   uint32_t t_seg,
                                   uint64_t seed,
                                   uint8_t *labels,
                                   float *soft);

/**
 * Sample `n` images (`n x C x H x W` floats in [-1, 1]) with the EMA
 * weights; `labels`, if not null, receives their `n x H x W` region maps.
 *
 * # Safety
 * Buffers must be valid for the sizes above.
 */
enum FacdiffStatus facdiff_generate(const struct FacdiffModel *model,
                                    size_t n,
                                    uint64_t seed,
                                    float *images,
                                    uint8_t *labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACDIFF_H */

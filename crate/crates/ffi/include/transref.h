#ifndef TRANSREF_H
#define TRANSREF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TrStatus {
  TR_STATUS_OK = 0,
  TR_STATUS_NULL_POINTER = 1,
  TR_STATUS_INVALID_ARGUMENT = 2,
  TR_STATUS_IO = 3,
  TR_STATUS_CHECKPOINT = 4,
  TR_STATUS_VERSION_MISMATCH = 5,
  TR_STATUS_CONFIG = 6,
  TR_STATUS_SIZING = 7,
  TR_STATUS_CONTRACT = 8,
  TR_STATUS_OUT_OF_PROTOCOL = 9,
  TR_STATUS_MASK_GENERATION = 10,
  TR_STATUS_NUMERIC = 11,
  TR_STATUS_PANIC = 12,
  TR_STATUS_INTERNAL = 13,
} TrStatus;

// Opaque model handle.
typedef struct TrModel TrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *tr_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *tr_last_error(void);

// Fresh model from a preset name (`"toy"` or `"full"`) and seed.
//
// # Safety
// `preset` must be a NUL-terminated string and `out` a valid pointer.
enum TrStatus tr_model_new(const char *preset, uint64_t seed, struct TrModel **out);

// Loads a checkpoint and the `.cfg` file beside it.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum TrStatus tr_model_load(const char *path, struct TrModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum TrStatus tr_model_save(const struct TrModel *model, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void tr_model_free(struct TrModel *model);

// Number of scalar parameters.
//
// # Safety
// `model` must come from this library and `out` be a valid pointer.
enum TrStatus tr_model_parameter_count(const struct TrModel *model, uint64_t *out);

// Inpaints one image. Width and height must be multiples of 32. The
// composited result is written to `out_rgb` (`width * height * 3` bytes).
//
// # Safety
// All buffers must hold the stated number of bytes.
enum TrStatus tr_model_inpaint(const struct TrModel *model,
                               const uint8_t *image_rgb,
                               const uint8_t *mask,
                               const uint8_t *reference_rgb,
                               uint32_t width,
                               uint32_t height,
                               uint8_t *out_rgb);

// Generates a stroke mask whose hole ratio falls in bin `bin` (0 = 0–10%
// … 5 = 50–60%). Writes `width * height` bytes of 0/255.
//
// # Safety
// `out_mask` must hold `width * height` bytes.
enum TrStatus tr_mask_generate(uint32_t bin,
                               bool damaged_boundary,
                               uint64_t seed,
                               uint32_t width,
                               uint32_t height,
                               uint8_t *out_mask);

// Ratio bin index (0–5) of a 0/255 mask.
//
// # Safety
// `mask` must hold `width * height` bytes; `out_bin` must be valid.
enum TrStatus tr_mask_classify(const uint8_t *mask,
                               uint32_t width,
                               uint32_t height,
                               uint32_t *out_bin);

// PSNR in dB over all channels of two RGB8 images; `INFINITY` when identical.
//
// # Safety
// Both buffers must hold `width * height * 3` bytes; `out` must be valid.
enum TrStatus tr_psnr_rgb(const uint8_t *a,
                          const uint8_t *b,
                          uint32_t width,
                          uint32_t height,
                          double *out);

// Luminance SSIM of two RGB8 images.
//
// # Safety
// Both buffers must hold `width * height * 3` bytes; `out` must be valid.
enum TrStatus tr_ssim_rgb(const uint8_t *a,
                          const uint8_t *b,
                          uint32_t width,
                          uint32_t height,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRANSREF_H */

#ifndef EVENTDIFF_H
#define EVENTDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum EdStatus {
  EdOk = 0,
  /**
   * An argument violated a documented precondition.
   */
  EdErrDomain = 1,
  /**
   * Configuration mismatch (e.g. wrong checkpoint kind).
   */
  EdErrConfig = 2,
  /**
   * Malformed serialized container.
   */
  EdErrFormat = 3,
  EdErrIo = 4,
  EdErrNullPointer = 5,
  EdErrUtf8 = 6,
  /**
   * Output buffer has the wrong length.
   */
  EdErrBufferSize = 7,
} EdStatus;

/**
 * Opaque event-stream handle.
 */
typedef struct EdEventStream EdEventStream;

/**
 * Opaque handle over a loaded stage-2 checkpoint.
 */
typedef struct EdModel EdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message (NUL-terminated, truncated to `len`).
 *
 * # Safety
 * `buf` must point to at least `len` writable bytes.
 */
void ed_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ed_version(void);

/**
 * Build a stream from columnar arrays (each `count` long). Events must be
 * sorted by timestamp and lie inside the window and sensor bounds.
 *
 * # Safety
 * The four array pointers must each reference `count` readable elements;
 * `out` must be a valid destination pointer.
 */
enum EdStatus ed_stream_create(const uint16_t *xs,
                               const uint16_t *ys,
                               const int8_t *polarities,
                               const double *timestamps,
                               uintptr_t count,
                               uint16_t width,
                               uint16_t height,
                               double t_start,
                               double t_end,
                               struct EdEventStream **out);

/**
 * # Safety
 * `stream` must be a handle from this library, not yet freed.
 */
void ed_stream_free(struct EdEventStream *stream);

/**
 * # Safety
 * `stream` must be a valid handle.
 */
uintptr_t ed_stream_len(const struct EdEventStream *stream);

/**
 * Split at time `t`: events strictly before keep their polarity, events
 * strictly after are negated; ties are dropped.
 *
 * # Safety
 * `stream` must be valid; `out_before`/`out_after` must be writable.
 */
enum EdStatus ed_stream_split(const struct EdEventStream *stream,
                              double t,
                              struct EdEventStream **out_before,
                              struct EdEventStream **out_after);

/**
 * Write the stream to the columnar container format.
 *
 * # Safety
 * `stream` must be valid; `path` a NUL-terminated UTF-8 string.
 */
enum EdStatus ed_stream_save(const struct EdEventStream *stream, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` writable.
 */
enum EdStatus ed_stream_load(const char *path, struct EdEventStream **out);

/**
 * Rasterize into a standard voxel grid `(bins, 2, h, w)`, row-major into
 * `out` (`out_len` must equal `bins*2*h*w`).
 *
 * # Safety
 * `stream` must be valid; `out` must reference `out_len` writable floats.
 */
enum EdStatus ed_voxelize(const struct EdEventStream *stream,
                          uintptr_t bins,
                          uintptr_t h,
                          uintptr_t w,
                          float *out,
                          uintptr_t out_len);

/**
 * Rasterize into the symmetric cumulative representation (odd `bins`).
 *
 * # Safety
 * Same contract as [`ed_voxelize`].
 */
enum EdStatus ed_scer(const struct EdEventStream *stream,
                      uintptr_t bins,
                      uintptr_t h,
                      uintptr_t w,
                      float *out,
                      uintptr_t out_len);

/**
 * PSNR in dB between two CHW f32 images in [0, 1]; identical images yield
 * +infinity.
 *
 * # Safety
 * `a` and `b` must reference `c*h*w` readable floats; `out` writable.
 */
enum EdStatus ed_psnr(const float *a,
                      const float *b,
                      uintptr_t c,
                      uintptr_t h,
                      uintptr_t w,
                      double *out);

/**
 * Single-scale SSIM between two CHW f32 images in [0, 1].
 *
 * # Safety
 * Same contract as [`ed_psnr`].
 */
enum EdStatus ed_ssim(const float *a,
                      const float *b,
                      uintptr_t c,
                      uintptr_t h,
                      uintptr_t w,
                      double *out);

/**
 * Load a stage-2 checkpoint for inference.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` writable.
 */
enum EdStatus ed_model_load(const char *path, struct EdModel **out);

/**
 * # Safety
 * `model` must be a handle from [`ed_model_load`], not yet freed.
 */
void ed_model_free(struct EdModel *model);

/**
 * Interpolate the frame at normalized `t` in (0, 1) between two boundary
 * frames, conditioning on the event stream. `steps_override` of 0 keeps the
 * checkpoint's schedule. Output is CHW into `out_image` (`c*h*w` floats).
 *
 * # Safety
 * Pointers must reference buffers of the documented sizes.
 */
enum EdStatus ed_interpolate(const struct EdModel *model,
                             const float *i0,
                             const float *i1,
                             uintptr_t c,
                             uintptr_t h,
                             uintptr_t w,
                             const struct EdEventStream *stream,
                             double t,
                             uint64_t seed,
                             uintptr_t steps_override,
                             float *out_image);

/**
 * Deblur a frame from its event window (SCER rasterization inside).
 *
 * # Safety
 * Pointers must reference buffers of the documented sizes.
 */
enum EdStatus ed_deblur(const struct EdModel *model,
                        const float *blur,
                        uintptr_t c,
                        uintptr_t h,
                        uintptr_t w,
                        const struct EdEventStream *stream,
                        uint64_t seed,
                        uintptr_t steps_override,
                        float *out_image);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVENTDIFF_H */

#ifndef HAIRXFER_H
#define HAIRXFER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HxStatus {
  HX_STATUS_OK = 0,
  HX_STATUS_NULL_POINTER = 1,
  HX_STATUS_INVALID_ARGUMENT = 2,
  HX_STATUS_IO = 3,
  HX_STATUS_CONFIG = 4,
  HX_STATUS_SHAPE = 5,
  HX_STATUS_EMPTY_REGION = 6,
  HX_STATUS_DIVERGED = 7,
  HX_STATUS_WEIGHTS = 8,
  HX_STATUS_BUFFER_TOO_SMALL = 9,
  HX_STATUS_INTERNAL = 10,
} HxStatus;

typedef enum HxEditMode {
  HX_EDIT_MODE_FULL = 0,
  HX_EDIT_MODE_APPEARANCE_ONLY = 1,
  HX_EDIT_MODE_SHAPE_ONLY = 2,
} HxEditMode;

/**
 * Parsed pipeline configuration.
 */
typedef struct HxConfig HxConfig;

/**
 * Configuration plus the generator and extractor it names.
 */
typedef struct HxEngine HxEngine;

/**
 * Outcome of one transfer job.
 */
typedef struct HxResult HxResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until
 * the next call on this thread.
 */
const char *hx_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hx_version(void);

/**
 * # Safety
 * `s` is NULL or a string returned by this library, not yet freed.
 */
void hx_string_free(char *s);

/**
 * Default configuration (toy backend).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HxStatus hx_config_default(struct HxConfig **out);

/**
 * Parses TOML text. Relative weight paths stay relative to the process.
 *
 * # Safety
 * `text` is a NUL-terminated string and `out` a valid pointer.
 */
enum HxStatus hx_config_from_toml(const char *text, struct HxConfig **out);

/**
 * Loads a config file; relative weight paths resolve against its directory.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out` a valid pointer.
 */
enum HxStatus hx_config_load(const char *path, struct HxConfig **out);

/**
 * Hex SHA-256 of the canonical config; free with [`hx_string_free`].
 *
 * # Safety
 * `config` is a live handle and `out` a valid pointer.
 */
enum HxStatus hx_config_hash(const struct HxConfig *config, char **out);

/**
 * # Safety
 * `config` is NULL or a handle from this library, not yet freed.
 */
void hx_config_free(struct HxConfig *config);

/**
 * Builds the generator and extractor named by `config`. The config
 * handle is not consumed.
 *
 * # Safety
 * `config` is a live handle and `out` a valid pointer.
 */
enum HxStatus hx_engine_new(const struct HxConfig *config, struct HxEngine **out);

/**
 * # Safety
 * `engine` is NULL or a handle from this library, not yet freed.
 */
void hx_engine_free(struct HxEngine *engine);

/**
 * Runs one job and writes its artefacts under `out_dir`. Portraits are
 * PNG paths with `.face.png` / `.hair.png` companions; `shape` or
 * `appearance` may be NULL when `mode` does not use it. `tuple_id` (may be
 * NULL, meaning "job") seeds the run.
 *
 * # Safety
 * String arguments are NULL or NUL-terminated; `engine` is a live handle
 * and `out` a valid pointer.
 */
enum HxStatus hx_transfer(const struct HxEngine *engine,
                          const char *identity,
                          const char *shape,
                          const char *appearance,
                          const char *tuple_id,
                          enum HxEditMode mode,
                          const char *out_dir,
                          struct HxResult **out);

/**
 * Runs every record of a JSONL manifest on `jobs` workers; per-job
 * failures are counted in `failed` rather than failing the call.
 *
 * # Safety
 * String arguments are NUL-terminated; `engine` is a live handle and
 * `failed` a valid pointer.
 */
enum HxStatus hx_batch(const struct HxEngine *engine,
                       const char *manifest,
                       const char *data_dir,
                       const char *out_dir,
                       size_t jobs,
                       enum HxEditMode mode,
                       size_t *failed);

/**
 * Height and width of the composited result.
 *
 * # Safety
 * `result` is a live handle; `height` and `width` are valid pointers.
 */
enum HxStatus hx_result_size(const struct HxResult *result, size_t *height, size_t *width);

/**
 * Copies the result as interleaved 8-bit RGB (`height·width·3` bytes).
 *
 * # Safety
 * `result` is a live handle and `buf` holds `len` writable bytes.
 */
enum HxStatus hx_result_rgb8(const struct HxResult *result, uint8_t *buf, size_t len);

/**
 * The job's metrics as JSON; free with [`hx_string_free`].
 *
 * # Safety
 * `result` is a live handle and `out` a valid pointer.
 */
enum HxStatus hx_result_metrics_json(const struct HxResult *result, char **out);

/**
 * # Safety
 * `result` is NULL or a handle from this library, not yet freed.
 */
void hx_result_free(struct HxResult *result);

/**
 * IoU of two `height·width` masks (nonzero bytes are set).
 *
 * # Safety
 * `a` and `b` each hold `height·width` readable bytes; `out` is valid.
 */
enum HxStatus hx_mask_iou(const uint8_t *a,
                          const uint8_t *b,
                          size_t height,
                          size_t width,
                          double *out);

/**
 * PSNR in dB of two channel-major `channels·height·width` images in
 * [0, 1]; identical images give 100.
 *
 * # Safety
 * `a` and `b` each hold `channels·height·width` readable doubles; `out`
 * is valid.
 */
enum HxStatus hx_psnr(const double *a,
                      const double *b,
                      size_t channels,
                      size_t height,
                      size_t width,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HAIRXFER_H */

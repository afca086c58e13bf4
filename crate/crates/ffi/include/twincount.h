#ifndef TWINCOUNT_H
#define TWINCOUNT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Pixels per image side.
 */
#define TC_IMAGE_SIZE 128

typedef enum TcStatus {
  TC_STATUS_OK = 0,
  TC_STATUS_NULL_POINTER = 1,
  TC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Bad configuration or data file.
   */
  TC_STATUS_VALIDATION = 3,
  TC_STATUS_IO = 4,
  TC_STATUS_RUNTIME = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  TC_STATUS_PANIC = 6,
} TcStatus;

typedef enum TcDomain {
  TC_DOMAIN_NAT = 0,
  TC_DOMAIN_SYN = 1,
} TcDomain;

typedef enum TcStyle {
  TC_STYLE_SYN_PC = 0,
  TC_STYLE_SYN_BF = 1,
  TC_STYLE_PSEUDO_NAT_PC = 2,
  TC_STYLE_PSEUDO_NAT_BF = 3,
} TcStyle;

/**
 * Opaque trained model.
 */
typedef struct TcModel TcModel;

/**
 * Headline count metrics; `mre` is a fraction.
 */
typedef struct TcMetrics {
  size_t n;
  double mae;
  double mre;
  double accuracy;
} TcMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tc_version(void);

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *tc_last_error(void);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum TcStatus tc_model_load(const char *path, struct TcModel **out);

/**
 * Frees a handle from [`tc_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not freed before.
 */
void tc_model_free(struct TcModel *model);

/**
 * Width of the shared latent vector, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tc_model_latent_dim(const struct TcModel *model);

/**
 * Count estimates for `n_images` images encoded with `domain`'s encoder.
 *
 * # Safety
 * `pixels` must hold `n_images · 128 · 128` floats and `out_counts`
 * room for `n_images` doubles.
 */
enum TcStatus tc_model_predict(const struct TcModel *model,
                               const float *pixels,
                               size_t n_images,
                               enum TcDomain domain,
                               double *out_counts);

/**
 * Translates one image from `source` to `target`, writing the translated
 * pixels and both count estimates.
 *
 * # Safety
 * `pixels` and `out_pixels` must each hold `128 · 128` floats; the
 * estimate pointers may be null.
 */
enum TcStatus tc_model_translate(const struct TcModel *model,
                                 const float *pixels,
                                 enum TcDomain source,
                                 enum TcDomain target,
                                 float *out_pixels,
                                 double *out_source_estimate,
                                 double *out_translated_estimate);

/**
 * Renders `n` labeled images of `style` into `out_dir` with a manifest.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated string.
 */
enum TcStatus tc_generate_dataset(enum TcStyle style, size_t n, uint64_t seed, const char *out_dir);

/**
 * Counts cells in one image with the watershed baseline calibrated for
 * `style`.
 *
 * # Safety
 * `pixels` must hold `128 · 128` floats and `out_count` be valid.
 */
enum TcStatus tc_baseline_count(const float *pixels, enum TcStyle style, size_t *out_count);

/**
 * MAE, MRE and accuracy of `n` predictions against positive labels.
 *
 * # Safety
 * `predictions` and `labels` must hold `n` elements; `out` must be valid.
 */
enum TcStatus tc_metrics(const double *predictions,
                         const uint32_t *labels,
                         size_t n,
                         struct TcMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TWINCOUNT_H */

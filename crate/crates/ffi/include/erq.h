#ifndef ERQ_H
#define ERQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define ERQ_STAGE_AQER 1

#define ERQ_STAGE_ROUNDING 2

#define ERQ_STAGE_RIDGE 4

#define ERQ_STAGE_ALL ((ERQ_STAGE_AQER | ERQ_STAGE_ROUNDING) | ERQ_STAGE_RIDGE)

#define ERQ_ACT_UNIFORM 0

#define ERQ_ACT_LOG_SQRT2 1

/**
 * Result of every call. Values 1–3 match the CLI exit codes.
 */
typedef enum ErqStatus {
  ERQ_STATUS_OK = 0,
  ERQ_STATUS_VALIDATION = 1,
  ERQ_STATUS_NUMERICAL = 2,
  ERQ_STATUS_VERIFICATION = 3,
  ERQ_STATUS_NULL_POINTER = 4,
  ERQ_STATUS_BUFFER_TOO_SMALL = 5,
  ERQ_STATUS_PANIC = 6,
} ErqStatus;

/**
 * A layer's weight and calibration batch.
 */
typedef struct ErqLayer ErqLayer;

/**
 * Output of quantizing one layer.
 */
typedef struct ErqResult ErqResult;

/**
 * Run parameters. Obtain defaults from [`erq_config_default`].
 */
typedef struct ErqConfig {
  double lambda1;
  double lambda2;
  uint32_t k;
  uint32_t max_iter;
  /**
   * Bitmask of `ERQ_STAGE_*`.
   */
  uint32_t stages;
  /**
   * Bit-width overrides for manifest runs; 0 keeps the manifest value.
   */
  uint32_t bits_w;
  uint32_t bits_a;
  /**
   * Worker threads; 0 lets the runtime decide.
   */
  uint32_t jobs;
} ErqConfig;

/**
 * Layer output MSE at each stage.
 */
typedef struct ErqMse {
  double baseline;
  double after_aqer;
  double after_wqer;
} ErqMse;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *erq_version(void);

/**
 * Message describing the last failed call on this thread, or NULL. The
 * pointer stays valid until the next `erq_*` call on the same thread.
 */
const char *erq_last_error(void);

/**
 * Default run parameters: λ₁ = λ₂ = 1e4, k = 1, 100 iterations, all stages.
 */
struct ErqConfig erq_config_default(void);

/**
 * Copies a `d_out × d_in` weight and an `n × d_in` calibration batch into a
 * new layer handle. `act_family` is one of `ERQ_ACT_*`.
 *
 * # Safety
 * `weight` and `calib` must point to buffers of the stated sizes and `out`
 * must be a valid pointer to write the handle to.
 */
enum ErqStatus erq_layer_new(const double *weight,
                             size_t d_out,
                             size_t d_in,
                             const double *calib,
                             size_t n,
                             uint32_t act_family,
                             uint32_t bits_w,
                             uint32_t bits_a,
                             struct ErqLayer **out);

/**
 * Releases a layer handle. NULL is ignored.
 *
 * # Safety
 * `layer` must come from [`erq_layer_new`] and not be used afterwards.
 */
void erq_layer_free(struct ErqLayer *layer);

/**
 * Quantizes a layer. `cfg` may be NULL for defaults; its bit-width fields
 * override the layer's when non-zero.
 *
 * # Safety
 * `layer` must be a live handle and `out` a valid pointer.
 */
enum ErqStatus erq_layer_quantize(const struct ErqLayer *layer,
                                  const struct ErqConfig *cfg,
                                  struct ErqResult **out);

/**
 * Releases a result handle. NULL is ignored.
 *
 * # Safety
 * `result` must come from [`erq_layer_quantize`] and not be used afterwards.
 */
void erq_result_free(struct ErqResult *result);

/**
 * Writes the code matrix shape.
 *
 * # Safety
 * All pointers must be valid.
 */
enum ErqStatus erq_result_shape(const struct ErqResult *result, size_t *d_out, size_t *d_in);

/**
 * Copies the row-major integer codes into `buf`, which holds `len` values
 * and must be at least `d_out · d_in` long.
 *
 * # Safety
 * `buf` must be writable for `len` elements.
 */
enum ErqStatus erq_result_codes(const struct ErqResult *result, int32_t *buf, size_t len);

/**
 * Copies each output channel's scale and zero-point; both buffers hold
 * `len ≥ d_out` values.
 *
 * # Safety
 * `scales` and `zero_points` must be writable for `len` elements.
 */
enum ErqStatus erq_result_scales(const struct ErqResult *result,
                                 double *scales,
                                 int64_t *zero_points,
                                 size_t len);

/**
 * Layer output MSE at baseline, after Aqer and after Wqer.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ErqStatus erq_result_mse(const struct ErqResult *result, struct ErqMse *out);

/**
 * The layer report as a JSON string; release it with [`erq_string_free`].
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ErqStatus erq_result_report_json(const struct ErqResult *result, char **out);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void erq_string_free(char *s);

/**
 * Quantizes every layer of a manifest into `out_dir`, as `erq quantize`
 * does. Returns the status of the first failed layer, if any.
 *
 * # Safety
 * `manifest` and `out_dir` must be NUL-terminated strings.
 */
enum ErqStatus erq_quantize_manifest(const char *manifest,
                                     const char *out_dir,
                                     const struct ErqConfig *cfg);

/**
 * `δ M δᵀ` for a length-`d` error vector and a row-major `d × d` matrix.
 *
 * # Safety
 * `delta` must hold `d` values, `m` `d·d` values, and `out` be valid.
 */
enum ErqStatus erq_proxy_value(const double *delta, const double *m, size_t d, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ERQ_H */

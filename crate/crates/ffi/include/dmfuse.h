#ifndef DMFUSE_H
#define DMFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum DmfStatus {
  DMF_STATUS_OK = 0,
  DMF_STATUS_NULL_POINTER = 1,
  DMF_STATUS_INVALID_ARGUMENT = 2,
  DMF_STATUS_CONFIG = 3,
  DMF_STATUS_IO = 4,
  DMF_STATUS_CHECKPOINT = 5,
  DMF_STATUS_DIGEST_MISMATCH = 6,
  DMF_STATUS_SHAPE = 7,
  DMF_STATUS_DATA = 8,
  DMF_STATUS_INTERNAL = 9,
} DmfStatus;

/**
 * Parsed run configuration.
 */
typedef struct DmfConfig DmfConfig;

/**
 * A loaded reconstructor and fusion network ready for inference.
 */
typedef struct DmfModel DmfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dmf_version(void);

/**
 * Message of the last failed call on this thread ("" after a success).
 * Valid until the next dmfuse call on the same thread.
 */
const char *dmf_last_error(void);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum DmfStatus dmf_config_default(struct DmfConfig **out);

/**
 * Parse a TOML configuration; missing keys take their defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum DmfStatus dmf_config_from_toml(const char *toml, struct DmfConfig **out);

/**
 * Release a configuration. Null is ignored.
 *
 * # Safety
 * `cfg` must come from a `dmf_config_*` constructor and not be used again.
 */
void dmf_config_free(struct DmfConfig *cfg);

/**
 * Load checkpoints written by `train-recon` and `train-fusion`.
 *
 * # Safety
 * `cfg` must be a live handle, the paths NUL-terminated strings and `out`
 * writable.
 */
enum DmfStatus dmf_model_load(const struct DmfConfig *cfg,
                              const char *recon_path,
                              const char *fusion_path,
                              struct DmfModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from `dmf_model_load` and not be used again.
 */
void dmf_model_free(struct DmfModel *model);

/**
 * Number of fusion-network parameters.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t dmf_model_param_count(const struct DmfModel *model);

/**
 * Fuse two grayscale images of `height * width` pixels into `out`.
 *
 * # Safety
 * `a`, `b` and `out` must each hold `height * width` doubles.
 */
enum DmfStatus dmf_fuse_gray(const struct DmfModel *model,
                             const double *a,
                             const double *b,
                             size_t height,
                             size_t width,
                             uint64_t noise_seed,
                             double *out);

/**
 * Fuse a grayscale image with an interleaved RGB image. The network fuses
 * luma; the result carries `b`'s chroma. `out_luma` (optional) receives the
 * network output.
 *
 * # Safety
 * `a` must hold `height * width` doubles, `b_rgb` and `out_rgb` three times
 * that, and `out_luma` (if not null) `height * width`.
 */
enum DmfStatus dmf_fuse_color(const struct DmfModel *model,
                              const double *a,
                              const double *b_rgb,
                              size_t height,
                              size_t width,
                              uint64_t noise_seed,
                              double *out_rgb,
                              double *out_luma);

/**
 * Number of metrics written by `dmf_evaluate`.
 */
size_t dmf_metric_count(void);

/**
 * Name of metric `index` as a static string, or null when out of range.
 */
const char *dmf_metric_name(size_t index);

/**
 * Score a fused grayscale image against its two sources. Writes
 * `dmf_metric_count()` values to `out_metrics`.
 *
 * # Safety
 * `a`, `b` and `fused` must hold `height * width` doubles; `out_metrics`
 * must hold `dmf_metric_count()` doubles.
 */
enum DmfStatus dmf_evaluate(const double *a,
                            const double *b,
                            const double *fused,
                            size_t height,
                            size_t width,
                            double *out_metrics);

/**
 * Generate a phantom pair. `task`: 0 = MRI-CT, 1 = MRI-PET, 2 = MRI-SPECT.
 * `out_b_rgb` receives B as interleaved RGB (gray B is replicated).
 *
 * # Safety
 * `out_a` must hold `size * size` doubles and `out_b_rgb` three times that.
 */
enum DmfStatus dmf_phantom_pair(uint64_t seed,
                                uint32_t task,
                                size_t size,
                                double *out_a,
                                double *out_b_rgb);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DMFUSE_H */

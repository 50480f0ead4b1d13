#ifndef CANEFLOW_H
#define CANEFLOW_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_POINTER = 1,
  CF_STATUS_INVALID_UTF8 = 2,
  CF_STATUS_DOMAIN = 3,
  CF_STATUS_CONFIG = 4,
  CF_STATUS_OVERFLOW = 5,
  CF_STATUS_INSUFFICIENT_DATA = 6,
  CF_STATUS_STREAM = 7,
  CF_STATUS_FIT = 8,
  CF_STATUS_EXCLUDED_LOAD = 9,
  CF_STATUS_MANIFEST = 10,
  CF_STATUS_IO = 11,
  CF_STATUS_PARSE = 12,
  CF_STATUS_BUFFER_TOO_SMALL = 13,
  CF_STATUS_PANIC = 14,
} CfStatus;

typedef enum CfTransform {
  CF_TRANSFORM_IDENTITY = 0,
  CF_TRANSFORM_SQRT = 1,
} CfTransform;

typedef enum CfQuality {
  CF_QUALITY_OK = 0,
  CF_QUALITY_LOW_LIGHT = 1,
  CF_QUALITY_EMPTY = 2,
} CfQuality;

typedef enum CfLowLight {
  CF_LOW_LIGHT_INCLUDE = 0,
  CF_LOW_LIGHT_EXCLUDE = 1,
} CfLowLight;

/**
 * Campaign configuration handle.
 */
typedef struct CfConfig CfConfig;

/**
 * Frame estimator handle: ROI plus estimator settings.
 */
typedef struct CfEstimator CfEstimator;

/**
 * Streaming accumulator handle: buffered pulses and estimates of one run.
 */
typedef struct CfFlow CfFlow;

typedef struct CfFit {
  double slope;
  double r_squared;
  size_t n;
} CfFit;

/**
 * One per-frame volume estimate; `v_c` is m³ per meter of elevator.
 */
typedef struct CfVolumeEstimate {
  double timestamp;
  double v_c;
  enum CfQuality quality;
} CfVolumeEstimate;

typedef struct CfFlowTotals {
  double volume;
  double mass_kg;
  double duration_s;
  double mass_flow_kg_per_s;
  size_t n_frames;
  size_t n_low_light;
  size_t n_excluded;
} CfFlowTotals;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cf_version(void);

/**
 * Message of the last failed call on this thread, or NULL if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *cf_last_error_message(void);

/**
 * Stable lowercase name of a status code.
 */
const char *cf_status_name(enum CfStatus status);

/**
 * Applies the volume transform to one `v_c`.
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
enum CfStatus cf_apply_transform(double v_c, enum CfTransform transform, double *out);

/**
 * Point yield in kg/m² from mass flow (kg/s), vehicle speed (m/s) and row width (m).
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
enum CfStatus cf_point_yield(double m_dot, double v_m, double w, double *out);

/**
 * Coefficient of variation, percent, with the n−1 standard deviation.
 *
 * # Safety
 * `values` must point to `n` readable doubles; `out` must be valid.
 */
enum CfStatus cf_cv(const double *values, size_t n, double *out);

/**
 * Through-origin least squares of `actual` on `predicted`.
 *
 * # Safety
 * `predicted` and `actual` must each point to `n` readable doubles; `out` must be valid.
 */
enum CfStatus cf_fit_through_origin(const double *predicted,
                                    const double *actual,
                                    size_t n,
                                    struct CfFit *out);

/**
 * Loads a built-in campaign, `"lab"` or `"field"`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be valid.
 */
enum CfStatus cf_config_preset(const char *name, struct CfConfig **out);

/**
 * Loads a campaign from a TOML file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum CfStatus cf_config_load(const char *path, struct CfConfig **out);

/**
 * # Safety
 * `cfg` must be a valid config handle.
 */
enum CfStatus cf_config_set_seed(struct CfConfig *cfg, uint64_t seed);

/**
 * Writes the 64-character hex config hash plus NUL into `buf`.
 *
 * # Safety
 * `cfg` must be a valid handle; `buf` must hold `len` writable bytes.
 */
enum CfStatus cf_config_hash(const struct CfConfig *cfg, char *buf, size_t len);

/**
 * Runs simulate, estimate, calibrate and report into `out_dir`.
 *
 * # Safety
 * `cfg` must be a valid handle; `out_dir` must be a NUL-terminated string.
 */
enum CfStatus cf_pipeline_run(const struct CfConfig *cfg, const char *out_dir);

/**
 * # Safety
 * `cfg` must be NULL or a handle not yet freed.
 */
void cf_config_free(struct CfConfig *cfg);

/**
 * New estimator over a `width × length` ROI with default settings.
 *
 * # Safety
 * `out` must be valid.
 */
enum CfStatus cf_estimator_new(double roi_width, double roi_length, struct CfEstimator **out);

/**
 * # Safety
 * `est` must be a valid estimator handle.
 */
enum CfStatus cf_estimator_set_cell_size(struct CfEstimator *est, double cell_size);

/**
 * Reduces cells with a percentile in [0, 100]; a negative value selects the mean.
 *
 * # Safety
 * `est` must be a valid estimator handle.
 */
enum CfStatus cf_estimator_set_percentile(struct CfEstimator *est, double percentile);

/**
 * # Safety
 * `est` must be a valid estimator handle.
 */
enum CfStatus cf_estimator_set_lux_gate(struct CfEstimator *est, double lux_gate);

/**
 * Estimates one frame. `xyz` holds `n_points` interleaved x, y, z triples in meters.
 *
 * # Safety
 * `est` must be valid; `xyz` must point to `3 × n_points` readable doubles; `out` must be valid.
 */
enum CfStatus cf_estimator_estimate(const struct CfEstimator *est,
                                    double timestamp,
                                    double lux,
                                    const double *xyz,
                                    size_t n_points,
                                    struct CfVolumeEstimate *out);

/**
 * # Safety
 * `est` must be NULL or a handle not yet freed.
 */
void cf_estimator_free(struct CfEstimator *est);

/**
 * New accumulator for one run. `density` is kg per transformed volume unit;
 * `frame_rate` sets the trailing Δt of the last frame.
 *
 * # Safety
 * `out` must be valid.
 */
enum CfStatus cf_flow_new(double density,
                          enum CfTransform transform,
                          enum CfLowLight low_light,
                          double frame_rate,
                          struct CfFlow **out);

/**
 * Sets the sprocket geometry used to turn pulses into chain speed.
 *
 * # Safety
 * `flow` must be a valid accumulator handle.
 */
enum CfStatus cf_flow_set_sprocket(struct CfFlow *flow,
                                   uint32_t pulses_per_rev,
                                   double circumference);

/**
 * Appends a cumulative pulse count record.
 *
 * # Safety
 * `flow` must be a valid accumulator handle.
 */
enum CfStatus cf_flow_push_pulse(struct CfFlow *flow, double timestamp, uint64_t count);

/**
 * Appends a frame estimate; frames must arrive in time order.
 *
 * # Safety
 * `flow` must be a valid accumulator handle.
 */
enum CfStatus cf_flow_push_estimate(struct CfFlow *flow, struct CfVolumeEstimate estimate);

/**
 * Folds the buffered run into totals.
 *
 * # Safety
 * `flow` must be a valid handle; `out` must be valid.
 */
enum CfStatus cf_flow_totals(const struct CfFlow *flow, struct CfFlowTotals *out);

/**
 * # Safety
 * `flow` must be NULL or a handle not yet freed.
 */
void cf_flow_free(struct CfFlow *flow);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CANEFLOW_H */

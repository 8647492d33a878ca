#ifndef VIEWSTAB_H
#define VIEWSTAB_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VsStatus {
  VS_STATUS_OK = 0,
  VS_STATUS_NULL_POINTER = 1,
  VS_STATUS_INVALID_ARGUMENT = 2,
  VS_STATUS_VALIDATION = 3,
  VS_STATUS_IO = 4,
  VS_STATUS_NUMERICAL = 5,
  VS_STATUS_OUT_OF_RANGE = 6,
  VS_STATUS_BUFFER_TOO_SMALL = 7,
  VS_STATUS_INTERNAL = 8,
} VsStatus;

/**
 * Opaque dataset handle.
 */
typedef struct VsDataset VsDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *vs_version(void);

/**
 * Message for the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *vs_last_error_message(void);

/**
 * Loads a manifest and its blobs. On success `*out` owns a handle that must
 * be released with [`vs_dataset_free`].
 *
 * # Safety
 * `manifest_path` must be a NUL-terminated string and `out` a writable
 * pointer.
 */
enum VsStatus vs_dataset_load(const char *manifest_path, bool normalize, struct VsDataset **out);

/**
 * # Safety
 * `dataset` must be NULL or a handle from [`vs_dataset_load`] that has not
 * been freed.
 */
void vs_dataset_free(struct VsDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle and `out` writable.
 */
enum VsStatus vs_dataset_scene_count(const struct VsDataset *dataset, size_t *out);

/**
 * Number of views in scene `scene_index`.
 *
 * # Safety
 * `dataset` must be a live handle and `out` writable.
 */
enum VsStatus vs_dataset_view_count(const struct VsDataset *dataset,
                                    size_t scene_index,
                                    size_t *out);

/**
 * Instability scores for one scene. A `radius` of zero or less derives the
 * radius from view spacing. Views without pose neighbours get NaN.
 *
 * # Safety
 * `dataset` must be a live handle, `featurizer_id` NUL-terminated, and `out`
 * must point to `out_len` writable doubles.
 */
enum VsStatus vs_instability_scores(const struct VsDataset *dataset,
                                    const char *featurizer_id,
                                    size_t scene_index,
                                    double radius,
                                    double angle_weight,
                                    double *out,
                                    size_t out_len);

/**
 * Cosine distance between two `dims`-long vectors.
 *
 * # Safety
 * `x` and `y` must each point to `dims` readable floats; `out` writable.
 */
enum VsStatus vs_feature_distance(const float *x, const float *y, size_t dims, double *out);

/**
 * Angular distance in degrees between two turntable poses.
 *
 * # Safety
 * `out` must be writable.
 */
enum VsStatus vs_pose_distance_turntable(double azimuth_a,
                                         double elevation_a,
                                         double azimuth_b,
                                         double elevation_b,
                                         double *out);

/**
 * Nearest-rank percentile of `n` values.
 *
 * # Safety
 * `values` must point to `n` readable doubles; `out` writable.
 */
enum VsStatus vs_percentile_threshold(const double *values,
                                      size_t n,
                                      double percentile,
                                      double *out);

/**
 * IoU of two id sets; duplicates within one array are ignored.
 *
 * # Safety
 * `a` and `b` must point to `na` and `nb` readable ids (NULL allowed when
 * the count is zero); `out` writable.
 */
enum VsStatus vs_iou(const uint64_t *a, size_t na, const uint64_t *b, size_t nb, double *out);

/**
 * Runs every stage that needs no side inputs and writes the report bundle
 * to `out_dir`. `workers` of zero uses every core.
 *
 * # Safety
 * `dataset` must be a live handle and `out_dir` NUL-terminated.
 */
enum VsStatus vs_run_pipeline(const struct VsDataset *dataset,
                              const char *out_dir,
                              uint64_t seed,
                              size_t workers);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIEWSTAB_H */

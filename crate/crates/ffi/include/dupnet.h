/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef DUPNET_H
#define DUPNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which set distance [`dupnet_distance`] computes.
 */
typedef enum DupnetDistance {
  /**
   * Max over `a` of the distance to the nearest point of `b`.
   */
  DUPNET_DISTANCE_HAUSDORFF_DIRECTED = 0,
  /**
   * Symmetric mean of squared nearest-neighbor distances.
   */
  DUPNET_DISTANCE_CHAMFER = 1,
  /**
   * Mean over `b` of the squared distance to the nearest point of `a`.
   */
  DUPNET_DISTANCE_ONE_SIDED_CHAMFER = 2,
  /**
   * Exact Earth Mover's distance per point; sizes must match.
   */
  DUPNET_DISTANCE_EMD = 3,
} DupnetDistance;

/**
 * Result code of every fallible function.
 */
typedef enum DupnetStatus {
  DUPNET_STATUS_OK = 0,
  DUPNET_STATUS_NULL_POINTER = 1,
  DUPNET_STATUS_INVALID_ARGUMENT = 2,
  DUPNET_STATUS_CONTRACT = 3,
  DUPNET_STATUS_PARSE = 4,
  DUPNET_STATUS_IO = 5,
  DUPNET_STATUS_NUMERICAL = 6,
  DUPNET_STATUS_BUFFER_TOO_SMALL = 7,
  DUPNET_STATUS_PANIC = 8,
} DupnetStatus;

/**
 * Classifier handle.
 */
typedef struct DupnetClassifier DupnetClassifier;

/**
 * Point cloud handle.
 */
typedef struct DupnetCloud DupnetCloud;

/**
 * Learned upsampler handle.
 */
typedef struct DupnetUpsampler DupnetUpsampler;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread. The pointer stays valid until
 * the next failing call on the same thread; never free it.
 */
const char *dupnet_last_error(void);

/**
 * Creates a cloud from `n` packed `x y z` triples.
 *
 * # Safety
 * `xyz` must point to `3 * n` readable doubles; `out` must be writable.
 */
enum DupnetStatus dupnet_cloud_new(const double *xyz, size_t n, struct DupnetCloud **out);

/**
 * # Safety
 * `cloud` must be null or a handle from this library not yet freed.
 */
void dupnet_cloud_free(struct DupnetCloud *cloud);

/**
 * Number of points, or 0 for a null handle.
 *
 * # Safety
 * `cloud` must be null or a live handle.
 */
size_t dupnet_cloud_len(const struct DupnetCloud *cloud);

/**
 * Copies the points into `out` as packed triples. `capacity` counts points.
 *
 * # Safety
 * `cloud` must be a live handle; `out` must hold `3 * capacity` doubles.
 */
enum DupnetStatus dupnet_cloud_copy_points(const struct DupnetCloud *cloud,
                                           double *out,
                                           size_t capacity);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum DupnetStatus dupnet_cloud_load(const char *path, struct DupnetCloud **out);

/**
 * # Safety
 * `cloud` must be a live handle; `path` a nul-terminated string.
 */
enum DupnetStatus dupnet_cloud_save(const struct DupnetCloud *cloud, const char *path);

/**
 * Aspect-preserving normalization into the unit cube.
 *
 * # Safety
 * `cloud` must be a live handle; `out` must be writable.
 */
enum DupnetStatus dupnet_normalize(const struct DupnetCloud *cloud, struct DupnetCloud **out);

/**
 * Statistical outlier removal. `removed` (optional) receives the number of
 * dropped points.
 *
 * # Safety
 * `cloud` must be a live handle; `out` writable; `removed` null or writable.
 */
enum DupnetStatus dupnet_sor(const struct DupnetCloud *cloud,
                             size_t k,
                             double alpha,
                             struct DupnetCloud **out,
                             size_t *removed);

/**
 * Drops `r` uniformly random points.
 *
 * # Safety
 * `cloud` must be a live handle; `out` must be writable.
 */
enum DupnetStatus dupnet_srs(const struct DupnetCloud *cloud,
                             size_t r,
                             uint64_t seed,
                             struct DupnetCloud **out);

/**
 * # Safety
 * `a`, `b` must be live handles; `out` must be writable.
 */
enum DupnetStatus dupnet_distance(const struct DupnetCloud *a,
                                  const struct DupnetCloud *b,
                                  enum DupnetDistance kind,
                                  double *out);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum DupnetStatus dupnet_classifier_load(const char *path, struct DupnetClassifier **out);

/**
 * # Safety
 * `cls` must be null or a live handle.
 */
void dupnet_classifier_free(struct DupnetClassifier *cls);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `cls` must be null or a live handle.
 */
size_t dupnet_classifier_num_classes(const struct DupnetClassifier *cls);

/**
 * Predicted label; `logits` (optional) receives `capacity` >= C scores.
 *
 * # Safety
 * Handles must be live; `label` writable; `logits` null or `capacity` doubles.
 */
enum DupnetStatus dupnet_classifier_predict(const struct DupnetClassifier *cls,
                                            const struct DupnetCloud *cloud,
                                            size_t *label,
                                            double *logits,
                                            size_t capacity);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum DupnetStatus dupnet_upsampler_load(const char *path, struct DupnetUpsampler **out);

/**
 * # Safety
 * `up` must be null or a live handle.
 */
void dupnet_upsampler_free(struct DupnetUpsampler *up);

/**
 * Upsamples with the learned network when `up` is non-null, otherwise with
 * kNN edge midpoints at `rate` (ignored for the network).
 *
 * # Safety
 * `up` null or live; `cloud` live; `out` writable.
 */
enum DupnetStatus dupnet_upsample(const struct DupnetUpsampler *up,
                                  const struct DupnetCloud *cloud,
                                  size_t rate,
                                  struct DupnetCloud **out);

/**
 * Outlier removal followed by upsampling (learned when `up` is non-null).
 *
 * # Safety
 * `up` null or live; `cloud` live; `out` writable.
 */
enum DupnetStatus dupnet_dup(const struct DupnetUpsampler *up,
                             const struct DupnetCloud *cloud,
                             size_t k,
                             double alpha,
                             size_t rate,
                             struct DupnetCloud **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUPNET_H */

#ifndef DVPS_H
#define DVPS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum DvpsStatus {
  DVPS_STATUS_OK = 0,
  DVPS_STATUS_NULL_POINTER = 1,
  DVPS_STATUS_INVALID_UTF8 = 2,
  DVPS_STATUS_OUT_OF_RANGE = 3,
  DVPS_STATUS_BUFFER_TOO_SMALL = 4,
  DVPS_STATUS_CONFIG = 5,
  DVPS_STATUS_INVALID = 6,
  DVPS_STATUS_FORMAT = 7,
  DVPS_STATUS_INTEGRITY = 8,
  DVPS_STATUS_MISSING = 9,
  DVPS_STATUS_IO = 10,
  DVPS_STATUS_SHAPE = 11,
  DVPS_STATUS_NON_FINITE = 12,
  DVPS_STATUS_DIVERGENCE = 13,
  DVPS_STATUS_PANIC = 14,
} DvpsStatus;

typedef enum DvpsStage {
  DVPS_STAGE_PREMATCH = 0,
  DVPS_STAGE_TRACKER = 1,
  DVPS_STAGE_REFINER = 2,
} DvpsStage;

/**
 * Segmenter outputs, pixel features and ground truth of a set of videos.
 */
typedef struct DvpsDataset DvpsDataset;

/**
 * Trained stages for inference.
 */
typedef struct DvpsModels DvpsModels;

/**
 * Panoptic id maps of one video.
 */
typedef struct DvpsVideo DvpsVideo;

/**
 * Dataset-level scores. VPQ values are percentages, the rest fractions.
 */
typedef struct DvpsMetrics {
  double vpq1;
  double vpq2;
  double vpq4;
  double vpq6;
  double vpq;
  double stq;
  double association_accuracy;
} DvpsMetrics;

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library on this thread.
 */
const char *dvps_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dvps_version(void);

/**
 * Loads a dataset directory written by `dvps gen-data`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DvpsStatus dvps_dataset_open(const char *dir, struct DvpsDataset **out);

/**
 * Generates a synthetic dataset in memory. `config_json` holds a dataset
 * configuration (`num_videos`, `seed`, `scene`); NULL selects defaults.
 *
 * # Safety
 * `config_json` must be NULL or a NUL-terminated string; `out` must be valid.
 */
enum DvpsStatus dvps_dataset_generate(const char *config_json, struct DvpsDataset **out);

/**
 * Writes the dataset in the on-disk layout read by [`dvps_dataset_open`].
 *
 * # Safety
 * `dataset` must come from this library; `dir` must be NUL-terminated.
 */
enum DvpsStatus dvps_dataset_save(const struct DvpsDataset *dataset, const char *dir);

/**
 * Number of videos; 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or come from this library.
 */
size_t dvps_dataset_len(const struct DvpsDataset *dataset);

/**
 * Copy of the ground truth of video `index`.
 *
 * # Safety
 * `dataset` must come from this library and `out` be valid.
 */
enum DvpsStatus dvps_dataset_ground_truth(const struct DvpsDataset *dataset,
                                          size_t index,
                                          struct DvpsVideo **out);

/**
 * # Safety
 * `dataset` must be NULL or come from this library, and not be used again.
 */
void dvps_dataset_free(struct DvpsDataset *dataset);

/**
 * Loads the checkpoints `stage` needs: none for prematch, a tracker
 * checkpoint for tracker, a refiner checkpoint for refiner. Unused paths
 * may be NULL.
 *
 * # Safety
 * Paths must be NULL or NUL-terminated; `out` must be valid.
 */
enum DvpsStatus dvps_models_load(enum DvpsStage stage,
                                 const char *tracker_ckpt,
                                 const char *refiner_ckpt,
                                 struct DvpsModels **out);

/**
 * # Safety
 * `models` must be NULL or come from this library, and not be used again.
 */
void dvps_models_free(struct DvpsModels *models);

/**
 * Runs the loaded stage on video `index` and fuses a panoptic video.
 * `scales` lists resolution factors; NULL or an empty list means 1.0.
 *
 * # Safety
 * Handles must come from this library; `scales` must hold `num_scales`
 * values when non-NULL; `out` must be valid.
 */
enum DvpsStatus dvps_infer(const struct DvpsDataset *dataset,
                           size_t index,
                           const struct DvpsModels *models,
                           const double *scales,
                           size_t num_scales,
                           struct DvpsVideo **out);

/**
 * Reads a panoptic video directory (annotation plus frame maps).
 *
 * # Safety
 * `dir` must be NUL-terminated and `out` valid.
 */
enum DvpsStatus dvps_video_load(const char *dir, struct DvpsVideo **out);

/**
 * # Safety
 * `video` must come from this library; `dir` must be NUL-terminated.
 */
enum DvpsStatus dvps_video_save(const struct DvpsVideo *video, const char *dir);

/**
 * # Safety
 * `video` must be NULL or come from this library.
 */
size_t dvps_video_num_frames(const struct DvpsVideo *video);

/**
 * # Safety
 * `video` must be NULL or come from this library.
 */
size_t dvps_video_height(const struct DvpsVideo *video);

/**
 * # Safety
 * `video` must be NULL or come from this library.
 */
size_t dvps_video_width(const struct DvpsVideo *video);

/**
 * Copies frame `t` as row-major segment ids (0 is void) into `ids`, which
 * must hold at least height*width values.
 *
 * # Safety
 * `video` must come from this library; `ids` must point to `capacity`
 * writable values.
 */
enum DvpsStatus dvps_video_frame_ids(const struct DvpsVideo *video,
                                     size_t t,
                                     uint32_t *ids,
                                     size_t capacity);

/**
 * # Safety
 * `video` must be NULL or come from this library, and not be used again.
 */
void dvps_video_free(struct DvpsVideo *video);

/**
 * Scores `count` prediction/ground-truth pairs, pooling statistics over
 * all of them.
 *
 * # Safety
 * `predictions` and `ground_truth` must each point to `count` handles from
 * this library; `out` must be valid.
 */
enum DvpsStatus dvps_evaluate(const struct DvpsVideo *const *predictions,
                              const struct DvpsVideo *const *ground_truth,
                              size_t count,
                              struct DvpsMetrics *out);

/**
 * Mean of the four VPQ_k scores for k = 1, 2, 4, 6.
 *
 * # Safety
 * `scores` must point to 4 values and `out` be valid.
 */
enum DvpsStatus dvps_vpq_mean(const double *scores, double *out);

/**
 * Minimum-cost assignment of each of `rows` rows of the row-major `cost`
 * matrix to a distinct column (`rows <= cols`). Writes the column of each
 * row to `assignment` and the total to `total_cost` (which may be NULL).
 *
 * # Safety
 * `cost` must hold rows*cols values and `assignment` room for `rows`.
 */
enum DvpsStatus dvps_hungarian(const double *cost,
                               size_t rows,
                               size_t cols,
                               size_t *assignment,
                               double *total_cost);

#endif  /* DVPS_H */

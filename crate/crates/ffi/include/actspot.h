#ifndef ACTSPOT_H
#define ACTSPOT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum ActspotStatus {
  ACTSPOT_STATUS_OK = 0,
  ACTSPOT_STATUS_NULL_POINTER = 1,
  ACTSPOT_STATUS_INVALID_ARGUMENT = 2,
  ACTSPOT_STATUS_SHAPE_MISMATCH = 3,
  ACTSPOT_STATUS_FORMAT = 4,
  ACTSPOT_STATUS_IO = 5,
  ACTSPOT_STATUS_NUMERIC = 6,
  ACTSPOT_STATUS_BUFFER_TOO_SMALL = 7,
  ACTSPOT_STATUS_PANIC = 8,
} ActspotStatus;

/**
 * Loaded model plus its class vocabulary.
 */
typedef struct ActspotModel ActspotModel;

/**
 * Spots produced by [`actspot_spot_video`].
 */
typedef struct ActspotSpotList ActspotSpotList;

typedef struct ActspotModelInfo {
  /**
   * Feature dimension expected per frame.
   */
  size_t input_dim;
  /**
   * Frames in one classification window.
   */
  size_t window_frames;
  size_t action_classes;
  /**
   * Length of the score vector from [`actspot_model_predict_chunk`],
   * including the background unit when present.
   */
  size_t output_classes;
  double frame_rate;
} ActspotModelInfo;

typedef struct ActspotSpot {
  size_t class_index;
  uint64_t position_ms;
  double confidence;
} ActspotSpot;

typedef struct ActspotEvalSummary {
  double average_map;
  double visible_average_map;
  double unshown_average_map;
} ActspotEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *actspot_version(void);

/**
 * Message of the last failure on this thread, or NULL if there was none.
 * The pointer stays valid until the next failing call on this thread or
 * [`actspot_clear_last_error`].
 */
const char *actspot_last_error_message(void);

void actspot_clear_last_error(void);

/**
 * Loads a checkpoint written by `actspot train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ActspotStatus actspot_model_load(const char *path, struct ActspotModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`actspot_model_load`] and not be used afterwards.
 */
void actspot_model_free(struct ActspotModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a writable pointer.
 */
enum ActspotStatus actspot_model_info(const struct ActspotModel *model,
                                      struct ActspotModelInfo *out);

/**
 * Name of action class `index`, owned by the model handle. NULL when the
 * handle is NULL or the index is out of range.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
const char *actspot_model_class_name(const struct ActspotModel *model, size_t index);

/**
 * Scores one window of `frames x dim` row-major features into `scores`,
 * which must hold `output_classes` values.
 *
 * # Safety
 * `frames` must point to `frames_len * dim` readable values and `scores` to
 * `scores_len` writable values.
 */
enum ActspotStatus actspot_model_predict_chunk(const struct ActspotModel *model,
                                               const double *frames,
                                               size_t frames_len,
                                               size_t dim,
                                               double *scores,
                                               size_t scores_len);

/**
 * Dense inference plus NMS over a whole video of `frames x dim` features.
 * A NaN `threshold` keeps every spot.
 *
 * # Safety
 * `features` must point to `frames * dim` readable values and `out` must be
 * a writable pointer.
 */
enum ActspotStatus actspot_spot_video(const struct ActspotModel *model,
                                      const double *features,
                                      size_t frames,
                                      size_t dim,
                                      double frame_rate,
                                      double nms_window_s,
                                      double threshold,
                                      struct ActspotSpotList **out);

/**
 * Number of spots; 0 for NULL.
 *
 * # Safety
 * `list` must be NULL or a live handle.
 */
size_t actspot_spot_list_len(const struct ActspotSpotList *list);

/**
 * # Safety
 * `list` must be a live handle and `out` a writable pointer.
 */
enum ActspotStatus actspot_spot_list_get(const struct ActspotSpotList *list,
                                         size_t index,
                                         struct ActspotSpot *out);

/**
 * Releases a spot list. NULL is ignored.
 *
 * # Safety
 * `list` must come from [`actspot_spot_video`] and not be used afterwards.
 */
void actspot_spot_list_free(struct ActspotSpotList *list);

/**
 * Normalized NetVLAD descriptor of `frames x dim` features with `clusters`
 * clusters. `weights` and `centers` are `clusters x dim`, `biases` has
 * `clusters` values; a NULL `centers` gives NetRVLAD. `out` receives
 * `clusters * dim` values.
 *
 * # Safety
 * Every non-NULL pointer must reference the stated number of values.
 */
enum ActspotStatus actspot_netvlad_pool(const double *x,
                                        size_t frames,
                                        size_t dim,
                                        const double *weights,
                                        const double *biases,
                                        const double *centers,
                                        size_t clusters,
                                        double *out,
                                        size_t out_len);

/**
 * Scores predictions against ground truth over the standard 5..60 s
 * tolerances. `predictions` is a prediction file, a JSON array of such
 * files, or a directory of them; `truth_dir` holds `.labels.json` files.
 * A NULL `classes_json` means `classes.json` next to `truth_dir`.
 *
 * # Safety
 * String arguments must be NULL or NUL-terminated, `out` writable.
 */
enum ActspotStatus actspot_eval_files(const char *predictions,
                                      const char *truth_dir,
                                      const char *classes_json,
                                      struct ActspotEvalSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTSPOT_H */

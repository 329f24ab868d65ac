#ifndef ANCHORNET_H
#define ANCHORNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  AN_STATUS_OK = 0,
  AN_STATUS_NULL_POINTER = 1,
  AN_STATUS_INVALID_ARGUMENT = 2,
  AN_STATUS_SHAPE_MISMATCH = 3,
  AN_STATUS_RF_CONSTRAINT = 4,
  AN_STATUS_OUT_OF_GRID = 5,
  AN_STATUS_BUFFER_TOO_SMALL = 6,
  AN_STATUS_FORMAT = 7,
  AN_STATUS_IO = 8,
  AN_STATUS_THRESHOLDS = 9,
  AN_STATUS_INFEASIBLE_BUDGET = 10,
  AN_STATUS_INTERNAL = 11,
  AN_STATUS_PANIC = 12,
} AnStatus;

typedef struct AnAnchorNet AnAnchorNet;

typedef struct AnDownstream AnDownstream;

typedef struct AnPipeline AnPipeline;

typedef struct AnRfState AnRfState;

/**
 * A box in pixel coordinates.
 */
typedef struct {
  size_t top;
  size_t left;
  size_t height;
  size_t width;
} AnBox;

/**
 * Outcome of one sequential inference.
 */
typedef struct {
  size_t exit_stage;
  size_t predicted_class;
  double confidence;
  uint64_t flops_spent;
} AnTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a NUL
 * terminated string, truncating if needed. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to at least `capacity` writable bytes.
 */
size_t an_last_error(char *buf, size_t capacity);

/**
 * Builds the receptive-field state of a stack of padding-free layers.
 *
 * # Safety
 * `kernels` and `strides` must each hold `count` values; `out` must be valid.
 */
AnStatus an_rf_new(const size_t *kernels, const size_t *strides, size_t count, AnRfState **out);

/**
 * # Safety
 * `state` must come from [`an_rf_new`] and not be used afterwards.
 */
void an_rf_free(AnRfState *state);

/**
 * # Safety
 * Pointers must be valid.
 */
AnStatus an_rf_get(const AnRfState *state, size_t *rf, size_t *stride);

/**
 * # Safety
 * Pointers must be valid.
 */
AnStatus an_rf_num_locations(const AnRfState *state,
                             size_t height,
                             size_t width,
                             size_t *rows,
                             size_t *cols);

/**
 * # Safety
 * Pointers must be valid.
 */
AnStatus an_rf_map_location(const AnRfState *state,
                            size_t row,
                            size_t col,
                            size_t height,
                            size_t width,
                            AnBox *out);

/**
 * Intersection over union of two boxes; 0 when either pointer is null.
 *
 * # Safety
 * Non-null pointers must be valid.
 */
double an_iou(const AnBox *a, const AnBox *b);

/**
 * Greedy patch selection on a row-major `rows` x `cols` activation map.
 * Writes at most `capacity` boxes and stores how many were chosen in `count`.
 *
 * # Safety
 * `cam` must hold `rows * cols` values and `out` room for `capacity` boxes.
 */
AnStatus an_select_patches(const double *cam,
                           size_t rows,
                           size_t cols,
                           const AnRfState *state,
                           size_t height,
                           size_t width,
                           double iou_threshold,
                           size_t max_patches,
                           AnBox *out,
                           size_t capacity,
                           size_t *count);

/**
 * Loads a proposal network from a weight file.
 *
 * # Safety
 * `path` must be a NUL terminated string and `out` valid.
 */
AnStatus an_anchornet_load(const char *path_, AnAnchorNet **out);

/**
 * # Safety
 * `model` must come from [`an_anchornet_load`] and not be used afterwards.
 */
void an_anchornet_free(AnAnchorNet *model);

/**
 * # Safety
 * Pointers must be valid.
 */
AnStatus an_anchornet_num_classes(const AnAnchorNet *model, size_t *out);

/**
 * Class probabilities for one planar RGB image with values in [0, 1].
 *
 * # Safety
 * `pixels` must hold `3 * height * width` floats and `probs` `capacity` doubles.
 */
AnStatus an_anchornet_classify(const AnAnchorNet *model,
                               const float *pixels,
                               size_t height,
                               size_t width,
                               double *probs,
                               size_t capacity);

/**
 * Loads a downstream classifier from a weight file.
 *
 * # Safety
 * `path` must be a NUL terminated string and `out` valid.
 */
AnStatus an_downstream_load(const char *path_, AnDownstream **out);

/**
 * # Safety
 * `model` must come from [`an_downstream_load`] and not be used afterwards.
 */
void an_downstream_free(AnDownstream *model);

/**
 * # Safety
 * Same contract as [`an_anchornet_classify`].
 */
AnStatus an_downstream_classify(const AnDownstream *model,
                                const float *pixels,
                                size_t height,
                                size_t width,
                                double *probs,
                                size_t capacity);

/**
 * Loads the three networks of a sequential pipeline.
 *
 * # Safety
 * Paths must be NUL terminated strings and `out` valid.
 */
AnStatus an_pipeline_load(const char *anchornet,
                          const char *global,
                          const char *local,
                          double iou_threshold,
                          size_t max_patches,
                          AnPipeline **out);

/**
 * # Safety
 * `pipeline` must come from [`an_pipeline_load`] and not be used afterwards.
 */
void an_pipeline_free(AnPipeline *pipeline);

/**
 * Maximum sequence length, which is also the number of thresholds needed
 * minus one.
 *
 * # Safety
 * Pointers must be valid.
 */
AnStatus an_pipeline_stages(const AnPipeline *pipeline, size_t *out);

/**
 * Sequential inference with early exit. `thresholds` holds one value per
 * stage except the last.
 *
 * # Safety
 * `pixels` must hold `3 * height * width` floats, `thresholds` `count`
 * doubles, and `out` must be valid.
 */
AnStatus an_pipeline_infer(const AnPipeline *pipeline,
                           const float *pixels,
                           size_t height,
                           size_t width,
                           const double *thresholds,
                           size_t count,
                           AnTrace *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANCHORNET_H */

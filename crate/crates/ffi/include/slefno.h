#ifndef SLEFNO_H
#define SLEFNO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Task argument of [`slefno_predictor_run`] that asks the run's router to
// pick the task.
#define SLEFNO_ROUTE -1

// Written to `routed_task` when the router flags the input as unlike any
// known task; the prediction then comes from the nearest task.
#define SLEFNO_NOVEL -2

// Which half of a dataset to address.
typedef enum SlefnoSplit {
  SLEFNO_SPLIT_TRAIN = 0,
  SLEFNO_SPLIT_TEST = 1,
} SlefnoSplit;

typedef enum SlefnoStatus {
  SLEFNO_STATUS_OK = 0,
  SLEFNO_STATUS_NULL_POINTER = 1,
  SLEFNO_STATUS_INVALID_ARGUMENT = 2,
  SLEFNO_STATUS_IO = 3,
  SLEFNO_STATUS_FORMAT = 4,
  SLEFNO_STATUS_SHAPE = 5,
  SLEFNO_STATUS_NUMERIC = 6,
  SLEFNO_STATUS_PANIC = 7,
  SLEFNO_STATUS_INTERNAL = 8,
} SlefnoStatus;

typedef struct SlefnoDataset SlefnoDataset;

typedef struct SlefnoEvalMatrix SlefnoEvalMatrix;

typedef struct SlefnoPredictor SlefnoPredictor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *slefno_version(void);

// Copy the calling thread's last error message into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the length needed to hold
// the whole message including the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t slefno_last_error(char *buf, size_t len);

// Relative L2 error `‖pred − target‖ / ‖target‖` of two arrays of `len` values.
//
// # Safety
// `pred` and `target` must point to `len` readable values, `result` to one
// writable value.
enum SlefnoStatus slefno_rel_l2(const double *pred,
                                const double *target,
                                size_t len,
                                double *result);

// Accuracy `exp(−alpha·rel/l_max)` of a relative error.
//
// # Safety
// `result` must point to one writable value.
enum SlefnoStatus slefno_accuracy(double rel, double alpha, double l_max, double *result);

// Empty stage-by-task accuracy matrix for `tasks` tasks.
//
// # Safety
// `handle` must point to writable storage for one pointer.
enum SlefnoStatus slefno_eval_matrix_new(size_t tasks, struct SlefnoEvalMatrix **handle);

// Record the accuracy on `task` after training stage `stage` (`task ≤ stage`).
//
// # Safety
// `matrix` must be a live handle.
enum SlefnoStatus slefno_eval_matrix_set(struct SlefnoEvalMatrix *matrix,
                                         size_t stage,
                                         size_t task,
                                         double value);

// Mean accuracy over the tasks seen up to `stage`.
//
// # Safety
// `matrix` must be a live handle, `result` writable.
enum SlefnoStatus slefno_eval_matrix_avg_accuracy(const struct SlefnoEvalMatrix *matrix,
                                                  size_t stage,
                                                  double *result);

// Forgetting of each earlier task after `stage` (`stage` values written to
// `per_task`, which must hold at least `stage` entries) and their mean.
//
// # Safety
// `matrix` must be a live handle; `per_task` must point to `capacity`
// writable values and `mean` to one.
enum SlefnoStatus slefno_eval_matrix_forgetting(const struct SlefnoEvalMatrix *matrix,
                                                size_t stage,
                                                double *per_task,
                                                size_t capacity,
                                                double *mean);

// # Safety
// `matrix` must be null or a handle not yet freed.
void slefno_eval_matrix_free(struct SlefnoEvalMatrix *matrix);

// Load a dataset file written by `slefno taskgen`.
//
// # Safety
// `file` must be a NUL-terminated string, `handle` writable.
enum SlefnoStatus slefno_dataset_open(const char *file, struct SlefnoDataset **handle);

// Number of samples in one split.
//
// # Safety
// `dataset` must be a live handle, `count` writable.
enum SlefnoStatus slefno_dataset_len(const struct SlefnoDataset *dataset,
                                     enum SlefnoSplit split,
                                     size_t *count);

// Channel counts and grid size shared by every sample.
//
// # Safety
// `dataset` must be a live handle; the four outputs must be writable.
enum SlefnoStatus slefno_dataset_shape(const struct SlefnoDataset *dataset,
                                       size_t *input_channels,
                                       size_t *target_channels,
                                       size_t *height,
                                       size_t *width);

// Copy sample `index` of `split` into caller buffers (channel-major,
// row-major planes). Buffer lengths must match the sample exactly.
//
// # Safety
// `dataset` must be a live handle; `input` and `target` must point to
// `input_len` and `target_len` writable values.
enum SlefnoStatus slefno_dataset_sample(const struct SlefnoDataset *dataset,
                                        enum SlefnoSplit split,
                                        size_t index,
                                        double *input,
                                        size_t input_len,
                                        double *target,
                                        size_t target_len);

// # Safety
// `dataset` must be null or a handle not yet freed.
void slefno_dataset_free(struct SlefnoDataset *dataset);

// Open the latest checkpoint of a run directory.
//
// # Safety
// `run_dir` must be a NUL-terminated string, `handle` writable.
enum SlefnoStatus slefno_predictor_open(const char *run_dir, struct SlefnoPredictor **handle);

// Index of the last trained stage and the model's input/output channels.
//
// # Safety
// `predictor` must be a live handle; outputs must be writable.
enum SlefnoStatus slefno_predictor_info(const struct SlefnoPredictor *predictor,
                                        size_t *last_stage,
                                        size_t *input_channels,
                                        size_t *output_channels);

// Predict the output field for one `[channels, height, width]` input.
// `task` selects the task for task-aware methods; [`SLEFNO_ROUTE`] lets a
// routed run choose. The task actually used is written to `routed_task`
// (or [`SLEFNO_NOVEL`] when the router rejected the input).
//
// # Safety
// `predictor` must be a live handle; `input` must point to `input_len`
// readable values, `output` to `output_len` writable values; `routed_task`
// may be null.
enum SlefnoStatus slefno_predictor_run(const struct SlefnoPredictor *predictor,
                                       const double *input,
                                       size_t input_len,
                                       size_t height,
                                       size_t width,
                                       int64_t task,
                                       double *output,
                                       size_t output_len,
                                       int64_t *routed_task);

// # Safety
// `predictor` must be null or a handle not yet freed.
void slefno_predictor_free(struct SlefnoPredictor *predictor);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLEFNO_H */

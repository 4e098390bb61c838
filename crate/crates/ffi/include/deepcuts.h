#ifndef DEEPCUTS_H
#define DEEPCUTS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_ARGUMENT = 2,
  DC_STATUS_CONFIG = 3,
  DC_STATUS_DATA = 4,
  DC_STATUS_NUMERIC = 5,
  DC_STATUS_INFEASIBLE = 6,
  DC_STATUS_IO = 7,
  DC_STATUS_FORMAT = 8,
  DC_STATUS_CONSISTENCY = 9,
  DC_STATUS_INTERNAL = 10,
} DcStatus;

// Opaque pruning mask handle.
typedef struct DcMask DcMask;

// Opaque model handle.
typedef struct DcModel DcModel;

// Opaque importance-score handle.
typedef struct DcScores DcScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none.
// The pointer stays valid until the next failing call on the thread.
const char *dc_last_error(void);

// Library version as a static NUL-terminated string.
const char *dc_version(void);

// Kept fraction of prunable weights for a compression ratio.
//
// # Safety
// `out` must be writable.
enum DcStatus dc_kept_fraction(double ratio, uint64_t n_total, uint64_t n_prunable, double *out);

// Builds a freshly initialised model from run-config text (only the
// `task.*` and `model.*` keys matter).
//
// # Safety
// `config` must be a NUL-terminated string and `out` writable.
enum DcStatus dc_model_new(const char *config, uint64_t seed, struct DcModel **out);

// Loads a checkpoint written by `dc_model_save` or by a pipeline run.
//
// # Safety
// `file` must be a NUL-terminated string and `out` writable.
enum DcStatus dc_model_load(const char *file, struct DcModel **out);

// Writes the model as a checkpoint that `dc_model_load` can read.
//
// # Safety
// `model` must be a live handle and `file` a NUL-terminated string.
enum DcStatus dc_model_save(const struct DcModel *model, const char *file);

// Total and prunable parameter counts.
//
// # Safety
// `model` must be a live handle; the out pointers must be writable.
enum DcStatus dc_model_counts(const struct DcModel *model, uint64_t *n_total, uint64_t *n_prunable);

// Zeroes the weights the mask removes.
//
// # Safety
// Both handles must be live.
enum DcStatus dc_model_apply_mask(struct DcModel *model, const struct DcMask *mask);

// # Safety
// `model` must be null or a handle not yet freed.
void dc_model_free(struct DcModel *model);

// Reads a mask file.
//
// # Safety
// `file` must be a NUL-terminated string and `out` writable.
enum DcStatus dc_mask_read(const char *file, struct DcMask **out);

// # Safety
// `mask` must be a live handle and `file` a NUL-terminated string.
enum DcStatus dc_mask_write(const struct DcMask *mask, const char *file);

// Kept and total element counts over every masked tensor.
//
// # Safety
// `mask` must be a live handle; the out pointers must be writable.
enum DcStatus dc_mask_counts(const struct DcMask *mask, uint64_t *kept, uint64_t *total);

// Mean and minimum per-tensor intersection-over-union of two masks.
//
// # Safety
// Both handles must be live; the out pointers must be writable.
enum DcStatus dc_mask_iou(const struct DcMask *a,
                          const struct DcMask *b,
                          double *mean_iou,
                          double *min_iou);

// # Safety
// `mask` must be null or a handle not yet freed.
void dc_mask_free(struct DcMask *mask);

// Reads an importance-score file.
//
// # Safety
// `file` must be a NUL-terminated string and `out` writable.
enum DcStatus dc_scores_read(const char *file, struct DcScores **out);

// Builds the mask the scoring strategy prescribes at `ratio`.
//
// # Safety
// `scores` must be a live handle and `out` writable.
enum DcStatus dc_scores_build_mask(const struct DcScores *scores,
                                   double ratio,
                                   struct DcMask **out);

// # Safety
// `scores` must be null or a handle not yet freed.
void dc_scores_free(struct DcScores *scores);

// Runs the full sweep described by a config file. `out_dir` may be null
// to keep the config's own output directory.
//
// # Safety
// `config_path` must be a NUL-terminated string; `out_dir` null or one.
enum DcStatus dc_run(const char *config_path, const char *out_dir, uint32_t jobs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEPCUTS_H */

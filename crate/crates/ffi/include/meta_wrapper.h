#ifndef META_WRAPPER_H
#define META_WRAPPER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MwStatus {
  MW_STATUS_OK = 0,
  MW_STATUS_NULL_POINTER = 1,
  MW_STATUS_INVALID_ARGUMENT = 2,
  MW_STATUS_CONFIG = 3,
  MW_STATUS_IO = 4,
  MW_STATUS_NUMERICAL = 5,
  MW_STATUS_PANIC = 6,
} MwStatus;

typedef enum MwSplit {
  MW_SPLIT_TRAIN = 0,
  MW_SPLIT_VALID = 1,
  MW_SPLIT_TEST = 2,
} MwSplit;

/**
 * A split dataset.
 */
typedef struct MwDataset MwDataset;

/**
 * Trained parameters together with the configuration that produced them.
 */
typedef struct MwModel MwModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mw_last_error(void);

/**
 * Library version as a static string.
 */
const char *mw_version(void);

/**
 * Generate the synthetic benchmark. `config_toml` holds the fields of the
 * synthetic generator (NULL or "" for defaults).
 *
 * # Safety
 * `config_toml` is NULL or a NUL-terminated string; `out` is a valid pointer.
 */
enum MwStatus mw_dataset_synthetic(const char *config_toml, uint64_t seed, struct MwDataset **out);

/**
 * Read an instance file as written by the `synth` and `prepare` commands.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is a valid pointer.
 */
enum MwStatus mw_dataset_load(const char *path, struct MwDataset **out);

/**
 * Number of instances in a split.
 *
 * # Safety
 * `dataset` and `out` are valid pointers.
 */
enum MwStatus mw_dataset_len(const struct MwDataset *dataset, enum MwSplit split, size_t *out);

/**
 * # Safety
 * `dataset` is NULL or a handle from this library, not yet freed.
 */
void mw_dataset_free(struct MwDataset *dataset);

/**
 * Train on `dataset` with the `model` and `train` sections of a run config
 * (NULL or "" for defaults).
 *
 * # Safety
 * `dataset` is a live handle, `config_toml` is NULL or NUL-terminated and
 * `out` is a valid pointer.
 */
enum MwStatus mw_train(const struct MwDataset *dataset,
                       const char *config_toml,
                       struct MwModel **out);

/**
 * Click probabilities for every instance of a split; `len` must equal the
 * split size.
 *
 * # Safety
 * `model` and `dataset` are live handles and `out` points to `len` doubles.
 */
enum MwStatus mw_predict(const struct MwModel *model,
                         const struct MwDataset *dataset,
                         enum MwSplit split,
                         double *out,
                         size_t len);

/**
 * Mean cross-entropy and AUC of a split. `auc_out` receives NaN when the
 * split holds a single class.
 *
 * # Safety
 * `model` and `dataset` are live handles; the outputs are valid pointers.
 */
enum MwStatus mw_evaluate(const struct MwModel *model,
                          const struct MwDataset *dataset,
                          enum MwSplit split,
                          double *loss_out,
                          double *auc_out);

/**
 * # Safety
 * `model` is a live handle and `path` is NUL-terminated.
 */
enum MwStatus mw_model_save(const struct MwModel *model, const char *path);

/**
 * Load a checkpoint. The run config (NULL or "" for defaults) supplies the
 * method and pooling used for prediction.
 *
 * # Safety
 * `path` is NUL-terminated, `config_toml` is NULL or NUL-terminated and
 * `out` is a valid pointer.
 */
enum MwStatus mw_model_load(const char *path, const char *config_toml, struct MwModel **out);

/**
 * # Safety
 * `model` is NULL or a handle from this library, not yet freed.
 */
void mw_model_free(struct MwModel *model);

/**
 * Area under the ROC curve; labels are 0 or 1.
 *
 * # Safety
 * `scores` and `labels` point to `n` elements; `out` is a valid pointer.
 */
enum MwStatus mw_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Relative AUC improvement over a base model, in percent.
 *
 * # Safety
 * `out` is a valid pointer.
 */
enum MwStatus mw_impr(double auc_model, double auc_base, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* META_WRAPPER_H */

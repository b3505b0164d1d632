#ifndef BOTDGT_H
#define BOTDGT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define BOTDGT_SPLIT_TRAIN 0

#define BOTDGT_SPLIT_VAL 1

#define BOTDGT_SPLIT_TEST 2

typedef enum BotdgtStatus {
  BOTDGT_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, out-of-range value or undersized buffer.
   */
  BOTDGT_STATUS_INVALID_ARGUMENT = 1,
  BOTDGT_STATUS_IO = 2,
  /**
   * Malformed input files or an inconsistent configuration.
   */
  BOTDGT_STATUS_VALIDATION = 3,
  /**
   * Training loss became non-finite.
   */
  BOTDGT_STATUS_DIVERGENCE = 4,
  /**
   * Internal panic; the handle involved should not be reused.
   */
  BOTDGT_STATUS_PANIC = 5,
} BotdgtStatus;

/**
 * A loaded or generated dataset.
 */
typedef struct BotdgtDataset BotdgtDataset;

/**
 * Trained parameters plus the configuration needed to rebuild the model.
 */
typedef struct BotdgtModel BotdgtModel;

/**
 * Training settings. Flags are 0 or 1.
 */
typedef struct BotdgtTrainOptions {
  size_t epochs;
  double learning_rate;
  double weight_decay;
  size_t hidden_dim;
  size_t structural_layers;
  size_t structural_heads;
  size_t temporal_heads;
  size_t classifier_hidden;
  size_t num_buckets;
  uint64_t seed;
  uint8_t residual;
  uint8_t no_temporal;
  uint8_t no_snapshot_embedding;
  uint8_t no_lcc_embedding;
  uint8_t no_blr_embedding;
} BotdgtTrainOptions;

typedef struct BotdgtMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
  size_t true_positives;
  size_t false_positives;
  size_t true_negatives;
  size_t false_negatives;
} BotdgtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *botdgt_version(void);

/**
 * Message for the last failed call on this thread, or null after a success.
 * Valid until the next call on this thread.
 */
const char *botdgt_last_error_message(void);

/**
 * Loads the dataset described by the manifest at `manifest_path`.
 *
 * # Safety
 * `manifest_path` must be a NUL-terminated string and `out` writable.
 */
enum BotdgtStatus botdgt_dataset_load(const char *manifest_path, struct BotdgtDataset **out);

/**
 * Generates a synthetic dataset with the default community structure.
 *
 * # Safety
 * `out` must be writable.
 */
enum BotdgtStatus botdgt_dataset_synth(size_t humans,
                                       size_t bots,
                                       size_t snapshots,
                                       uint8_t camouflage,
                                       uint64_t seed,
                                       struct BotdgtDataset **out);

/**
 * Number of nodes in the dataset, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t botdgt_dataset_num_nodes(const struct BotdgtDataset *ds);

/**
 * Writes the dataset files and `manifest.txt` into `dir`.
 *
 * # Safety
 * `ds` must be a live dataset handle and `dir` a NUL-terminated string.
 */
enum BotdgtStatus botdgt_dataset_export(const struct BotdgtDataset *ds, const char *dir);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void botdgt_dataset_free(struct BotdgtDataset *ds);

/**
 * Defaults matching the command-line tool.
 */
struct BotdgtTrainOptions botdgt_train_options_default(void);

/**
 * Trains on the dataset's train split, keeping the parameters with the best
 * validation F1.
 *
 * # Safety
 * `ds` must be a live dataset handle, `opts` readable and `out` writable.
 */
enum BotdgtStatus botdgt_model_train(const struct BotdgtDataset *ds,
                                     const struct BotdgtTrainOptions *opts,
                                     struct BotdgtModel **out);

/**
 * Writes the bot probability at the final snapshot for every node into
 * `out_p_bot`, which must hold `len >= num_nodes` values.
 *
 * # Safety
 * Handles must be live and `out_p_bot` writable for `len` doubles.
 */
enum BotdgtStatus botdgt_model_predict(const struct BotdgtModel *model,
                                       const struct BotdgtDataset *ds,
                                       double *out_p_bot,
                                       size_t len);

/**
 * Final-snapshot metrics over the labeled nodes of `split`.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum BotdgtStatus botdgt_model_evaluate(const struct BotdgtModel *model,
                                        const struct BotdgtDataset *ds,
                                        int split,
                                        struct BotdgtMetrics *out);

/**
 * Writes `checkpoint.bin` and `model.json` into `dir`, the layout the
 * command-line `eval` reads.
 *
 * # Safety
 * `model` must be a live handle and `dir` a NUL-terminated string.
 */
enum BotdgtStatus botdgt_model_save(const struct BotdgtModel *model, const char *dir);

/**
 * Loads a model from a training output directory or a checkpoint inside it.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum BotdgtStatus botdgt_model_load(const char *path, struct BotdgtModel **out);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t botdgt_model_num_parameters(const struct BotdgtModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void botdgt_model_free(struct BotdgtModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BOTDGT_H */

#ifndef AICL_H
#define AICL_H

/* Generated with cbindgen:0.27.0 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  AICL_HEURISTIC_MAX_CONFIDENCE = 0,
  AICL_HEURISTIC_SMALLEST_INDEX = 1,
} AiclHeuristic;

typedef enum {
  AICL_POSTERIOR_SOURCE_LOGPROBS = 0,
  AICL_POSTERIOR_SOURCE_SURFACE_MATCH = 1,
  AICL_POSTERIOR_SOURCE_NO_VERBALISER_MATCH = 2,
} AiclPosteriorSource;

typedef enum {
  AICL_STATUS_OK = 0,
  AICL_STATUS_NULL_POINTER = 1,
  AICL_STATUS_INVALID_ARGUMENT = 2,
  AICL_STATUS_IO = 3,
  AICL_STATUS_FORMAT = 4,
  AICL_STATUS_DIMENSION_MISMATCH = 5,
  AICL_STATUS_NOT_FOUND = 6,
  AICL_STATUS_PANIC = 7,
} AiclStatus;

typedef struct AiclIndex AiclIndex;

typedef struct AiclModel AiclModel;

typedef struct AiclNeighborhood AiclNeighborhood;

typedef struct AiclTask AiclTask;

typedef struct {
  uint64_t b;
  uint64_t c;
  double statistic;
  double p_value;
  bool exact;
  bool significant;
} AiclMcNemar;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *aicl_last_error(void);

const char *aicl_version(void);

/**
 * Cosine similarity of two vectors of length `dim`.
 *
 * # Safety
 * `a` and `b` must point to `dim` floats; `out` must be writable.
 */
AiclStatus aicl_cosine(const float *a, const float *b, size_t dim, double *out);

/**
 * Loads an embedding file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
AiclStatus aicl_index_load(const char *path, AiclIndex **out);

/**
 * Builds an index from `n` ids and an `n x dim` row-major matrix.
 *
 * # Safety
 * `ids` must hold `n` NUL-terminated strings and `data` `n * dim` floats.
 */
AiclStatus aicl_index_from_vectors(const char *const *ids,
                                   const float *data,
                                   size_t n,
                                   size_t dim,
                                   AiclIndex **out);

/**
 * # Safety
 * `index` must come from `aicl_index_load` or `aicl_index_from_vectors`.
 */
size_t aicl_index_len(const AiclIndex *index);

/**
 * # Safety
 * As for [`aicl_index_len`].
 */
size_t aicl_index_dim(const AiclIndex *index);

/**
 * The `m` stored vectors most similar to `query`, most similar first, ties
 * broken by id. `exclude` may be NULL.
 *
 * # Safety
 * `index` must be a live handle, `query` must point to `dim` floats and
 * `exclude` must be NULL or NUL-terminated.
 */
AiclStatus aicl_index_top_m(const AiclIndex *index,
                            const float *query,
                            size_t dim,
                            size_t m,
                            const char *exclude,
                            AiclNeighborhood **out);

/**
 * # Safety
 * `index` must be NULL or a handle not yet freed.
 */
void aicl_index_free(AiclIndex *index);

/**
 * # Safety
 * `nb` must be a live neighborhood handle.
 */
size_t aicl_neighborhood_len(const AiclNeighborhood *nb);

/**
 * Id of entry `i`, or NULL when out of range. Owned by the neighborhood.
 *
 * # Safety
 * `nb` must be a live neighborhood handle.
 */
const char *aicl_neighborhood_id(const AiclNeighborhood *nb, size_t i);

/**
 * Similarity of entry `i`, or NaN when out of range.
 *
 * # Safety
 * `nb` must be a live neighborhood handle.
 */
double aicl_neighborhood_similarity(const AiclNeighborhood *nb, size_t i);

/**
 * # Safety
 * `nb` must be NULL or a handle not yet freed.
 */
void aicl_neighborhood_free(AiclNeighborhood *nb);

/**
 * Loads a trained shot-count predictor.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
AiclStatus aicl_model_load(const char *path, AiclModel **out);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t aicl_model_input_dim(const AiclModel *model);

/**
 * Number of shot counts scored, `M + 1`.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t aicl_model_output_dim(const AiclModel *model);

/**
 * Chooses a shot count for one feature vector. `posteriors` may be NULL;
 * otherwise it receives `aicl_model_output_dim` values.
 *
 * # Safety
 * `features` must point to `len` doubles and `posteriors`, when non-NULL,
 * must have room for the model's output dimension.
 */
AiclStatus aicl_predict_k(const AiclModel *model,
                          const double *features,
                          size_t len,
                          AiclHeuristic heuristic,
                          size_t *out_k,
                          double *posteriors);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void aicl_model_free(AiclModel *model);

/**
 * Loads and validates a task definition (TOML).
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
AiclStatus aicl_task_load(const char *path, AiclTask **out);

/**
 * # Safety
 * `task` must be a live handle.
 */
size_t aicl_task_num_classes(const AiclTask *task);

/**
 * # Safety
 * `task` must be NULL or a handle not yet freed.
 */
void aicl_task_free(AiclTask *task);

/**
 * Class posterior for a generation: `n_tokens` first-token candidates with
 * their log-probabilities (may be zero), plus the generated text as a
 * fallback. Writes `aicl_task_num_classes` probabilities to `out_probs`.
 *
 * # Safety
 * `text` must be NUL-terminated, `tokens` and `logprobs` must hold
 * `n_tokens` entries, `out_probs` must have room for every class.
 */
AiclStatus aicl_extract_posterior(const AiclTask *task,
                                  const char *text,
                                  const char *const *tokens,
                                  const double *logprobs,
                                  size_t n_tokens,
                                  double *out_probs,
                                  AiclPosteriorSource *out_source);

/**
 * McNemar's test from the discordant counts.
 *
 * # Safety
 * `out` must be writable.
 */
AiclStatus aicl_mcnemar(uint64_t b, uint64_t c, AiclMcNemar *out);

/**
 * Macro-averaged precision, recall and F1 over `num_classes` classes.
 * Class ids outside `0..num_classes` in `pred` mark failed predictions.
 *
 * # Safety
 * `gold` and `pred` must hold `n` entries; the out pointers must be
 * writable.
 */
AiclStatus aicl_macro_f1(const uint32_t *gold,
                         const uint32_t *pred,
                         size_t n,
                         size_t num_classes,
                         double *out_precision,
                         double *out_recall,
                         double *out_f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AICL_H */

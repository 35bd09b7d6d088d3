#ifndef RAGMETA_H
#define RAGMETA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum RagPooling {
  RAG_POOLING_MEAN = 0,
  RAG_POOLING_MAX = 1,
} RagPooling;

typedef enum RagStatus {
  RAG_STATUS_OK = 0,
  // A required pointer argument was NULL.
  RAG_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  RAG_STATUS_INVALID_UTF8 = 2,
  RAG_STATUS_INVALID_ARGUMENT = 3,
  // The output buffer is smaller than the result; the needed size was written.
  RAG_STATUS_BUFFER_TOO_SMALL = 4,
  RAG_STATUS_IO = 5,
  // A file or record could not be parsed.
  RAG_STATUS_PARSE = 6,
  RAG_STATUS_CONFIG = 7,
  RAG_STATUS_SHAPE = 8,
  // A Rust panic was caught at the boundary.
  RAG_STATUS_PANIC = 9,
  RAG_STATUS_INTERNAL = 10,
} RagStatus;

// A trained checkpoint together with its vocabulary and retriever.
typedef struct RagClassifier RagClassifier;

// A passage index file opened for top-m search.
typedef struct RagIndex RagIndex;

// Labeled support sentences. Class `i` is the `i`-th distinct label in
// byte-wise sorted order.
typedef struct RagSupport RagSupport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rag_version(void);

// Message of the last failed call on this thread, or NULL if none failed.
// Valid until the next failing call on this thread.
const char *rag_last_error(void);

// Opens an index file written by `build-index`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum RagStatus rag_index_load(const char *path, struct RagIndex **out);

// Number of indexed passages; 0 for NULL.
//
// # Safety
// `index` must be NULL or a live handle.
size_t rag_index_len(const struct RagIndex *index);

// Vector width; 0 for NULL.
//
// # Safety
// `index` must be NULL or a live handle.
size_t rag_index_dim(const struct RagIndex *index);

// Top-`m` passages by inner product with `query`, best first, ties broken
// by lower passage id. `out_ids` and `out_scores` must hold `m` entries;
// the number written goes to `out_count`.
//
// # Safety
// `query` must point to `dim` doubles; the output arrays to `m` slots each.
enum RagStatus rag_index_top_m(const struct RagIndex *index,
                               const double *query,
                               size_t dim,
                               size_t m,
                               uint64_t *out_ids,
                               double *out_scores,
                               size_t *out_count);

// # Safety
// `index` must be NULL or a handle not yet freed.
void rag_index_free(struct RagIndex *index);

// Builds a support set from `count` parallel label and text strings.
//
// # Safety
// `labels` and `texts` must each point to `count` NUL-terminated strings.
enum RagStatus rag_support_new(const char *const *labels,
                               const char *const *texts,
                               size_t count,
                               struct RagSupport **out);

// Number of distinct labels; 0 for NULL.
//
// # Safety
// `support` must be NULL or a live handle.
size_t rag_support_num_classes(const struct RagSupport *support);

// Label of class `class`, owned by the handle; NULL when out of range.
//
// # Safety
// `support` must be NULL or a live handle.
const char *rag_support_label(const struct RagSupport *support, size_t class_);

// # Safety
// `support` must be NULL or a handle not yet freed.
void rag_support_free(struct RagSupport *support);

// Opens a work directory prepared by `ingest` and `build-index` together
// with a checkpoint written by `train`. A NULL `model_dir` means
// `<work_dir>/model-fusion`.
//
// # Safety
// String arguments must be NUL-terminated (`model_dir` may be NULL);
// `out` must be writable.
enum RagStatus rag_classifier_open(const char *work_dir,
                                   const char *model_dir,
                                   struct RagClassifier **out);

// Passages retrieved per query; 0 for NULL.
//
// # Safety
// `classifier` must be NULL or a live handle.
size_t rag_classifier_passages(const struct RagClassifier *classifier);

// Class probabilities of `query` against the prototypes of `support`, in
// support class order. Writes the class count to `out_num_classes` and
// fails with `BufferTooSmall` when `capacity` is below it.
//
// # Safety
// `query` must be NUL-terminated; `out_probs` must hold `capacity` doubles.
enum RagStatus rag_classify(const struct RagClassifier *classifier,
                            const struct RagSupport *support,
                            const char *query,
                            double *out_probs,
                            size_t capacity,
                            size_t *out_num_classes);

// # Safety
// `classifier` must be NULL or a handle not yet freed.
void rag_classifier_free(struct RagClassifier *classifier);

// Pools a row-major `views x classes` score matrix into `classes` scores.
//
// # Safety
// `scores` must hold `views * classes` doubles and `out` `classes`.
enum RagStatus rag_pool_scores(const double *scores,
                               size_t views,
                               size_t classes,
                               enum RagPooling strategy,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAGMETA_H */

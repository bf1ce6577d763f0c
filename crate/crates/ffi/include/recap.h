#ifndef RECAP_H
#define RECAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RecapPolicy {
  RECAP_POLICY_TOP5 = 0,
  RECAP_POLICY_FREE_THRESHOLD = 1,
  RECAP_POLICY_CLOSEST5 = 2,
} RecapPolicy;

typedef enum RecapStatus {
  RECAP_STATUS_OK = 0,
  RECAP_STATUS_NULL_POINTER = 1,
  RECAP_STATUS_INVALID_UTF8 = 2,
  RECAP_STATUS_INVALID_ARGUMENT = 3,
  RECAP_STATUS_IO = 4,
  RECAP_STATUS_PARSE = 5,
  RECAP_STATUS_OUT_OF_RANGE = 6,
  RECAP_STATUS_BUFFER_TOO_SMALL = 7,
  RECAP_STATUS_PANIC = 8,
} RecapStatus;

/**
 * Hashed bag-of-words embedder.
 */
typedef struct RecapEmbedder RecapEmbedder;

/**
 * Loaded target instances.
 */
typedef struct RecapInstanceSet RecapInstanceSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t recap_last_error_message(char *buf, size_t cap);

/**
 * Library version, static NUL-terminated string.
 */
const char *recap_version(void);

/**
 * Loads instance JSONL.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RecapStatus recap_instances_load(const char *path, struct RecapInstanceSet **out);

/**
 * # Safety
 * `set` must come from [`recap_instances_load`] and not be used afterwards.
 */
void recap_instances_free(struct RecapInstanceSet *set);

/**
 * Number of instances; 0 for a null handle.
 *
 * # Safety
 * `set` must be null or a live handle.
 */
size_t recap_instances_len(const struct RecapInstanceSet *set);

/**
 * Gold candidate indices of one instance.
 *
 * # Safety
 * `set` live; `out` valid for `cap` entries; `out_len` writable.
 */
enum RecapStatus recap_instance_gold(const struct RecapInstanceSet *set,
                                     size_t index,
                                     size_t *out,
                                     size_t cap,
                                     size_t *out_len);

/**
 * The `k` nearest candidates of one instance.
 *
 * # Safety
 * As [`recap_instance_gold`].
 */
enum RecapStatus recap_closest_k(const struct RecapInstanceSet *set,
                                 size_t index,
                                 size_t k,
                                 size_t *out,
                                 size_t cap,
                                 size_t *out_len);

/**
 * Selection from 60 scores. `-inf` marks inadmissible candidates.
 * `threshold` is read only for the free-threshold policy.
 *
 * # Safety
 * `scores` valid for `n` doubles; `out` valid for `cap` entries.
 */
enum RecapStatus recap_select(const double *scores,
                              size_t n,
                              enum RecapPolicy policy,
                              double threshold,
                              size_t *out,
                              size_t cap,
                              size_t *out_len);

/**
 * Ranks one instance with a hashed bag-of-words embedder and writes the top 5.
 *
 * # Safety
 * Handles live; buffers as in [`recap_instance_gold`].
 */
enum RecapStatus recap_rank_hashbag(const struct RecapInstanceSet *set,
                                    size_t index,
                                    const struct RecapEmbedder *embedder,
                                    size_t *out,
                                    size_t cap,
                                    size_t *out_len);

/**
 * # Safety
 * `out` must be writable.
 */
enum RecapStatus recap_hashbag_new(size_t dim, struct RecapEmbedder **out);

/**
 * # Safety
 * `e` must come from [`recap_hashbag_new`] and not be used afterwards.
 */
void recap_hashbag_free(struct RecapEmbedder *e);

/**
 * Per-target R@5 and P@5 in percent.
 *
 * # Safety
 * Arrays valid for their lengths; outputs writable.
 */
enum RecapStatus recap_at5(const size_t *selected,
                           size_t n_selected,
                           const size_t *gold,
                           size_t n_gold,
                           double *out_recall,
                           double *out_precision);

/**
 * Harmonic mean; 0 when both inputs are 0.
 */
double recap_f1(double recall, double precision);

/**
 * Class weights for counts (or rates) `n0`, `n1` and exponent `alpha`.
 *
 * # Safety
 * Outputs writable.
 */
enum RecapStatus recap_class_weights(double n0,
                                     double n1,
                                     double alpha,
                                     double *out_w0,
                                     double *out_w1);

/**
 * Overlap of two inclusive spans over the shorter one.
 */
double recap_overlap_rate(size_t a_start, size_t a_end, size_t b_start, size_t b_end);

/**
 * Fleiss' kappa of an annotation file (CSV or JSONL).
 *
 * # Safety
 * `path` NUL-terminated; `out_kappa` writable.
 */
enum RecapStatus recap_fleiss_kappa_file(const char *path, double *out_kappa);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECAP_H */

#ifndef SPKXL_H
#define SPKXL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpkxlStatus {
  SPKXL_STATUS_OK = 0,
  SPKXL_STATUS_NULL_POINTER = 1,
  SPKXL_STATUS_INVALID_ARGUMENT = 2,
  SPKXL_STATUS_IO = 3,
  SPKXL_STATUS_CHECKPOINT = 4,
  SPKXL_STATUS_OUT_OF_RANGE = 5,
  SPKXL_STATUS_RUNTIME = 6,
  SPKXL_STATUS_PANIC = 7,
} SpkxlStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct SpkxlModel SpkxlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *spkxl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *spkxl_version(void);

/**
 * Loads a checkpoint written by `spkxl train` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpkxlStatus spkxl_model_load(const char *path, struct SpkxlModel **out);

/**
 * Releases a handle from [`spkxl_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`spkxl_model_load`] and not be used afterwards.
 */
void spkxl_model_free(struct SpkxlModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum SpkxlStatus spkxl_model_num_labels(const struct SpkxlModel *model, size_t *out);

/**
 * Name of label `index`; the string lives as long as the model.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum SpkxlStatus spkxl_model_label_name(const struct SpkxlModel *model,
                                        size_t index,
                                        const char **out);

/**
 * Vocabulary id of `token` (the unknown-token id when absent).
 *
 * # Safety
 * `model` and `out` must be valid pointers; `token` NUL-terminated.
 */
enum SpkxlStatus spkxl_model_token_id(const struct SpkxlModel *model,
                                      const char *token,
                                      uint32_t *out);

/**
 * Classification logits for one encoded sequence of `len` positions.
 *
 * The sequence is laid out as produced by `spkxl encode`; the last `[CLS]`
 * id marks the read-out position. `out_logits` must hold `out_len` values,
 * at least the number of labels.
 *
 * # Safety
 * The three id arrays must hold `len` values and `out_logits` `out_len`.
 */
enum SpkxlStatus spkxl_model_logits(const struct SpkxlModel *model,
                                    const uint32_t *token_ids,
                                    const uint32_t *segment_ids,
                                    const uint32_t *speaker_ids,
                                    size_t len,
                                    double *out_logits,
                                    size_t out_len);

/**
 * Same-speaker indicator of two speaker ids: 1 when equal, 0 otherwise.
 */
uint32_t spkxl_relative_index(uint32_t a, uint32_t b);

/**
 * Runs the full-model finite-difference audit for `seed` and stores the
 * largest relative error in `*out`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SpkxlStatus spkxl_gradcheck(uint64_t seed, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPKXL_H */

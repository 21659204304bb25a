#ifndef SSM_PRUNE_H
#define SSM_PRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum SsmStatus {
  SSM_STATUS_OK = 0,
  SSM_STATUS_NULL_POINTER = 1,
  SSM_STATUS_INVALID_ARGUMENT = 2,
  SSM_STATUS_IO = 3,
  SSM_STATUS_CHECKPOINT = 4,
  SSM_STATUS_CONFIG = 5,
  SSM_STATUS_SHAPE = 6,
  SSM_STATUS_OUT_OF_RANGE = 7,
  SSM_STATUS_NON_FINITE = 8,
  SSM_STATUS_BUFFER_TOO_SMALL = 9,
  SSM_STATUS_INTERNAL = 10,
} SsmStatus;

typedef enum SsmCriterion {
  SSM_CRITERION_INFLUENCE = 0,
  SSM_CRITERION_UNIFORM = 1,
  SSM_CRITERION_RANDOM = 2,
} SsmCriterion;

typedef enum SsmAggregator {
  SSM_AGGREGATOR_MAX = 0,
  SSM_AGGREGATOR_L2 = 1,
} SsmAggregator;

/**
 * Opaque model handle.
 */
typedef struct SsmModel SsmModel;

/**
 * Opaque result of one forward pass.
 */
typedef struct SsmRecord SsmRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next failing
 * call on the same thread.
 */
const char *ssm_last_error(void);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum SsmStatus ssm_model_load(const char *path, struct SsmModel **out);

/**
 * Randomly initialized model; `dt_rank = 0` picks `ceil(d_model / 16)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SsmStatus ssm_model_init(size_t n_layers,
                              size_t d_model,
                              size_t expand,
                              size_t d_state,
                              size_t d_conv,
                              size_t vocab_size,
                              size_t dt_rank,
                              uint64_t seed,
                              struct SsmModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be nul-terminated.
 */
enum SsmStatus ssm_model_save(const struct SsmModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void ssm_model_free(struct SsmModel *model);

/**
 * Writes `n_layers, d_model, d_inner, d_state, d_conv, vocab_size` to `out[0..6]`.
 *
 * # Safety
 * `out` must hold 6 values.
 */
enum SsmStatus ssm_model_dims(const struct SsmModel *model, size_t *out);

/**
 * Keep counts of the linear schedule, one per layer, into `out[..cap]`.
 *
 * # Safety
 * `out` must hold `cap` values; `out_len` may be null.
 */
enum SsmStatus ssm_linear_schedule(size_t seq_len,
                                   size_t n_layers,
                                   double ratio,
                                   size_t protected_count,
                                   size_t *out,
                                   size_t cap,
                                   size_t *out_len);

/**
 * Forward pass with a linear schedule ending at `ratio` (`1.0` runs the dense path).
 * `crit` and `agg` take `SsmCriterion` and `SsmAggregator` values.
 * The last position is the score target and always survives.
 *
 * # Safety
 * `ids` must hold `len` values and `out` must be a valid pointer.
 */
enum SsmStatus ssm_forward(const struct SsmModel *model,
                           const uint32_t *ids,
                           size_t len,
                           uint32_t crit,
                           uint32_t agg,
                           double ratio,
                           uint64_t seed,
                           struct SsmRecord **out);

/**
 * # Safety
 * `record` must come from this library and not be used afterwards. Null is ignored.
 */
void ssm_record_free(struct SsmRecord *record);

/**
 * Original positions entering block `layer` (`layer == n_layers` gives those reaching
 * the head).
 *
 * # Safety
 * `out` must hold `cap` values; `out_len` may be null.
 */
enum SsmStatus ssm_record_active(const struct SsmRecord *record,
                                 size_t layer,
                                 size_t *out,
                                 size_t cap,
                                 size_t *out_len);

/**
 * Logits at original position `pos`, `vocab_size` values.
 *
 * # Safety
 * `out` must hold `cap` values; `out_len` may be null.
 */
enum SsmStatus ssm_record_logits(const struct SsmRecord *record,
                                 size_t pos,
                                 float *out,
                                 size_t cap,
                                 size_t *out_len);

/**
 * Final residual at original position `pos`, `d_model` values.
 *
 * # Safety
 * `out` must hold `cap` values; `out_len` may be null.
 */
enum SsmStatus ssm_record_hidden(const struct SsmRecord *record,
                                 size_t pos,
                                 float *out,
                                 size_t cap,
                                 size_t *out_len);

/**
 * Influence of every position `0..=target` on the scan output at `target`, in f64.
 * Shapes: `a_log [d_inner x d_state]`, `delta` and `x` `[len x d_inner]`, `b` and `c`
 * `[len x d_state]`, `out [target + 1]`.
 *
 * # Safety
 * Every array must hold the number of values given by its shape.
 */
enum SsmStatus ssm_influence_scores(size_t d_inner,
                                    size_t d_state,
                                    size_t len,
                                    const double *a_log,
                                    const double *delta,
                                    const double *b,
                                    const double *c,
                                    const double *x,
                                    size_t target,
                                    uint32_t agg,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSM_PRUNE_H */

#ifndef SPLITGUARD_H
#define SPLITGUARD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_INVALID_UTF8 = 2,
  SP_STATUS_CONFIG = 3,
  SP_STATUS_DATA = 4,
  SP_STATUS_STRUCTURE = 5,
  SP_STATUS_PARSE = 6,
  SP_STATUS_FORMAT = 7,
  SP_STATUS_DEGENERATE = 8,
  SP_STATUS_NUMERIC = 9,
  SP_STATUS_DIMENSION = 10,
  SP_STATUS_USAGE = 11,
  SP_STATUS_IO = 12,
  SP_STATUS_INTERNAL = 13,
} SpStatus;

/**
 * Opaque model handle.
 */
typedef struct SpModel SpModel;

typedef struct SpReward {
  double r_a;
  double r_p;
  double r_s;
  double r;
} SpReward;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *sp_last_error(void);

/**
 * Builds a zoo model (`use_f64` selects double precision).
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum SpStatus sp_model_build_zoo(const char *name,
                                 uint64_t seed,
                                 bool use_f64,
                                 struct SpModel **out);

/**
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum SpStatus sp_model_load(const char *dir, struct SpModel **out);

/**
 * # Safety
 * `model` must come from this library; `dir` must be a NUL-terminated path.
 */
enum SpStatus sp_model_save(const struct SpModel *model, const char *dir);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void sp_model_free(struct SpModel *model);

/**
 * # Safety
 * Pointers must be valid.
 */
enum SpStatus sp_model_num_layers(const struct SpModel *model, size_t *out);

/**
 * Parameters stored in layers `[start, end)`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum SpStatus sp_model_count_params(const struct SpModel *model,
                                    size_t start,
                                    size_t end,
                                    uint64_t *out);

/**
 * Multiply-accumulates of layers `[start, end)` for one sample.
 *
 * # Safety
 * Pointers must be valid.
 */
enum SpStatus sp_model_count_macs(const struct SpModel *model,
                                  size_t start,
                                  size_t end,
                                  uint64_t *out);

/**
 * # Safety
 * `model` must come from this library.
 */
enum SpStatus sp_model_set_partition(struct SpModel *model, size_t partition);

/**
 * Fractions of parameters (`s1`) and MACs (`s2`) outside the encoder.
 *
 * # Safety
 * Pointers must be valid.
 */
enum SpStatus sp_model_perf_indicators(const struct SpModel *model, double *s1, double *s2);

/**
 * Applies a strategy string with default knobs, producing a new handle.
 *
 * # Safety
 * Pointers must be valid; `strategy` NUL-terminated.
 */
enum SpStatus sp_model_apply_strategy(const struct SpModel *model,
                                      const char *strategy,
                                      uint64_t seed,
                                      struct SpModel **out);

/**
 * Canonical form of a strategy for this model; free with [`sp_string_free`].
 *
 * # Safety
 * Pointers must be valid; `strategy` NUL-terminated.
 */
enum SpStatus sp_strategy_canonicalize(const struct SpModel *model,
                                       const char *strategy,
                                       char **out);

/**
 * # Safety
 * `s` must come from this library; null is ignored.
 */
void sp_string_free(char *s);

/**
 * Reward and its three factors.
 *
 * # Safety
 * `out` must be writable.
 */
enum SpStatus sp_reward(double a, double a_base, double p, double s, struct SpReward *out);

/**
 * Mean SSIM of two `[n, c, h, w]` batches with the default window and
 * dynamic range 1.
 *
 * # Safety
 * `x` and `y` must each point to `n*c*h*w` doubles.
 */
enum SpStatus sp_ssim(const double *x,
                      const double *y,
                      size_t n,
                      size_t c,
                      size_t h,
                      size_t w,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLITGUARD_H */

#ifndef GRIDATTN_H
#define GRIDATTN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GaStatus {
  GA_STATUS_OK = 0,
  GA_STATUS_NULL_POINTER = 1,
  GA_STATUS_INVALID_ARGUMENT = 2,
  GA_STATUS_SHAPE = 3,
  GA_STATUS_CAPACITY = 4,
  GA_STATUS_GRAMMAR = 5,
  GA_STATUS_DEGENERATE = 6,
  GA_STATUS_NUMERICAL = 7,
  GA_STATUS_FORMAT = 8,
  GA_STATUS_IO = 9,
  GA_STATUS_PANIC = 10,
} GaStatus;

/**
 * Grid graph with fixed unary and pairwise potentials.
 */
typedef struct GaCrf GaCrf;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct GaModel GaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread; empty if none. Valid until the next failure.
 */
const char *ga_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ga_version(void);

/**
 * Builds a `height × width` grid CRF. `unary_one` holds `p(z_i = 1)` in `(0, 1)` for each
 * node in row-major order; `pairwise` holds 4 strictly positive entries per canonical edge
 * (right neighbor before down neighbor, indexed `z_i * 2 + z_j`).
 *
 * # Safety
 * `unary_one` must hold `height * width` doubles and `pairwise` 4 per edge, where the edge
 * count is `height * (width - 1) + (height - 1) * width`. `out` must be writable.
 */
enum GaStatus ga_crf_new(size_t height,
                         size_t width,
                         const double *unary_one,
                         const double *pairwise,
                         struct GaCrf **out);

/**
 * # Safety
 * `crf` must be null or a handle from [`ga_crf_new`] not yet freed.
 */
void ga_crf_free(struct GaCrf *crf);

/**
 * # Safety
 * `crf` must be null or a live handle.
 */
size_t ga_crf_num_nodes(const struct GaCrf *crf);

/**
 * # Safety
 * `crf` must be null or a live handle.
 */
size_t ga_crf_num_edges(const struct GaCrf *crf);

/**
 * Exact marginals `p(z_i = 1)` by enumeration; `log_z` may be null.
 *
 * # Safety
 * `crf` must be a live handle; `marginals` must hold one double per node.
 */
enum GaStatus ga_crf_exact(const struct GaCrf *crf, double *marginals, double *log_z);

/**
 * `steps` mean-field sweeps from the unary; `sequential` nonzero selects in-place updates.
 *
 * # Safety
 * `crf` must be a live handle; `marginals` must hold one double per node.
 */
enum GaStatus ga_crf_mean_field(const struct GaCrf *crf,
                                size_t steps,
                                int32_t sequential,
                                double *marginals);

/**
 * `steps` synchronous loopy BP iterations with message damping in `[0, 1)`.
 *
 * # Safety
 * `crf` must be a live handle; `marginals` must hold one double per node.
 */
enum GaStatus ga_crf_lbp(const struct GaCrf *crf, size_t steps, double damping, double *marginals);

/**
 * Mean-field free energy of the factorized distribution with the given `p(z_i = 1)`.
 *
 * # Safety
 * `crf` must be a live handle; `marginals` must hold one double per node; `out` writable.
 */
enum GaStatus ga_crf_free_energy(const struct GaCrf *crf, const double *marginals, double *out);

/**
 * Loads a checkpoint and its sidecar configuration.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum GaStatus ga_model_load(const char *path, struct GaModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`ga_model_load`] not yet freed.
 */
void ga_model_free(struct GaModel *model);

/**
 * Expected image length: `3 * size * size` doubles, channel-major.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ga_model_image_len(const struct GaModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ga_model_num_regions(const struct GaModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ga_model_num_answers(const struct GaModel *model);

/**
 * Answers `query` about `image`. `answer` receives the class index (0 = no, 1 = yes);
 * `probabilities` (one per answer) and `attention` (first glimpse, one per region) may be null.
 *
 * # Safety
 * `model` must be a live handle, `image` must hold `image_len` doubles, `query` must be a
 * NUL-terminated string, and the output pointers must be null or large enough.
 */
enum GaStatus ga_model_predict(const struct GaModel *model,
                               const double *image,
                               size_t image_len,
                               const char *query,
                               size_t *answer,
                               double *probabilities,
                               double *attention);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRIDATTN_H */

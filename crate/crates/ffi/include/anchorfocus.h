#ifndef ANCHORFOCUS_H
#define ANCHORFOCUS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum AfStatus {
  AF_STATUS_OK = 0,
  // A required pointer was null.
  AF_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not UTF-8.
  AF_STATUS_INVALID_UTF8 = 2,
  AF_STATUS_CONFIG = 3,
  AF_STATUS_DATA = 4,
  AF_STATUS_IO = 5,
  // Buffer lengths or shapes disagree with the model.
  AF_STATUS_DIMENSION = 6,
  // Inputs violate a precondition (degenerate box, empty gallery, ...).
  AF_STATUS_INVALID_INPUT = 7,
  // A Rust panic was caught at the boundary.
  AF_STATUS_INTERNAL = 8,
} AfStatus;

// How the query branch sets its attention bias.
typedef enum AfBetaMode {
  // Predicted per query by the modulator.
  AF_BETA_MODE_ADAPTIVE = 0,
  // The `fixed_beta` argument for every query.
  AF_BETA_MODE_FIXED = 1,
  // No bias: the box is ignored.
  AF_BETA_MODE_OFF = 2,
} AfBetaMode;

// Opaque handle to a loaded model.
typedef struct AfModel AfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next call into this library from the same thread.
const char *af_last_error(void);

// Library version as a static NUL-terminated string.
const char *af_version(void);

// Loads a checkpoint written by `anchorfocus train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AfStatus af_model_load(const char *path, struct AfModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `m` must come from [`af_model_load`] and not be used afterwards.
void af_model_free(struct AfModel *m);

// Width of the embeddings the model produces, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
uintptr_t af_model_embed_dim(const struct AfModel *m);

// Width of one patch latent (and of a text context), or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
uintptr_t af_model_latent_dim(const struct AfModel *m);

// Embeds a gallery image given `grid_h * grid_w` patch latents in raster
// order. Writes `af_model_embed_dim` values to `out`.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum AfStatus af_embed_target(const struct AfModel *m,
                              const double *latents,
                              uintptr_t latents_len,
                              uintptr_t grid_h,
                              uintptr_t grid_w,
                              double *out,
                              uintptr_t out_len);

// Embeds a query: reference patch latents, the anchored box as
// `[x0, y0, x1, y1]` in unit coordinates, and the target context latent.
// When `beta_out` is non-null it receives the bias used (0 when off).
//
// # Safety
// Pointers must be valid for the stated lengths; `bbox` holds 4 values.
enum AfStatus af_embed_query(const struct AfModel *m,
                             const double *latents,
                             uintptr_t latents_len,
                             uintptr_t grid_h,
                             uintptr_t grid_w,
                             const double *bbox,
                             const double *context,
                             uintptr_t context_len,
                             enum AfBetaMode mode,
                             double fixed_beta,
                             double *out,
                             uintptr_t out_len,
                             double *beta_out);

// Ranks `n` gallery embeddings (row-major, `n * width` values) by descending
// dot product with `query`; ties keep gallery order. Writes `n` indices.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum AfStatus af_rank(const double *query,
                      uintptr_t width,
                      const double *gallery,
                      uintptr_t n,
                      uint32_t *order_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANCHORFOCUS_H */

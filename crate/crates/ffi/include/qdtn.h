#ifndef QDTN_H
#define QDTN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Invariant and solver failures match the CLI exit codes.
 */
typedef enum QdtnStatus {
  QDTN_STATUS_OK = 0,
  QDTN_STATUS_OTHER = 1,
  QDTN_STATUS_INVARIANT_FAILURE = 2,
  QDTN_STATUS_SOLVER_FAILURE = 3,
  QDTN_STATUS_INVALID_ARGUMENT = 4,
  QDTN_STATUS_CONFIG = 5,
  QDTN_STATUS_IO = 6,
  QDTN_STATUS_NULL_POINTER = 7,
  QDTN_STATUS_PANIC = 8,
} QdtnStatus;

/**
 * Opaque run configuration.
 */
typedef struct QdtnConfig QdtnConfig;

/**
 * Phantom coefficients with their DN operator at the configured ε.
 */
typedef struct QdtnModel QdtnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next failing call.
 */
const char *qdtn_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void qdtn_string_free(char *s);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum QdtnStatus qdtn_config_default(struct QdtnConfig **out);

/**
 * Parses a TOML configuration.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QdtnStatus qdtn_config_from_toml(const char *toml, struct QdtnConfig **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle from this library, not yet freed.
 */
void qdtn_config_free(struct QdtnConfig *cfg);

/**
 * Serializes the configuration as TOML.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum QdtnStatus qdtn_config_to_toml(const struct QdtnConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum QdtnStatus qdtn_config_set_grid_n(struct QdtnConfig *cfg, size_t n);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum QdtnStatus qdtn_config_set_seed(struct QdtnConfig *cfg, uint64_t seed);

/**
 * Sets the phantom preset by name (`flat`, `bump_gamma`, `bump_b`, `combined`, `with_remainder`).
 *
 * # Safety
 * `cfg` must be a live handle and `name` a NUL-terminated string.
 */
enum QdtnStatus qdtn_config_set_preset(struct QdtnConfig *cfg, const char *name);

/**
 * # Safety
 * `cfg` must be a live handle and `dir` a NUL-terminated string.
 */
enum QdtnStatus qdtn_config_set_output_dir(struct QdtnConfig *cfg, const char *dir);

/**
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum QdtnStatus qdtn_model_new(const struct QdtnConfig *cfg, struct QdtnModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library, not yet freed.
 */
void qdtn_model_free(struct QdtnModel *model);

/**
 * Number of boundary nodes, the length of every trace.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum QdtnStatus qdtn_model_boundary_len(const struct QdtnModel *model, size_t *out);

/**
 * Writes the boundary node coordinates as `len` interleaved (x, y, z) triples.
 *
 * # Safety
 * `xyz` must point to `3 * len` doubles.
 */
enum QdtnStatus qdtn_model_boundary_points(const struct QdtnModel *model, double *xyz, size_t len);

/**
 * Applies the DN map to a boundary trace: the nonlinear map Λ(εf), or Λγ f when `linear` is
 * nonzero.
 *
 * # Safety
 * `f` and `out` must point to `len` doubles.
 */
enum QdtnStatus qdtn_model_dn_apply(const struct QdtnModel *model,
                                    const double *f,
                                    size_t len,
                                    int32_t linear,
                                    double *out);

/**
 * Extracts the first and second linearizations g₁, g₂ of the DN map at f.
 *
 * # Safety
 * `f`, `g1` and `g2` must point to `len` doubles.
 */
enum QdtnStatus qdtn_model_linearize(const struct QdtnModel *model,
                                     const double *f,
                                     size_t len,
                                     double *g1,
                                     double *g2);

/**
 * Peak |b⃗| of the model's phantom.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum QdtnStatus qdtn_model_b_peak(const struct QdtnModel *model, double *out);

/**
 * Runs the full pipeline, writing the run directory, and returns the metrics as JSON.
 *
 * # Safety
 * `cfg` must be a live handle and `metrics_json` a valid pointer.
 */
enum QdtnStatus qdtn_run_pipeline(const struct QdtnConfig *cfg, char **metrics_json);

/**
 * Runs the invariant suite and returns the metrics as JSON. Fails with
 * `QdtnStatus::InvariantFailure` at the first failed check.
 *
 * # Safety
 * `cfg` must be a live handle and `metrics_json` a valid pointer.
 */
enum QdtnStatus qdtn_verify(const struct QdtnConfig *cfg, char **metrics_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QDTN_H */

#ifndef GCGM_H
#define GCGM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GcgmVariant {
  GCGM_VARIANT_INTERCEPTS = 0,
  GCGM_VARIANT_INTERCEPTS_LATENT = 1,
  GCGM_VARIANT_INTERCEPTS_PROXIMITY = 2,
  GCGM_VARIANT_FULL = 3,
} GcgmVariant;

typedef enum GcgmLink {
  GCGM_LINK_LOGIT = 0,
  GCGM_LINK_PROBIT = 1,
} GcgmLink;

typedef enum GcgmStatus {
  GCGM_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8 or an index out of range.
   */
  GCGM_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The input files or settings were rejected.
   */
  GCGM_STATUS_VALIDATION = 2,
  /**
   * Numerical or I/O failure while running.
   */
  GCGM_STATUS_RUNTIME = 3,
  /**
   * A panic was caught at the boundary.
   */
  GCGM_STATUS_PANIC = 4,
} GcgmStatus;

/**
 * A loaded survey with optional proximity data.
 */
typedef struct GcgmDataset GcgmDataset;

/**
 * A finished fit.
 */
typedef struct GcgmFit GcgmFit;

/**
 * Sampler settings.
 */
typedef struct GcgmFitConfig {
  enum GcgmVariant variant;
  enum GcgmLink link;
  uint64_t n_iterations;
  uint64_t burn_in;
  uint64_t thin;
  uint64_t seed;
  /**
   * 0 uses every core.
   */
  size_t threads;
  size_t n_deviance_draws;
  /**
   * Skip the DIC computation when false.
   */
  bool compute_dic;
} GcgmFitConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *gcgm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gcgm_version(void);

/**
 * Desk-scale defaults: 50000 iterations, 10000 burn-in, thinning 10.
 */
struct GcgmFitConfig gcgm_fit_config_default(enum GcgmVariant variant, uint64_t seed);

/**
 * Loads a survey CSV and trait schema; `proximity_path` may be null.
 *
 * # Safety
 * Path arguments must be null or NUL-terminated strings; `out` must be a
 * valid pointer to writable storage.
 */
enum GcgmStatus gcgm_dataset_load(const char *data_path,
                                  const char *schema_path,
                                  const char *proximity_path,
                                  struct GcgmDataset **out);

/**
 * Number of groups, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle from [`gcgm_dataset_load`].
 */
size_t gcgm_dataset_n_groups(const struct GcgmDataset *ds);

/**
 * Number of traits, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle from [`gcgm_dataset_load`].
 */
size_t gcgm_dataset_n_traits(const struct GcgmDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle from [`gcgm_dataset_load`] not yet freed.
 */
void gcgm_dataset_free(struct GcgmDataset *ds);

/**
 * Fits marginals, runs the sampler and, if requested, computes the DIC.
 * Nothing is written to disk.
 *
 * # Safety
 * `ds` must be a live dataset handle, `config` a valid pointer and `out`
 * writable.
 */
enum GcgmStatus gcgm_fit(const struct GcgmDataset *ds,
                         const struct GcgmFitConfig *config,
                         struct GcgmFit **out);

/**
 * Copies the posterior edge-probability matrix of `group` (row-major,
 * `n_traits * n_traits` values) into `buf`.
 *
 * # Safety
 * `fit` must be a live handle and `buf` must point to `len` writable doubles.
 */
enum GcgmStatus gcgm_fit_edge_probabilities(const struct GcgmFit *fit,
                                            size_t group,
                                            double *buf,
                                            size_t len);

/**
 * Writes the DIC of a fit run with `compute_dic`.
 *
 * # Safety
 * `fit` must be a live handle and `out` writable.
 */
enum GcgmStatus gcgm_fit_dic(const struct GcgmFit *fit, double *out);

/**
 * Writes the summary bundle into `dir`, creating it if needed.
 *
 * # Safety
 * `fit` must be a live handle; `dir` a NUL-terminated path.
 */
enum GcgmStatus gcgm_fit_write_summary(const struct GcgmFit *fit, const char *dir);

/**
 * # Safety
 * `fit` must be null or a handle from [`gcgm_fit`] not yet freed.
 */
void gcgm_fit_free(struct GcgmFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GCGM_H */

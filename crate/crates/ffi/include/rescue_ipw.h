#ifndef RESCUE_IPW_H
#define RESCUE_IPW_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RipwEstimand {
  RIPW_ESTIMAND_BALANCED = 0,
  RIPW_ESTIMAND_BALANCED_FLIPPED = 1,
  RIPW_ESTIMAND_TREATMENT_POLICY = 2,
  RIPW_ESTIMAND_HYPOTHETICAL = 3,
} RipwEstimand;

/**
 * Which standard error to compute.
 */
typedef enum RipwSeMethod {
  RIPW_SE_METHOD_NONE = 0,
  RIPW_SE_METHOD_INFLUENCE = 1,
  RIPW_SE_METHOD_BOOTSTRAP = 2,
} RipwSeMethod;

/**
 * Result code of every call.
 */
typedef enum RipwStatus {
  RIPW_STATUS_OK = 0,
  RIPW_STATUS_NULL_POINTER = 1,
  RIPW_STATUS_INVALID_ARGUMENT = 2,
  RIPW_STATUS_IO = 3,
  RIPW_STATUS_PARSE = 4,
  RIPW_STATUS_EMPTY_ARM = 5,
  RIPW_STATUS_DIMENSION_MISMATCH = 6,
  RIPW_STATUS_NON_CONVERGENCE = 7,
  RIPW_STATUS_RANK_DEFICIENT = 8,
  RIPW_STATUS_DEGENERATE_ARM = 9,
  RIPW_STATUS_MISSING_L = 10,
  RIPW_STATUS_ALL_SWITCHERS = 11,
  RIPW_STATUS_TRUNCATION_UNSUPPORTED = 12,
  RIPW_STATUS_INFLUENCE_UNAVAILABLE = 13,
  RIPW_STATUS_TOO_MANY_FAILURES = 14,
  RIPW_STATUS_EMPTY_STRATUM = 15,
  RIPW_STATUS_PANIC = 99,
} RipwStatus;

/**
 * Opaque dataset handle.
 */
typedef struct RipwDataset RipwDataset;

/**
 * Options for the balanced estimator. Start from [`ripw_balanced_options_default`].
 */
typedef struct RipwBalancedOptions {
  double rho;
  /**
   * Solve the switcher equations instead of the non-switcher ones.
   */
  bool switcher_equations;
  /**
   * Interchange the arms and target E(Y1 - Y0S1).
   */
  bool flip;
  bool truncate;
  double truncate_lower_pct;
  double truncate_upper_pct;
} RipwBalancedOptions;

/**
 * Standard-error request.
 */
typedef struct RipwSeRequest {
  enum RipwSeMethod method;
  size_t bootstrap_replicates;
  uint64_t seed;
  /**
   * Worker threads for the bootstrap; 0 uses every core. Never changes results.
   */
  size_t jobs;
} RipwSeRequest;

typedef struct RipwEstimate {
  enum RipwEstimand estimand;
  double mu1;
  double mu0;
  double mu;
  double se_mu;
  double se_mu1;
  double se_mu0;
  double ci_lower;
  double ci_upper;
  double weight_p5;
  double weight_p95;
  /**
   * Bootstrap replicates dropped after estimation failures.
   */
  size_t bootstrap_failed;
  size_t warning_count;
} RipwEstimate;

typedef struct RipwTruth {
  double mu1;
  double mu0;
  double mu;
  double policy_mu1;
  double policy_mu0;
  double policy_mu;
  double hyp_mu1;
  double hyp_mu0;
  double hyp_mu;
} RipwTruth;

typedef struct RipwToy {
  double policy;
  double hypothetical;
  /**
   * NaN when no patient is a never-switcher.
   */
  double principal;
  double balanced;
} RipwToy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the last error message on this thread, excluding the
 * terminating NUL; 0 when the last call succeeded.
 */
size_t ripw_last_error_length(void);

/**
 * Copy the last error message into `buf` (NUL-terminated, truncated to
 * `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null.
 */
size_t ripw_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ripw_version(void);

/**
 * Read a CSV dataset in the default layout (`R`, `S`, `Y`, `L_*`, `C_*`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RipwStatus ripw_dataset_load_csv(const char *path, struct RipwDataset **out);

/**
 * Build a dataset from column arrays of length `n`.
 *
 * `c` is row-major `n * c_dim`; `l` is row-major `n * l_dim` with a row of
 * NaN meaning "not measured" (typically controls). `l` may be null when
 * `l_dim` is 0, and `c` when `c_dim` is 0.
 *
 * # Safety
 * Each non-null pointer must be valid for the stated number of elements.
 */
enum RipwStatus ripw_dataset_from_arrays(size_t n,
                                         const uint8_t *treated,
                                         const uint8_t *switched,
                                         const double *y,
                                         const double *c,
                                         size_t c_dim,
                                         const double *l,
                                         size_t l_dim,
                                         struct RipwDataset **out);

/**
 * Simulate `n` patients from built-in scenario 1, 2 or 3. Controls carry
 * `L` only when `retain_l` is set.
 *
 * # Safety
 * `out` must be writable.
 */
enum RipwStatus ripw_dataset_simulate(uint8_t scenario,
                                      size_t n,
                                      uint64_t seed,
                                      bool retain_l,
                                      struct RipwDataset **out);

/**
 * Number of records; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t ripw_dataset_len(const struct RipwDataset *ds);

/**
 * Release a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void ripw_dataset_free(struct RipwDataset *ds);

/**
 * Defaults: rho 1, non-switcher equations, no flip, no truncation.
 */
struct RipwBalancedOptions ripw_balanced_options_default(void);

/**
 * Balanced estimate. `se` may be null for no standard error.
 *
 * # Safety
 * `ds` must be a live handle, `options` and `se` null or valid, `out` writable.
 */
enum RipwStatus ripw_estimate_balanced(const struct RipwDataset *ds,
                                       const struct RipwBalancedOptions *options,
                                       const struct RipwSeRequest *se,
                                       struct RipwEstimate *out);

/**
 * Treatment-policy estimate with an intercept-only propensity.
 *
 * # Safety
 * As [`ripw_estimate_balanced`].
 */
enum RipwStatus ripw_estimate_policy(const struct RipwDataset *ds,
                                     const struct RipwSeRequest *se,
                                     struct RipwEstimate *out);

/**
 * Hypothetical (no-switching) estimate; needs `L` on both arms.
 *
 * # Safety
 * As [`ripw_estimate_balanced`].
 */
enum RipwStatus ripw_estimate_hypothetical(const struct RipwDataset *ds,
                                           const struct RipwSeRequest *se,
                                           struct RipwEstimate *out);

/**
 * Monte-Carlo population values for a built-in scenario.
 *
 * # Safety
 * `out` must be writable.
 */
enum RipwStatus ripw_true_values(uint8_t scenario,
                                 size_t n_mc,
                                 uint64_t seed,
                                 struct RipwTruth *out);

/**
 * The four estimands of the built-in five-patient example.
 *
 * # Safety
 * `out` must be writable.
 */
enum RipwStatus ripw_toy(struct RipwToy *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESCUE_IPW_H */

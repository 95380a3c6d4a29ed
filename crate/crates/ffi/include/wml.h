#ifndef WML_H
#define WML_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WmlStatus {
  WML_STATUS_OK = 0,
  WML_STATUS_NULL_POINTER = 1,
  WML_STATUS_INVALID_ARGUMENT = 2,
  WML_STATUS_VALIDATION = 3,
  WML_STATUS_NON_CONVERGENCE = 4,
  WML_STATUS_PANIC = 5,
} WmlStatus;

/**
 * A `d`-vector valued function on the leaves.
 */
typedef struct WmlFunction WmlFunction;

/**
 * A finite filtered probability space.
 */
typedef struct WmlSpace WmlSpace;

/**
 * A matrix weight, one symmetric positive definite `d × d` matrix per leaf.
 */
typedef struct WmlWeight WmlWeight;

/**
 * Outcome of the pointwise domination check.
 */
typedef struct WmlDominationReport {
  double max_ratio;
  double bound;
  /**
   * Leaves where the square function is positive but the sparse bound vanishes.
   */
  size_t unbounded_leaves;
  bool pass;
} WmlDominationReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failed call on this thread; empty after a
 * successful call. The pointer stays valid until the next `wml_*` call on
 * the same thread.
 */
const char *wml_last_error_message(void);

/**
 * Uniform dyadic space of the given depth.
 *
 * # Safety
 * `out` must be valid for writing a pointer.
 */
enum WmlStatus wml_space_dyadic(size_t depth, struct WmlSpace **out);

/**
 * Space from a JSON tree `{"mass": x, "children": [...]}`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` valid for writing.
 */
enum WmlStatus wml_space_from_json(const char *json, struct WmlSpace **out);

/**
 * # Safety
 * `space` must be a live handle and `out` valid for writing.
 */
enum WmlStatus wml_space_num_leaves(const struct WmlSpace *space, size_t *out);

/**
 * # Safety
 * `space` must come from a `wml_space_*` constructor and not be freed twice.
 */
void wml_space_free(struct WmlSpace *space);

/**
 * Weight from `leaves` row-major `dim × dim` blocks stored back to back.
 *
 * # Safety
 * `data` must point to `leaves * dim * dim` doubles and `out` be valid for writing.
 */
enum WmlStatus wml_weight_new(size_t dim,
                              size_t leaves,
                              const double *data,
                              struct WmlWeight **out);

/**
 * # Safety
 * `weight` must come from `wml_weight_new` and not be freed twice.
 */
void wml_weight_free(struct WmlWeight *weight);

/**
 * Function from `leaves` vectors of length `dim` stored back to back.
 *
 * # Safety
 * `data` must point to `leaves * dim` doubles and `out` be valid for writing.
 */
enum WmlStatus wml_function_new(size_t dim,
                                size_t leaves,
                                const double *data,
                                struct WmlFunction **out);

/**
 * # Safety
 * `f` must come from `wml_function_new` and not be freed twice.
 */
void wml_function_free(struct WmlFunction *f);

/**
 * `[W]_{A_p}` through fitted reducing matrices; `tol <= 0` selects the default fit tolerance.
 *
 * # Safety
 * Handles must be live and `out` valid for writing.
 */
enum WmlStatus wml_ap_characteristic(const struct WmlSpace *space,
                                     const struct WmlWeight *weight,
                                     double p,
                                     double tol,
                                     double *out);

/**
 * Unweighted square function, one value per leaf.
 *
 * # Safety
 * Handles must be live and `out` must hold `len` doubles.
 */
enum WmlStatus wml_square_function(const struct WmlSpace *space,
                                   const struct WmlFunction *f,
                                   double *out,
                                   size_t len);

/**
 * `S_W f` at exponent `p`, one value per leaf.
 *
 * # Safety
 * Handles must be live and `out` must hold `len` doubles.
 */
enum WmlStatus wml_weighted_square_function(const struct WmlSpace *space,
                                            const struct WmlWeight *weight,
                                            double p,
                                            const struct WmlFunction *f,
                                            double *out,
                                            size_t len);

/**
 * Pointwise `S_W f ≤ K · T_{W,2} f` over the principal sets of `f` at
 * threshold `cgamma` (`cgamma <= 0` selects the default).
 *
 * # Safety
 * Handles must be live and `out` valid for writing.
 */
enum WmlStatus wml_domination_check(const struct WmlSpace *space,
                                    const struct WmlWeight *weight,
                                    double p,
                                    const struct WmlFunction *f,
                                    double cgamma,
                                    struct WmlDominationReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WML_H */

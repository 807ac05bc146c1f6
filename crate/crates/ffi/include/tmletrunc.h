#ifndef TMLETRUNC_H
#define TMLETRUNC_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum TmleStatus {
  TMLE_STATUS_OK = 0,
  TMLE_STATUS_NULL_POINTER = 1,
  TMLE_STATUS_INVALID_ARGUMENT = 2,
  TMLE_STATUS_SINGLE_ARM = 3,
  TMLE_STATUS_RANK_DEFICIENT = 4,
  TMLE_STATUS_CONSTANT_OUTCOME = 5,
  TMLE_STATUS_EMPTY_ARM = 6,
  TMLE_STATUS_TOO_FEW_DRAWS = 7,
  TMLE_STATUS_PARSE = 8,
  TMLE_STATUS_IO = 9,
  TMLE_STATUS_INTERNAL = 10,
} TmleStatus;

typedef enum TmleStopReason {
  TMLE_STOP_REASON_LEPSKI = 0,
  TMLE_STOP_REASON_BRAKE = 1,
  TMLE_STOP_REASON_EXHAUSTED = 2,
} TmleStopReason;

typedef enum TmleStrategy {
  TMLE_STRATEGY_GH = 0,
  TMLE_STRATEGY_GWT = 1,
} TmleStrategy;

typedef enum TmleLink {
  TMLE_LINK_LOGIT = 0,
  TMLE_LINK_LINEAR = 1,
} TmleLink;

typedef enum TmleMisspec {
  TMLE_MISSPEC_HIGH = 0,
  TMLE_MISSPEC_MODERATE = 1,
  TMLE_MISSPEC_NEARLY_CORRECT = 2,
} TmleMisspec;

/*
 Selectors available outside a simulation.
 */
typedef enum TmleSelector {
  TMLE_SELECTOR_EIFB = 0,
  TMLE_SELECTOR_TBB = 1,
} TmleSelector;

typedef enum TmleVariance {
  TMLE_VARIANCE_EIF = 0,
  TMLE_VARIANCE_PLUG_IN = 1,
} TmleVariance;

/*
 Observed data `(W, A, Y)`.
 */
typedef struct TmleDataset TmleDataset;

/*
 Targeted fit at one truncation level.
 */
typedef struct TmleEstimate TmleEstimate;

/*
 Adaptive truncation choice.
 */
typedef struct TmleSelection TmleSelection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on this thread.
 */
const char *tmle_last_error_message(void);

/*
 Truncation bound `c / (sqrt(n) ln n)`.

 # Safety
 `out` must be valid for a write.
 */
enum TmleStatus tmle_trunc_bound(double c, size_t n, double *out);

/*
 True ATE of the simulation design, or NaN for an unknown code.
 */
double tmle_true_ate(int32_t misspec);

/*
 Copies user data into a new dataset. `w` is row-major `n x p`.

 # Safety
 `w` must hold `n * p` doubles, `a` and `y` `n` values each, and `out`
 must be valid for a write.
 */
enum TmleStatus tmle_dataset_new(const double *w,
                                 size_t n,
                                 size_t p,
                                 const uint8_t *a,
                                 const double *y,
                                 struct TmleDataset **out);

/*
 Draws replication `rep` of a simulation scenario.

 # Safety
 `out` must be valid for a write.
 */
enum TmleStatus tmle_dataset_generate(size_t n,
                                      double kappa,
                                      int32_t misspec,
                                      bool rct,
                                      uint64_t seed,
                                      uint64_t rep,
                                      struct TmleDataset **out);

/*
 Reads a CSV with columns `w1..wp, a, y`.

 # Safety
 `path` must be a NUL-terminated string and `out` valid for a write.
 */
enum TmleStatus tmle_dataset_read_csv(const char *path, struct TmleDataset **out);

/*
 Number of rows, or 0 for a null handle.

 # Safety
 `ds` must be null or a live dataset handle.
 */
size_t tmle_dataset_n(const struct TmleDataset *ds);

/*
 Number of covariate columns, or 0 for a null handle.

 # Safety
 `ds` must be null or a live dataset handle.
 */
size_t tmle_dataset_p(const struct TmleDataset *ds);

/*
 # Safety
 `ds` must be null or a handle not yet freed.
 */
void tmle_dataset_free(struct TmleDataset *ds);

/*
 Fits the nuisances (main-effects working models on every covariate),
 truncates at constant `c` and targets.

 # Safety
 `ds` must be a live dataset handle and `out` valid for a write.
 */
enum TmleStatus tmle_estimate(const struct TmleDataset *ds,
                              double c,
                              int32_t strategy,
                              int32_t link,
                              struct TmleEstimate **out);

/*
 Targeted ATE estimate, or NaN for a null handle.

 # Safety
 `est` must be null or a live estimate handle.
 */
double tmle_estimate_psi(const struct TmleEstimate *est);

/*
 Variance estimate by method code.

 # Safety
 `est` must be a live estimate handle and `out` valid for a write.
 */
enum TmleStatus tmle_estimate_variance(const struct TmleEstimate *est, int32_t method, double *out);

/*
 Fluctuation parameters and whether both arms converged.

 # Safety
 `est` must be a live estimate handle; the out pointers must be valid for
 writes.
 */
enum TmleStatus tmle_estimate_fluctuation(const struct TmleEstimate *est,
                                          double *eps1,
                                          double *eps0,
                                          bool *converged);

/*
 Rows whose treated / control probability was raised to the bound.

 # Safety
 `est` must be a live estimate handle; the out pointers must be valid for
 writes.
 */
enum TmleStatus tmle_estimate_activations(const struct TmleEstimate *est,
                                          size_t *treated,
                                          size_t *control);

/*
 # Safety
 `est` must be null or a handle not yet freed.
 */
void tmle_estimate_free(struct TmleEstimate *est);

/*
 Adaptive truncation over an ascending grid of `k` constants.
 `boot_reps` and `seed` are used by the bootstrap selector only.

 # Safety
 `ds` must be a live dataset handle, `grid` must hold `k` doubles and
 `out` must be valid for a write.
 */
enum TmleStatus tmle_select(const struct TmleDataset *ds,
                            const double *grid,
                            size_t k,
                            int32_t strategy,
                            int32_t link,
                            int32_t selector,
                            size_t boot_reps,
                            double brake_multiplier,
                            uint64_t seed,
                            struct TmleSelection **out);

/*
 Chosen constant, estimate, 95% interval and stop reason.

 # Safety
 `sel` must be a live selection handle; the out pointers must be valid
 for writes.
 */
enum TmleStatus tmle_selection_get(const struct TmleSelection *sel,
                                   double *chosen_c,
                                   double *psi,
                                   double *ci_lower,
                                   double *ci_upper,
                                   enum TmleStopReason *stop_reason);

/*
 # Safety
 `sel` must be null or a handle not yet freed.
 */
void tmle_selection_free(struct TmleSelection *sel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMLETRUNC_H */

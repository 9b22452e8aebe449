#ifndef LAYERED_CONTROL_H
#define LAYERED_CONTROL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes; zero is success.
typedef enum LcStatus {
  LC_STATUS_OK = 0,
  LC_STATUS_NULL_POINTER = 1,
  LC_STATUS_INVALID_ARGUMENT = 2,
  LC_STATUS_DIMENSION_MISMATCH = 3,
  LC_STATUS_NUMERICAL = 4,
  LC_STATUS_INFEASIBLE = 5,
  LC_STATUS_IO = 6,
  LC_STATUS_VERIFICATION_FAILED = 7,
  LC_STATUS_BUFFER_TOO_SMALL = 8,
  LC_STATUS_PANIC = 9,
} LcStatus;

// Exact tracking oracle of a problem.
typedef struct LcOracle LcOracle;

// Finite-horizon layered LQ problem.
typedef struct LcProblem LcProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`) and returns the full message length, or 0 when none.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t lc_last_error(char *buf, size_t len);

// Builds a problem with `Q` of size `dx × dx` and `R` of size `du × du`.
//
// # Safety
// Array arguments must hold the stated number of doubles; `out` must be writable.
enum LcStatus lc_problem_new(const double *a,
                             const double *b,
                             size_t dx,
                             size_t du,
                             size_t horizon,
                             const double *q,
                             const double *r,
                             double rho,
                             struct LcProblem **out);

// Seeded random system with `Q = I` and `R = input_weight · I`.
//
// # Safety
// `out` must be writable.
enum LcStatus lc_problem_sample(uint64_t seed,
                                size_t dx,
                                size_t du,
                                double spectral_radius,
                                size_t horizon,
                                double input_weight,
                                double rho,
                                struct LcProblem **out);

// Imposes `x_{t,i} ≥ bound` for `t ≥ 1`.
//
// # Safety
// `problem` must be a live handle.
enum LcStatus lc_problem_set_lower_bound(struct LcProblem *problem, double bound);

// # Safety
// `problem` must be null or a handle not yet freed.
void lc_problem_free(struct LcProblem *problem);

// Length of the stacked reference `(T + 1) d_z`, or 0 for a null handle.
//
// # Safety
// `problem` must be null or a live handle.
size_t lc_problem_reference_len(const struct LcProblem *problem);

// Optimal cost of the original problem from `xi`, honoring constraints.
//
// # Safety
// `xi` must hold `xi_len` doubles; `cost` must be writable.
enum LcStatus lc_problem_optimal_cost(const struct LcProblem *problem,
                                      const double *xi,
                                      size_t xi_len,
                                      double *cost);

// # Safety
// `problem` must be a live handle; `out` must be writable.
enum LcStatus lc_oracle_new(const struct LcProblem *problem, struct LcOracle **out);

// # Safety
// `oracle` must be null or a handle not yet freed.
void lc_oracle_free(struct LcOracle *oracle);

// Writes the optimal dual gain `Θ*` row-major, `(T + 1) d_z × d_x` values.
//
// # Safety
// `buf` must hold `len` writable doubles.
enum LcStatus lc_oracle_theta_star(const struct LcOracle *oracle, double *buf, size_t len);

// Plans with dual `nu`, tracks `r + nu` exactly, and writes the plan `r`
// and the residual `r − 𝒞x`, each of reference length.
//
// # Safety
// Input arrays must hold their stated lengths; outputs hold `out_len` doubles.
enum LcStatus lc_oracle_plan_and_track(const struct LcOracle *oracle,
                                       const double *nu,
                                       size_t nu_len,
                                       const double *xi,
                                       size_t xi_len,
                                       double *r_out,
                                       double *residual_out,
                                       size_t out_len);

// Exact dual learning from `Θ = 0`; writes `‖Θ^(k) − Θ*‖₂` for
// `k = 0..=iterations`. A nonpositive `eta` selects the recommended step.
//
// # Safety
// `problem` must be a live handle; `trace` must hold `trace_len` doubles.
enum LcStatus lc_exact_dual_trace(const struct LcProblem *problem,
                                  double eta,
                                  size_t batch,
                                  size_t iterations,
                                  uint64_t seed,
                                  double *trace,
                                  size_t trace_len);

// Runs an experiment command (`verify-theory`, `lqr-table`, `rho-sweep`
// or `clqr`) with a flat JSON config; `config_json` may be null.
//
// # Safety
// String arguments must be null or valid NUL-terminated strings.
enum LcStatus lc_run_command(const char *command, const char *config_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAYERED_CONTROL_H */

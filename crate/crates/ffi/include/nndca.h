#ifndef NNDCA_H
#define NNDCA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NndcaDcaStatus {
  NNDCA_DCA_STATUS_CONVERGED_COMPLEMENTARY = 0,
  NNDCA_DCA_STATUS_CONVERGED_NONCOMPLEMENTARY = 1,
  NNDCA_DCA_STATUS_ITERATION_CAP = 2,
  NNDCA_DCA_STATUS_SUBPROBLEM_FAILURE = 3,
} NndcaDcaStatus;

// Result of every fallible call. Codes 2–6 match the command-line exit codes.
typedef enum NndcaStatus {
  NNDCA_STATUS_OK = 0,
  NNDCA_STATUS_NULL_POINTER = 1,
  NNDCA_STATUS_INVALID_ARGUMENT = 2,
  NNDCA_STATUS_INFEASIBLE = 3,
  NNDCA_STATUS_CONVERGENCE = 4,
  NNDCA_STATUS_SIZE_CAP = 5,
  NNDCA_STATUS_NUMERICAL = 6,
  NNDCA_STATUS_IO = 7,
  NNDCA_STATUS_PANIC = 8,
} NndcaStatus;

// Opaque grid case.
typedef struct NndcaGrid NndcaGrid;

// Opaque trained network.
typedef struct NndcaNetwork NndcaNetwork;

typedef struct NndcaDcaOptions {
  double rho;
  double eps_tol;
  size_t max_iters;
  double comp_tol;
  uint64_t seed;
} NndcaDcaOptions;

// Box `lower <= d <= upper` of length `dim`, with `Σd = total` when
// `has_total` is nonzero. The network output is minimized.
typedef struct NndcaDomain {
  const double *lower;
  const double *upper;
  size_t dim;
  int32_t has_total;
  double total;
} NndcaDomain;

typedef struct NndcaSolveResult {
  double objective;
  double penalty_residual;
  size_t iterations;
  double rho;
  enum NndcaDcaStatus status;
} NndcaSolveResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *nndca_last_error(void);

// Parses a network document.
//
// # Safety
// `json` must be a nul-terminated string; `out` must be writable.
enum NndcaStatus nndca_network_from_json(const char *json, struct NndcaNetwork **out);

// Reads a network document from a file.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum NndcaStatus nndca_network_load(const char *path, struct NndcaNetwork **out);

// # Safety
// `net` must come from this library and not be used afterwards. Null is
// ignored.
void nndca_network_free(struct NndcaNetwork *net);

// # Safety
// `net` must be a live handle or null (returns 0).
size_t nndca_network_input_dim(const struct NndcaNetwork *net);

// # Safety
// `net` must be a live handle or null (returns 0).
size_t nndca_network_output_dim(const struct NndcaNetwork *net);

// Evaluates the network at `input[0..input_len]` into `output[0..output_len]`.
//
// # Safety
// Arrays must hold the stated number of elements.
enum NndcaStatus nndca_network_forward(const struct NndcaNetwork *net,
                                       const double *input,
                                       size_t input_len,
                                       double *output,
                                       size_t output_len);

// Defaults matching the command-line tool with `rho = 1`.
struct NndcaDcaOptions nndca_dca_options_default(void);

// Runs DCA from a random feasible start drawn with `options.seed` and writes
// the final input into `d_out[0..d_len]`.
//
// # Safety
// Pointers must be valid; `d_out` must hold `d_len` elements.
enum NndcaStatus nndca_dca_solve(const struct NndcaNetwork *net,
                                 const struct NndcaDomain *domain,
                                 const struct NndcaDcaOptions *options,
                                 double *d_out,
                                 size_t d_len,
                                 struct NndcaSolveResult *result);

// Certifies a penalty bound and fine-tunes it. `options.rho` is ignored;
// the other fields configure the fine-tuning DCA runs.
//
// # Safety
// Pointers must be valid.
enum NndcaStatus nndca_certify(const struct NndcaNetwork *net,
                               const struct NndcaDomain *domain,
                               const struct NndcaDcaOptions *options,
                               double *rho_bar,
                               double *rho_star);

// Global minimum by enumerating activation patterns; fails with
// `SIZE_CAP` when the network has more than `cap` hidden neurons.
//
// # Safety
// Pointers must be valid; `d_out` must hold `d_len` elements.
enum NndcaStatus nndca_oracle(const struct NndcaNetwork *net,
                              const struct NndcaDomain *domain,
                              size_t cap,
                              double *d_out,
                              size_t d_len,
                              double *objective);

// Parses a grid case document.
//
// # Safety
// `json` must be a nul-terminated string; `out` must be writable.
enum NndcaStatus nndca_grid_from_json(const char *json, struct NndcaGrid **out);

// Reads a grid case document from a file.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum NndcaStatus nndca_grid_load(const char *path, struct NndcaGrid **out);

// # Safety
// `grid` must come from this library and not be used afterwards. Null is
// ignored.
void nndca_grid_free(struct NndcaGrid *grid);

// # Safety
// `grid` must be a live handle or null (returns 0).
size_t nndca_grid_buses(const struct NndcaGrid *grid);

// # Safety
// `grid` must be a live handle or null (returns 0).
size_t nndca_grid_data_centers(const struct NndcaGrid *grid);

// Solves the OPF with data-center demands `dc[0..dc_len]`, writes the LMP of
// every bus into `pi_out[0..pi_len]` and the data centers' charge into
// `charge`.
//
// # Safety
// Pointers must be valid; arrays must hold the stated number of elements.
enum NndcaStatus nndca_opf_lmps(const struct NndcaGrid *grid,
                                const double *dc,
                                size_t dc_len,
                                double *pi_out,
                                size_t pi_len,
                                double *charge);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NNDCA_H */

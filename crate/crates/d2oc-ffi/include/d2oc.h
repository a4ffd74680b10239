#ifndef D2OC_H
#define D2OC_H

/*
 * C interface for the d2oc coverage library.
 *
 * This header is maintained by hand. The crate's header consistency test
 * fails whenever the declarations here drift from the exported functions
 * in src/lib.rs.
 *
 * Every fallible function returns a D2ocStatus and writes its result
 * through out pointers. On any nonzero status the thread-local message
 * from d2oc_last_error_message() describes the failure and the out
 * pointers are left untouched.
 */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum D2ocStatus {
  D2OC_STATUS_OK = 0,
  D2OC_STATUS_NULL_POINTER = -1,
  D2OC_STATUS_INVALID_UTF8 = -2,
  D2OC_STATUS_PARSE_ERROR = -3,
  D2OC_STATUS_DIMENSION_ERROR = -4,
  D2OC_STATUS_NUMERIC_ERROR = -5,
  D2OC_STATUS_IO_ERROR = -6,
  D2OC_STATUS_RUNTIME_ERROR = -7,
} D2ocStatus;

/*
 * Opaque handle around an agent model. Obtained from a constructor and
 * released with d2oc_model_free().
 */
typedef struct D2ocModel D2ocModel;

/*
 * Structural facts about a model. relative_degree is the number of steps
 * until an input first reaches the output, or -1 when no power of the
 * state matrix connects them.
 */
typedef struct D2ocModelReport {
  uint64_t states;
  uint64_t inputs;
  uint64_t outputs;
  int64_t relative_degree;
  uint8_t controllable;
  double spectral_radius;
} D2ocModelReport;

/*
 * Headline numbers of a finished simulation. completed is 1 when the
 * residual mass fell below the configured threshold before the step
 * budget ran out, 0 otherwise.
 */
typedef struct D2ocSimResult {
  uint64_t steps;
  uint8_t completed;
  double final_swd;
  double residual_mass;
  double max_designated_distance;
} D2ocSimResult;

/*
 * Parse an agent model from its JSON description. json must be a
 * NUL-terminated UTF-8 string. On success *out owns the model.
 */
D2ocStatus d2oc_model_from_json(const char *json, D2ocModel **out);

/*
 * Build the twelve-state quadrotor model used by the simulator.
 */
D2ocStatus d2oc_quadrotor_model(double dt, double input_bound,
                                D2ocModel **out);

/*
 * Release a model handle. Passing NULL is a no-op.
 */
void d2oc_model_free(D2ocModel *model);

/*
 * Fill *out with dimensions, relative degree, controllability, and the
 * spectral radius of the state matrix.
 */
D2ocStatus d2oc_model_check(const D2ocModel *model, D2ocModelReport *out);

/*
 * Softplus penalty (kappa / eta) * ln(1 + exp(eta * z)) and its
 * derivative with respect to z.
 */
double d2oc_penalty(double z, double kappa, double eta);
double d2oc_penalty_derivative(double z, double kappa, double eta);

/*
 * Sliced Wasserstein distance between two point sets with uniform
 * weights. xs holds n_x points of dim coordinates in row-major order and
 * ys holds n_y points of the same width. The squared distance estimate
 * is written to *out. Deterministic for a fixed seed.
 */
D2ocStatus d2oc_sliced_wasserstein(const double *xs, size_t n_x,
                                   const double *ys, size_t n_y, size_t dim,
                                   size_t n_projections, uint64_t seed,
                                   double *out);

/*
 * Run a full simulation from a JSON configuration document and report
 * the headline numbers. The document uses the same schema as the CLI
 * run command.
 */
D2ocStatus d2oc_run_config_json(const char *json, D2ocSimResult *out);

/*
 * Description of the most recent failure on the calling thread. The
 * pointer stays valid until the next fallible call from the same thread.
 * The string is empty when nothing has failed yet.
 */
const char *d2oc_last_error_message(void);

#ifdef __cplusplus
}
#endif

#endif

#ifndef CUTLOCUS_H
#define CUTLOCUS_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Status codes returned by every function.
 */
typedef enum {
  CL_STATUS_OK = 0,
  CL_STATUS_NULL_POINTER = 1,
  CL_STATUS_INVALID_ARGUMENT = 2,
  CL_STATUS_INVALID_DIMENSION = 3,
  CL_STATUS_NEWTON_DIVERGED = 4,
  CL_STATUS_RANK_DEFICIENT = 5,
  CL_STATUS_CONSTRAINT_VIOLATED = 6,
  CL_STATUS_CHART_INVALID = 7,
  CL_STATUS_EVALUATION_FAILED = 8,
  CL_STATUS_BRANCH_MISMATCH = 9,
  CL_STATUS_BUFFER_TOO_SMALL = 10,
  CL_STATUS_PANIC = 99,
} ClStatus;

/**
 * Discretisation selector for `scheme` arguments.
 */
typedef enum {
  CL_SCHEME_DEL = 0,
  CL_SCHEME_SYMP_EULER = 1,
  CL_SCHEME_RK2 = 2,
  CL_SCHEME_KKT = 3,
} ClScheme;

/**
 * Singularity label reported by [`cl_classify`].
 */
typedef enum {
  CL_LABEL_FOLD = 0,
  CL_LABEL_CUSP = 1,
  CL_LABEL_UMBILIC_CANDIDATE = 2,
} ClLabel;

typedef struct ClEndpointMap ClEndpointMap;

typedef struct ClLocus ClLocus;

typedef struct ClManifold ClManifold;

typedef struct ClTrajectory ClTrajectory;

typedef struct {
  double tol;
  size_t max_iter;
  double damping;
} ClSolverConfig;

typedef struct {
  /**
   * A [`ClLabel`] value.
   */
  int32_t label;
  double det;
  double kernel_cosine;
  double kernel_derivative;
  /**
   * Smallest singular value of the Jacobian.
   */
  double sigma_min;
  /**
   * Second smallest singular value (0 for one-dimensional charts).
   */
  double sigma_second;
} ClClassification;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cl_version(void);

/**
 * Message of the last failure on this thread. The pointer stays valid until
 * the next failing call on the same thread.
 */
const char *cl_last_error_message(void);

ClSolverConfig cl_solver_config_default(void);

/**
 * Ellipsoid with semi-axes `axes[0..n]`.
 */
ClStatus cl_ellipsoid_new(const double *axes, size_t n, ClManifold **out);

/**
 * Hyperplane `normal . q = offset` in `R^n`.
 */
ClStatus cl_hyperplane_new(const double *normal, size_t n, double offset, ClManifold **out);

void cl_manifold_free(ClManifold *m);

/**
 * Ambient dimension `n`, or 0 for a null handle.
 */
size_t cl_manifold_ambient_dim(const ClManifold *m);

/**
 * Radial projection of `q[0..n]` onto an ellipsoid.
 */
ClStatus cl_manifold_project(const ClManifold *m, const double *q, size_t n, double *out);

/**
 * Integrates `steps` steps from `(q0, p0)` (both of length `n`).
 */
ClStatus cl_integrate(const ClManifold *m,
                      int32_t scheme_code,
                      const double *q0,
                      const double *p0,
                      size_t n,
                      size_t steps,
                      const ClSolverConfig *cfg,
                      ClTrajectory **out);

void cl_trajectory_free(ClTrajectory *t);

/**
 * Number of steps `N` (positions are `N + 1` rows), or 0 for null.
 */
size_t cl_trajectory_steps(const ClTrajectory *t);

/**
 * Number of doubles written by [`cl_trajectory_positions`].
 */
size_t cl_trajectory_positions_len(const ClTrajectory *t);

/**
 * Positions `q_0 .. q_N`, row-major.
 */
ClStatus cl_trajectory_positions(const ClTrajectory *t, double *out, size_t len);

/**
 * Number of doubles written by [`cl_trajectory_multipliers`].
 */
size_t cl_trajectory_multipliers_len(const ClTrajectory *t);

/**
 * Multipliers, row-major (DEL and symplectic Euler: `lambda_1 ..
 * lambda_{N-1}`; midpoint rule: `lambda_0 .. lambda_{N-1}`).
 */
ClStatus cl_trajectory_multipliers(const ClTrajectory *t, double *out, size_t len);

/**
 * Polygonal length `sum |q_{k+1} - q_k|`.
 */
ClStatus cl_trajectory_length(const ClTrajectory *t, double *out);

/**
 * Endpoint map in the tangent chart at `base` (length `n`, on the manifold).
 */
ClStatus cl_endpoint_map_new(const ClManifold *m,
                             int32_t scheme_code,
                             const double *base,
                             size_t n,
                             size_t steps,
                             const ClSolverConfig *cfg,
                             ClEndpointMap **out);

void cl_endpoint_map_free(ClEndpointMap *map);

/**
 * Chart dimension `d`, or 0 for null.
 */
size_t cl_endpoint_map_chart_dim(const ClEndpointMap *map);

/**
 * `q_N` for chart point `v[0..d]`; writes `n` doubles.
 */
ClStatus cl_endpoint_map_eval(const ClEndpointMap *map,
                              const double *v,
                              size_t d,
                              double *out,
                              size_t len);

/**
 * Oriented Jacobian determinant at `v[0..d]`.
 */
ClStatus cl_endpoint_map_det(const ClEndpointMap *map, const double *v, size_t d, double *out);

/**
 * Singularity classification at `v[0..d]` with cusp threshold `eps_cusp`.
 */
ClStatus cl_classify(const ClEndpointMap *map,
                     const double *v,
                     size_t d,
                     double eps_cusp,
                     ClClassification *out);

/**
 * Locus pipeline on the box `[lo_i, hi_i]` with `res[i]` nodes per axis
 * (`d` axes, default tolerances).
 */
ClStatus cl_locus_compute(const ClEndpointMap *map,
                          const double *lo,
                          const double *hi,
                          const size_t *res,
                          size_t d,
                          ClLocus **out);

void cl_locus_free(ClLocus *l);

/**
 * Number of critical-set vertices.
 */
size_t cl_locus_vertex_count(const ClLocus *l);

/**
 * Critical-set vertices in chart coordinates, row-major (`count * d`).
 */
ClStatus cl_locus_vertices(const ClLocus *l, double *out, size_t len);

/**
 * Images of the critical-set vertices, row-major (`count * n`).
 */
ClStatus cl_locus_images(const ClLocus *l, double *out, size_t len);

size_t cl_locus_cusp_count(const ClLocus *l);

size_t cl_locus_umbilic_count(const ClLocus *l);

/**
 * The full diagram as JSON; release with [`cl_string_free`].
 */
ClStatus cl_locus_to_json(const ClLocus *l, char **out);

void cl_string_free(char *s);

/**
 * Counts discrete geodesics from `q0` to `q_n` (length `n`) no longer than
 * `bound`, by multistart shooting over `directions x speeds` seeds. If
 * `lengths` is non-null, up to `lengths_len` lengths are written in
 * ascending order.
 */
ClStatus cl_count_solutions(const ClManifold *m,
                            const double *q0,
                            const double *q_n,
                            size_t n,
                            size_t steps,
                            const ClSolverConfig *cfg,
                            double bound,
                            size_t directions,
                            size_t speeds,
                            size_t *count,
                            double *lengths,
                            size_t lengths_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CUTLOCUS_H */

#ifndef ICOPT_H
#define ICOPT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

#define ICOPT_OK 0

#define ICOPT_ERR_NULL_ARG 1

#define ICOPT_ERR_PARSE 2

#define ICOPT_ERR_SOLVER 3

#define ICOPT_ERR_NONCONVERGENCE 4

#define ICOPT_ERR_INVALID_ARG 5

#define ICOPT_ERR_BUFFER_TOO_SMALL 6

#define ICOPT_ERR_PANIC 7

// Use the rule from the problem file.
#define ICOPT_RULE_DEFAULT 0

#define ICOPT_RULE_TRAPEZOID 1

#define ICOPT_RULE_GAUSS 2

// Also solve by the resolvent path and record the agreement (Volterra).
#define ICOPT_FLAG_COMPARE_PATHS 1

// Build `K1` with `B(σ, t)` in place of `B(σ, s)` (Volterra).
#define ICOPT_FLAG_PRINTED_K1 2

#define ICOPT_FIELD_NODES 0

#define ICOPT_FIELD_CONTROL 1

#define ICOPT_FIELD_STATE 2

#define ICOPT_FIELD_COSTATE 3

// A parsed problem.
typedef struct IcoptProblem IcoptProblem;

// A solved problem.
typedef struct IcoptSolution IcoptSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on the calling thread, or an empty
// string. The pointer stays valid until the next failing call on this thread.
const char *icopt_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *icopt_version(void);

// Parses a JSON problem. On success `*out` owns a new handle.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
int32_t icopt_problem_parse(const char *json, struct IcoptProblem **out);

// # Safety
// `p` must be null or a handle from [`icopt_problem_parse`] not yet freed.
void icopt_problem_free(struct IcoptProblem *p);

// Solves `problem`. `grid_n = 0` keeps the node count of the problem file;
// `rule` is one of `ICOPT_RULE_*`; `flags` combines `ICOPT_FLAG_*`.
//
// # Safety
// `problem` must be a live handle and `out` a valid pointer.
int32_t icopt_solve(const struct IcoptProblem *problem,
                    size_t grid_n,
                    int32_t rule,
                    uint32_t flags,
                    struct IcoptSolution **out);

// # Safety
// `s` must be null or a handle from [`icopt_solve`] not yet freed.
void icopt_solution_free(struct IcoptSolution *s);

// # Safety
// `s` must be a live handle and `cost` a valid pointer.
int32_t icopt_solution_cost(const struct IcoptSolution *s, double *cost);

// Node count and component counts. `state_dim` is 0 for problems without a
// state (quadratic forms).
//
// # Safety
// `s` must be a live handle; output pointers must be valid.
int32_t icopt_solution_dims(const struct IcoptSolution *s,
                            size_t *nodes,
                            size_t *state_dim,
                            size_t *control_dim);

// Copies one field (`ICOPT_FIELD_*`) into `buf`, node-major. `*required`
// receives the element count; when `len` is smaller nothing is copied and
// `ICOPT_ERR_BUFFER_TOO_SMALL` is returned. A field the problem kind lacks
// has length 0.
//
// # Safety
// `s` must be a live handle, `required` valid, and `buf` valid for `len`
// writes (it may be null when `len` is 0).
int32_t icopt_solution_copy(const struct IcoptSolution *s,
                            int32_t field,
                            double *buf,
                            size_t len,
                            size_t *required);

// The solution as the same JSON document the command line writes with
// timings disabled. Release the string with [`icopt_string_free`].
//
// # Safety
// `s` must be a live handle and `out` a valid pointer.
int32_t icopt_solution_to_json(const struct IcoptSolution *s, char **out);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void icopt_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICOPT_H */

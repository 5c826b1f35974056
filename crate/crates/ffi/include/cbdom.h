#ifndef CBDOM_H
#define CBDOM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CbdomStatus {
  CBDOM_STATUS_OK = 0,
  CBDOM_STATUS_NULL_POINTER = 1,
  CBDOM_STATUS_INVALID_UTF8 = 2,
  CBDOM_STATUS_INVALID_CONFIG = 3,
  CBDOM_STATUS_INVALID_ARGUMENT = 4,
  CBDOM_STATUS_NUMERICAL = 5,
  // The run finished but one of its checks failed.
  CBDOM_STATUS_CHECK_FAILED = 6,
  CBDOM_STATUS_IO = 7,
  CBDOM_STATUS_PANIC = 8,
} CbdomStatus;

// Opaque vector-valued grid function.
typedef struct CbdomFunction CbdomFunction;

// Opaque dyadic lattice.
typedef struct CbdomLattice CbdomLattice;

// Opaque linear operator on grid functions.
typedef struct CbdomOperator CbdomOperator;

// Opaque matrix weight.
typedef struct CbdomWeight CbdomWeight;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *cbdom_last_error(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed.
void cbdom_string_free(char *s);

// Runs an experiment config (JSON text) writing artifacts into `out_dir`.
// `*result_json` receives `{"passed", "exitCode", "summary", "files"}`.
//
// # Safety
// Pointer arguments must be valid NUL-terminated strings; `result_json` must
// be writable.
enum CbdomStatus cbdom_run_json(const char *config_json, const char *out_dir, char **result_json);

// # Safety
// `out` must be writable.
enum CbdomStatus cbdom_lattice_new(uint8_t dim, uint8_t level, struct CbdomLattice **out);

// Number of finest cells.
//
// # Safety
// `lattice` must be a live handle and `out` writable.
enum CbdomStatus cbdom_lattice_cells(const struct CbdomLattice *lattice, size_t *out);

// # Safety
// `lattice` must be null or a live handle.
void cbdom_lattice_free(struct CbdomLattice *lattice);

// Grid function from `len = cells · d` cell-major values.
//
// # Safety
// `values` must point at `len` readable doubles.
enum CbdomStatus cbdom_function_new(const struct CbdomLattice *lattice,
                                    size_t d,
                                    const double *values,
                                    size_t len,
                                    struct CbdomFunction **out);

// Copies the values into `buf` (capacity `len`); `*written` gets the total
// count, so a short buffer reports the size it needs.
//
// # Safety
// `buf` must have room for `len` doubles.
enum CbdomStatus cbdom_function_values(const struct CbdomFunction *f,
                                       double *buf,
                                       size_t len,
                                       size_t *written);

// # Safety
// `f` must be null or a live handle.
void cbdom_function_free(struct CbdomFunction *f);

// Weight from a JSON weight spec (`{"kind": "scalarPower", "p": 0.5}` etc.).
//
// # Safety
// `spec_json` must be a NUL-terminated string and `out` writable.
enum CbdomStatus cbdom_weight_from_json(const struct CbdomLattice *lattice,
                                        const char *spec_json,
                                        size_t d,
                                        struct CbdomWeight **out);

// `[W]_{A₂}`, or the two-weight characteristic `[W, V]` when `v` is non-null.
//
// # Safety
// `w` must be live, `v` null or live, `out` writable.
enum CbdomStatus cbdom_weight_a2(const struct CbdomWeight *w,
                                 const struct CbdomWeight *v,
                                 double *out);

// # Safety
// `w` must be null or a live handle.
void cbdom_weight_free(struct CbdomWeight *w);

// Operator from a JSON operator spec (`{"kind": "czHilbert"}` etc.).
//
// # Safety
// `spec_json` must be a NUL-terminated string and `out` writable.
enum CbdomStatus cbdom_operator_from_json(const struct CbdomLattice *lattice,
                                          const char *spec_json,
                                          struct CbdomOperator **out);

// `*out = T f` (or `T* f` when `adjoint` is nonzero) as a new handle.
//
// # Safety
// Handles must be live and `out` writable.
enum CbdomStatus cbdom_operator_apply(const struct CbdomOperator *op,
                                      const struct CbdomFunction *f,
                                      int32_t adjoint,
                                      struct CbdomFunction **out);

// # Safety
// `op` must be null or a live handle.
void cbdom_operator_free(struct CbdomOperator *op);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CBDOM_H */

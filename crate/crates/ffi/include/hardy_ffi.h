#ifndef HARDY_FFI_H
#define HARDY_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HlStatus {
  HL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  HL_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not UTF-8 or not valid JSON for its role.
   */
  HL_STATUS_BAD_STRING = 2,
  /**
   * Config, grid or family rejected.
   */
  HL_STATUS_CONFIG = 3,
  /**
   * Parameter, shape or domain error inside the library.
   */
  HL_STATUS_INVALID = 4,
  /**
   * A verification gate failed: non-elliptic operator, kernel constraint, or a report gate.
   */
  HL_STATUS_GATE = 5,
  /**
   * Ill-conditioning, diverging ladders and other numerical failures.
   */
  HL_STATUS_NUMERICAL = 6,
  HL_STATUS_IO = 7,
  HL_STATUS_PANIC = 8,
} HlStatus;

typedef struct HlField HlField;

typedef struct HlGrid HlGrid;

typedef struct HlOperator HlOperator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success. Owned by the library.
 */
const char *hl_last_error(void);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum HlStatus hl_grid_new(size_t dim,
                          double box_half_width,
                          size_t points_per_axis,
                          double margin,
                          struct HlGrid **out);

/**
 * # Safety
 * `grid` must come from `hl_grid_new` (or be null) and not be used afterwards.
 */
void hl_grid_free(struct HlGrid *grid);

/**
 * Lattice points per channel, or 0 for a null grid.
 *
 * # Safety
 * `grid` must be a live handle or null.
 */
size_t hl_grid_len(const struct HlGrid *grid);

/**
 * Samples a registered family given as JSON, e.g. `{"name": "gaussian_bump", "params": {"width": 0.3}}`.
 *
 * # Safety
 * Pointers must be valid; `family_json` NUL-terminated.
 */
enum HlStatus hl_field_sample(const struct HlGrid *grid,
                              const char *family_json,
                              size_t channels,
                              struct HlField **out);

/**
 * Builds a field from channel-major real and imaginary parts of length `len`;
 * `im` may be null for a real field.
 *
 * # Safety
 * `re` (and `im` when non-null) must hold `len` doubles.
 */
enum HlStatus hl_field_from_values(const struct HlGrid *grid,
                                   size_t channels,
                                   const double *re,
                                   const double *im,
                                   size_t len,
                                   struct HlField **out);

/**
 * # Safety
 * `field` must be a live handle or null.
 */
size_t hl_field_len(const struct HlField *field);

/**
 * # Safety
 * `field` must be a live handle or null.
 */
size_t hl_field_channels(const struct HlField *field);

/**
 * Copies the samples out; `len` must equal `hl_field_len`. `im` may be null.
 *
 * # Safety
 * `re` (and `im` when non-null) must be writable for `len` doubles.
 */
enum HlStatus hl_field_values(const struct HlField *field, double *re, double *im, size_t len);

/**
 * # Safety
 * `field` must come from this library (or be null) and not be used afterwards.
 */
void hl_field_free(struct HlField *field);

/**
 * Local Hardy norm with the bump profile on the default dyadic scales.
 *
 * # Safety
 * Pointers must be valid.
 */
enum HlStatus hl_hp_norm(const struct HlField *field, double p, double *out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum HlStatus hl_hardy_sobolev_norm(const struct HlField *field,
                                    size_t m,
                                    double p,
                                    bool homogeneous,
                                    double *out);

/**
 * Registered operator by name; `params_json` is an object of numbers or null.
 *
 * # Safety
 * `name` must be NUL-terminated; `params_json` NUL-terminated or null.
 */
enum HlStatus hl_operator_by_name(const char *name,
                                  const char *params_json,
                                  struct HlOperator **out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum HlStatus hl_operator_adjoint(const struct HlOperator *op, struct HlOperator **out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum HlStatus hl_operator_apply(const struct HlOperator *op,
                                const struct HlField *field,
                                struct HlField **out);

/**
 * # Safety
 * `op` must come from this library (or be null) and not be used afterwards.
 */
void hl_operator_free(struct HlOperator *op);

/**
 * J_m f = (I - Laplacian)^(-m/2) f.
 *
 * # Safety
 * Pointers must be valid.
 */
enum HlStatus hl_bessel_potential(const struct HlField *field, size_t m, struct HlField **out);

/**
 * Runs an experiment config and returns the report JSON in `*report_json` (free with
 * `hl_string_free`). A report whose gates fail is still returned, with `HL_STATUS_GATE`.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `report_json` valid for writes.
 */
enum HlStatus hl_run_experiment(const char *config_json, char **report_json);

/**
 * # Safety
 * `s` must come from this library (or be null) and not be used afterwards.
 */
void hl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HARDY_FFI_H */

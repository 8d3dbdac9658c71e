#ifndef MFGLAB_H
#define MFGLAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum MfgStatus {
  MFG_STATUS_OK = 0,
  MFG_STATUS_NULL_POINTER = 1,
  MFG_STATUS_INVALID_INPUT = 2,
  MFG_STATUS_NON_CONVERGENCE = 3,
  MFG_STATUS_DIVERGENCE = 4,
  MFG_STATUS_SCHEME_VIOLATION = 5,
  MFG_STATUS_BUFFER_TOO_SMALL = 6,
  MFG_STATUS_IO = 7,
  MFG_STATUS_PANIC = 8,
  MFG_STATUS_OTHER = 9,
} MfgStatus;

/**
 * Value oracle `U(t, ., m)` built from a scenario document.
 */
typedef struct MfgOracle MfgOracle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds an oracle from a scenario JSON document. Relative kernel paths resolve against
 * `base_dir`, which may be null for the current directory.
 *
 * # Safety
 * `scenario_json` and a non-null `base_dir` must be NUL-terminated strings; `out` must be
 * writable.
 */
enum MfgStatus mfg_oracle_new(const char *scenario_json,
                              const char *base_dir,
                              struct MfgOracle **out);

/**
 * # Safety
 * `oracle` must come from `mfg_oracle_new` and not be used afterwards. Null is ignored.
 */
void mfg_oracle_free(struct MfgOracle *oracle);

/**
 * Number of grid cells, 0 for a null handle.
 *
 * # Safety
 * `oracle` must be null or a live handle.
 */
size_t mfg_oracle_cells(const struct MfgOracle *oracle);

/**
 * Time step of the oracle, NaN for a null handle.
 *
 * # Safety
 * `oracle` must be null or a live handle.
 */
double mfg_oracle_dt(const struct MfgOracle *oracle);

/**
 * `U(t, ., m)` for the probability density `density` (cell values, `h^d sum = 1`).
 *
 * # Safety
 * `density` must hold `len` values and `out` must have room for `out_len` values.
 */
enum MfgStatus mfg_oracle_value(const struct MfgOracle *oracle,
                                double t,
                                const double *density,
                                size_t len,
                                double *out,
                                size_t out_len);

/**
 * Pointwise master-equation residual at `(t, m)` with flat-derivative step `eps`.
 *
 * # Safety
 * Same contract as `mfg_oracle_value`.
 */
enum MfgStatus mfg_oracle_master_residual(const struct MfgOracle *oracle,
                                          double t,
                                          const double *density,
                                          size_t len,
                                          double eps,
                                          double *out,
                                          size_t out_len);

/**
 * Monge-Kantorovich distance between two probability densities on the `d`-dimensional
 * grid with `n` points per axis.
 *
 * # Safety
 * `a` and `b` must hold `len` values each; `out` must be writable.
 */
enum MfgStatus mfg_w1_distance(size_t d,
                               size_t n,
                               const double *a,
                               const double *b,
                               size_t len,
                               double *out);

/**
 * Runs a scenario file into `out_dir`; the process-style exit code lands in `exit_code`.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `exit_code` must be writable.
 */
enum MfgStatus mfg_run_scenario(const char *scenario_path,
                                const char *out_dir,
                                bool parallel,
                                int32_t *exit_code);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated, truncated
 * to `len`) and returns its full length without the terminator.
 *
 * # Safety
 * `buf` must be null or have room for `len` bytes.
 */
size_t mfg_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mfg_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFGLAB_H */

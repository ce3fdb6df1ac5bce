#ifndef CES_H
#define CES_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CesStatus {
  CES_STATUS_OK = 0,
  /**
   * Failure without a more specific code.
   */
  CES_STATUS_OTHER = 1,
  CES_STATUS_CONFIG = 2,
  /**
   * An upstream stage is missing or its artifacts changed.
   */
  CES_STATUS_UPSTREAM = 3,
  /**
   * Numerical failure: factorization, GP training, stalled sampler or
   * failed model evaluation.
   */
  CES_STATUS_NUMERICAL = 4,
  CES_STATUS_DOMAIN = 5,
  CES_STATUS_DIMENSION = 6,
  CES_STATUS_INVALID_INPUT = 7,
  CES_STATUS_UNSUPPORTED = 8,
  CES_STATUS_IO = 9,
  CES_STATUS_ARTIFACT = 10,
  CES_STATUS_NULL_POINTER = 11,
  CES_STATUS_UTF8 = 12,
  CES_STATUS_PANIC = 13,
} CesStatus;

typedef enum CesPreset {
  CES_PRESET_LORENZ96 = 0,
  CES_PRESET_LINEAR = 1,
} CesPreset;

typedef enum CesStage {
  CES_STAGE_GENERATE_TRUTH = 0,
  CES_STAGE_CALIBRATE = 1,
  CES_STAGE_EMULATE = 2,
  CES_STAGE_SAMPLE = 3,
  CES_STAGE_PREDICT = 4,
  CES_STAGE_BENCHMARK = 5,
} CesStage;

/**
 * Opaque pipeline configuration.
 */
typedef struct CesConfig CesConfig;

/**
 * Opaque trained emulator.
 */
typedef struct CesEmulator CesEmulator;

/**
 * Opaque run directory bound to a configuration.
 */
typedef struct CesRun CesRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ces_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *ces_last_error(void);

/**
 * # Safety
 * `s` is NULL or a string returned by this library and not yet freed.
 */
void ces_string_free(char *s);

/**
 * Default configuration for a preset model.
 *
 * # Safety
 * `out` is a valid pointer to writable storage.
 */
enum CesStatus ces_config_default(enum CesPreset preset, struct CesConfig **out);

/**
 * Parses and validates a TOML configuration.
 *
 * # Safety
 * `toml` is a NUL-terminated string; `out` is writable.
 */
enum CesStatus ces_config_from_toml(const char *toml, struct CesConfig **out);

/**
 * Reads and validates a TOML configuration file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum CesStatus ces_config_load(const char *path, struct CesConfig **out);

/**
 * TOML text of a configuration; free with [`ces_string_free`].
 *
 * # Safety
 * `config` is a live handle; `out` is writable.
 */
enum CesStatus ces_config_to_toml(const struct CesConfig *config, char **out);

/**
 * Hex SHA-256 identifying the configuration; free with [`ces_string_free`].
 *
 * # Safety
 * `config` is a live handle; `out` is writable.
 */
enum CesStatus ces_config_hash(const struct CesConfig *config, char **out);

/**
 * # Safety
 * `config` is NULL or a live handle, not used afterwards.
 */
void ces_config_free(struct CesConfig *config);

/**
 * Opens (creating if needed) a run directory for `config`. A directory
 * created under a different configuration is refused with `CES_STATUS_CONFIG`.
 *
 * # Safety
 * `dir` is a NUL-terminated string; `config` is a live handle; `out` is writable.
 */
enum CesStatus ces_run_open(const char *dir, const struct CesConfig *config, struct CesRun **out);

/**
 * Runs one stage. `realization` is 1-based and ignored by
 * `CES_STAGE_GENERATE_TRUTH`.
 *
 * # Safety
 * `run` is a live handle.
 */
enum CesStatus ces_run_stage(const struct CesRun *run, enum CesStage stage, size_t realization);

/**
 * # Safety
 * `run` is NULL or a live handle, not used afterwards.
 */
void ces_run_free(struct CesRun *run);

/**
 * Writes `<dir>/report/`. `*written` is false when no sampling stage has
 * completed, in which case nothing is written.
 *
 * # Safety
 * `dir` is a NUL-terminated string; `written` is writable.
 */
enum CesStatus ces_report(const char *dir, bool *written);

/**
 * Loads the emulator trained for `realization` (1-based) of an open run.
 *
 * # Safety
 * `run` is a live handle; `out` is writable.
 */
enum CesStatus ces_emulator_load(const struct CesRun *run,
                                 size_t realization,
                                 struct CesEmulator **out);

/**
 * Number of parameters and of data outputs.
 *
 * # Safety
 * `emulator` is a live handle; both out-pointers are writable.
 */
enum CesStatus ces_emulator_dims(const struct CesEmulator *emulator,
                                 size_t *n_params,
                                 size_t *n_outputs);

/**
 * Predictive mean (`n_outputs`) and covariance (`n_outputs` x `n_outputs`,
 * row-major) in data coordinates at computational-space parameters `theta`.
 *
 * # Safety
 * `emulator` is a live handle; `theta` holds `n_params` doubles; `mean` and
 * `cov` have room for `n_outputs` and `n_outputs * n_outputs` doubles.
 */
enum CesStatus ces_emulator_predict(const struct CesEmulator *emulator,
                                    const double *theta,
                                    size_t n_params,
                                    double *mean,
                                    double *cov,
                                    size_t n_outputs);

/**
 * # Safety
 * `emulator` is NULL or a live handle, not used afterwards.
 */
void ces_emulator_free(struct CesEmulator *emulator);

/**
 * One ensemble Kalman inversion update,
 * `theta_m += C_thetaG (gamma + C_GG)^-1 (y - G_m)`, with ensemble
 * covariances normalized by `1 / (m - 1)`.
 *
 * # Safety
 * `members` and `updated` hold `m * p` doubles, `outputs` holds `m * d`,
 * `y` holds `d` and `gamma` holds `d * d`, all row-major. `updated` may
 * alias `members`.
 */
enum CesStatus ces_eki_update(size_t m,
                              size_t p,
                              size_t d,
                              const double *members,
                              const double *outputs,
                              const double *y,
                              const double *gamma,
                              double *updated);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CES_H */

/* C interface to the sfbs solver library. Generated by cbindgen. */

#ifndef SFBS_H
#define SFBS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum sfbs_status {
  SFBS_OK = 0,
  /**
   * Runs finished but missed the requested tolerance.
   */
  SFBS_INCOMPLETE = 1,
  SFBS_CERTIFICATE_FAILURE = 2,
  SFBS_DIVERGENCE = 3,
  SFBS_CONFIG_ERROR = 4,
  SFBS_NULL_ARGUMENT = 5,
  SFBS_INVALID_UTF8 = 6,
  SFBS_IO_ERROR = 7,
  SFBS_INTERNAL_PANIC = 8,
} sfbs_status;

/**
 * An opened experiment configuration. Opaque to callers.
 */
typedef struct sfbs_experiment sfbs_experiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *sfbs_version(void);

/**
 * Message describing the most recent failure on this thread; valid until
 * the next failing call. Do not free.
 */
const char *sfbs_last_error(void);

/**
 * Parse and validate a configuration file. On success `*out` owns a handle.
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated string and `out` a valid
 * pointer.
 */
enum sfbs_status sfbs_experiment_open(const char *config_path, struct sfbs_experiment **out);

/**
 * Release a handle returned by [`sfbs_experiment_open`]. Null is ignored.
 *
 * # Safety
 * `exp` must be a handle from `sfbs_experiment_open` not yet freed.
 */
void sfbs_experiment_free(struct sfbs_experiment *exp);

/**
 * Redirect the experiment's artifacts to `dir` (equivalent to the output
 * root override).
 *
 * # Safety
 * `exp` must be a live handle; `dir` a valid NUL-terminated string.
 */
enum sfbs_status sfbs_experiment_set_output_dir(struct sfbs_experiment *exp, const char *dir);

/**
 * Evaluate the pre-run certificates. `*pass_out` receives the overall
 * verdict and `*report_json_out` (optional) a JSON clause list.
 *
 * # Safety
 * `exp` must be a live handle; out-pointers may be null to skip them.
 */
enum sfbs_status sfbs_experiment_certify(struct sfbs_experiment *exp,
                                         bool *pass_out,
                                         char **report_json_out);

/**
 * Execute every seeded run. `*exit_code_out` receives the CLI-compatible
 * exit code; `*summary_path_out` (optional) the path of `summary.json`.
 * The return status mirrors the exit code.
 *
 * # Safety
 * `exp` must be a live handle; out-pointers may be null to skip them.
 */
enum sfbs_status sfbs_experiment_run(struct sfbs_experiment *exp,
                                     int32_t *exit_code_out,
                                     char **summary_path_out);

/**
 * Run the growing-batch reproduction; `*summary_json_out` (optional)
 * receives the fitted-slope summary as JSON.
 *
 * # Safety
 * `exp` must be a live handle; `summary_json_out` may be null.
 */
enum sfbs_status sfbs_experiment_reproduce52(struct sfbs_experiment *exp, char **summary_json_out);

/**
 * The configuration schema as a JSON string; free with
 * [`sfbs_string_free`]. Returns null only on allocation failure.
 */
char *sfbs_config_schema_json(void);

/**
 * Release a string allocated by this library. Null is ignored.
 *
 * # Safety
 * `s` must originate from an `sfbs_*` call and not have been freed.
 */
void sfbs_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFBS_H */

#ifndef HARQ_NC_H
#define HARQ_NC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
enum HarqNcStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  HARQ_NC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  HARQ_NC_STATUS_NULL_ARGUMENT = -1,
  /**
   * A string argument was not valid UTF-8.
   */
  HARQ_NC_STATUS_INVALID_UTF8 = -2,
  /**
   * The scenario document could not be read or parsed.
   */
  HARQ_NC_STATUS_PARSE_ERROR = -3,
  /**
   * The scenario violates the data-model invariants.
   */
  HARQ_NC_STATUS_VALIDATION_ERROR = -4,
  /**
   * The operation is not supported for this scenario.
   */
  HARQ_NC_STATUS_UNSUPPORTED = -5,
  /**
   * A runtime or numerical failure occurred.
   */
  HARQ_NC_STATUS_RUNTIME_ERROR = -6,
  /**
   * A panic was caught at the FFI boundary.
   */
  HARQ_NC_STATUS_PANIC = -7,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum HarqNcStatus HarqNcStatus;
#else
typedef int32_t HarqNcStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque scenario handle.
 */
typedef struct HarqScenario HarqScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string (do not free).
 */
const char *harq_nc_version(void);

/**
 * Message from the most recent failure on this thread, or null. The
 * caller owns the returned string and must release it with
 * [`harq_nc_string_free`].
 */
char *harq_nc_last_error_message(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by one of the
 * string-producing functions here, not yet freed.
 */
void harq_nc_string_free(char *s);

/**
 * Load and validate a scenario document from a file path.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to receive the handle.
 */
HarqNcStatus harq_nc_scenario_load_file(const char *path, HarqScenario **out);

/**
 * Parse and validate a scenario document from a JSON string.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to receive the handle.
 */
HarqNcStatus harq_nc_scenario_load_json(const char *json, HarqScenario **out);

/**
 * Release a scenario handle.
 *
 * # Safety
 * `scenario` must be null or a handle from a load function, not yet freed.
 */
void harq_nc_scenario_free(HarqScenario *scenario);

/**
 * Override the scenario seed.
 *
 * # Safety
 * `scenario` must be a live handle from a load function.
 */
HarqNcStatus harq_nc_scenario_set_seed(HarqScenario *scenario, uint64_t seed);

/**
 * Override the Monte Carlo run count (must be >= 1).
 *
 * # Safety
 * `scenario` must be a live handle from a load function.
 */
HarqNcStatus harq_nc_scenario_set_runs(HarqScenario *scenario, uint64_t runs);

/**
 * Override the switching policy, e.g. "harq_optimal", "always_tx",
 * "random(0.3)", "age_threshold(2)".
 *
 * # Safety
 * `scenario` must be a live handle; `policy` a valid NUL-terminated string.
 */
HarqNcStatus harq_nc_scenario_set_policy(HarqScenario *scenario, const char *policy);

/**
 * Validate the scenario. Returns the number of violations (0 when clean)
 * or a negative status code; `out_json`, when non-null, receives a JSON
 * array of `{field, rule}` objects.
 *
 * # Safety
 * `scenario` must be a live handle; `out_json` null or valid for writes.
 */
int32_t harq_nc_scenario_validate(const HarqScenario *scenario, char **out_json);

/**
 * SHA-256 of the canonical scenario document, hex-encoded.
 *
 * # Safety
 * `scenario` must be a live handle; `out` valid for writes.
 */
HarqNcStatus harq_nc_scenario_hash(const HarqScenario *scenario, char **out);

/**
 * Run one episode and return its trace as CSV (same layout as the CLI).
 *
 * # Safety
 * `scenario` must be a live handle; `out_csv` valid for writes.
 */
HarqNcStatus harq_nc_run_episode_csv(const HarqScenario *scenario,
                                     uint64_t run_index,
                                     char **out_csv);

/**
 * Run one episode and return its trace as a JSON document.
 *
 * # Safety
 * `scenario` must be a live handle; `out_json` valid for writes.
 */
HarqNcStatus harq_nc_run_episode_json(const HarqScenario *scenario,
                                      uint64_t run_index,
                                      char **out_json);

/**
 * Monte Carlo sweep over the scenario's run count; the summary comes back
 * as a JSON document. `workers` = 0 uses all cores; results are identical
 * for every worker count.
 *
 * # Safety
 * `scenario` must be a live handle; `out_json` valid for writes.
 */
HarqNcStatus harq_nc_monte_carlo_json(const HarqScenario *scenario,
                                      int32_t workers,
                                      char **out_json);

/**
 * Riccati cost-to-go and gain schedules as CSV.
 *
 * # Safety
 * `scenario` must be a live handle; `out_csv` valid for writes.
 */
HarqNcStatus harq_nc_gains_csv(const HarqScenario *scenario, char **out_csv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HARQ_NC_H */

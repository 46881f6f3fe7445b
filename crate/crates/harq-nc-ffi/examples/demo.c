/* Minimal consumer of the C API: load a scenario, validate it, run a
 * Monte Carlo sweep, print the summary JSON.
 *
 * Build (from the workspace root, after `cargo build --release -p harq-nc-ffi`):
 *   cc crates/harq-nc-ffi/examples/demo.c \
 *      -Icrates/harq-nc-ffi/include \
 *      target/release/libharq_nc_ffi.a -lpthread -ldl -lm \
 *      -o harq_nc_demo
 *   ./harq_nc_demo crates/harq-nc/scenarios/pendulum.json
 */
#include <stdio.h>
#include <stdlib.h>

#include "harq_nc.h"

static void bail(const char *what) {
    char *msg = harq_nc_last_error_message();
    fprintf(stderr, "%s: %s\n", what, msg ? msg : "(no message)");
    harq_nc_string_free(msg);
    exit(1);
}

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s SCENARIO.json\n", argv[0]);
        return 2;
    }
    printf("harq-nc %s\n", harq_nc_version());

    HarqScenario *scenario = NULL;
    if (harq_nc_scenario_load_file(argv[1], &scenario) != HARQ_NC_STATUS_OK)
        bail("load");

    int violations = harq_nc_scenario_validate(scenario, NULL);
    if (violations < 0)
        bail("validate");
    printf("%d violations\n", violations);

    harq_nc_scenario_set_seed(scenario, 7);
    harq_nc_scenario_set_runs(scenario, 50);

    char *summary = NULL;
    if (harq_nc_monte_carlo_json(scenario, 0, &summary) != HARQ_NC_STATUS_OK)
        bail("monte carlo");
    puts(summary);

    harq_nc_string_free(summary);
    harq_nc_scenario_free(scenario);
    return 0;
}

/* Minimal round trip through the C interface: build a preset, run a
 * batch, and read a cost report.
 *
 *   cargo build -p sknet-ffi
 *   cc -std=c11 -Wall -Wextra -Werror -Icrates/sknet-ffi/include \
 *      crates/sknet-ffi/examples/smoke.c target/debug/libsknet_ffi.a \
 *      -lm -o smoke && ./smoke
 */
#include <stdio.h>
#include <string.h>
#include "sknet.h"

int main(void) {
    printf("version %s\n", sknet_version());
    char *toml = sknet_preset_toml("sknet29-tiny");
    if (!toml) { fprintf(stderr, "preset: %s\n", sknet_last_error()); return 1; }

    SknetModel *model = NULL;
    if (sknet_model_build(toml, 3, &model) != SKNET_STATUS_OK) {
        fprintf(stderr, "build: %s\n", sknet_last_error());
        return 1;
    }
    printf("classes %u, sk units %u\n",
           sknet_model_class_count(model), sknet_model_sk_unit_count(model));

    double data[2 * 3 * 16 * 16];
    for (size_t i = 0; i < sizeof data / sizeof *data; i++) data[i] = (double)i * 1e-4 - 0.5;
    double logits[2 * 4];
    if (sknet_model_forward(model, data, 2, 3, 16, 16, logits, 8) != SKNET_STATUS_OK) {
        fprintf(stderr, "forward: %s\n", sknet_last_error());
        return 1;
    }
    printf("logit[0] %f logit[7] %f\n", logits[0], logits[7]);

    char *json = sknet_cost_json(toml, 32);
    if (!json) { fprintf(stderr, "cost: %s\n", sknet_last_error()); return 1; }
    printf("cost json %zu bytes\n", strlen(json));

    sknet_string_free(json);
    sknet_string_free(toml);
    sknet_model_free(model);
    puts("ok");
    return 0;
}

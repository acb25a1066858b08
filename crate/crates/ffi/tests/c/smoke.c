/* Drives the C API end to end: argv[1] store dir, argv[2] sandbox dir,
 * argv[3] sandbox PATH entry, argv[4] project tree, argv[5] request JSON. */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "reprokit.h"

static char *slurp(const char *path) {
    FILE *f = fopen(path, "rb");
    if (!f) return NULL;
    fseek(f, 0, SEEK_END);
    long n = ftell(f);
    fseek(f, 0, SEEK_SET);
    char *buf = malloc((size_t)n + 1);
    if (fread(buf, 1, (size_t)n, f) != (size_t)n) {
        fclose(f);
        free(buf);
        return NULL;
    }
    buf[n] = '\0';
    fclose(f);
    return buf;
}

/* Copies the value of "key":"..." out of a flat JSON document. */
static int field(const char *json, const char *key, char *out, size_t cap) {
    char pat[64];
    snprintf(pat, sizeof pat, "\"%s\":\"", key);
    const char *p = strstr(json, pat);
    if (!p) return -1;
    p += strlen(pat);
    size_t i = 0;
    while (p[i] && p[i] != '"' && i + 1 < cap) { out[i] = p[i]; i++; }
    out[i] = '\0';
    return 0;
}

static int check(RkStatus got, RkStatus want, const char *what) {
    if (got != want) {
        const char *err = rk_last_error();
        fprintf(stderr, "%s: status %d, want %d: %s\n", what, (int)got, (int)want, err ? err : "(none)");
        return 1;
    }
    return 0;
}

int main(int argc, char **argv) {
    if (argc != 6) {
        fprintf(stderr, "usage: smoke STORE SANDBOX PATHDIR TREE REQUEST\n");
        return 2;
    }
    char config[4096];
    snprintf(config, sizeof config,
             "{\"store\":\"%s\",\"driver\":\"sandbox\",\"sandboxDir\":\"%s\",\"sandboxPath\":[\"%s\"]}",
             argv[1], argv[2], argv[3]);
    RkService *svc = NULL;
    if (check(rk_service_open(config, &svc), RK_STATUS_OK, "open")) return 1;

    char *request = slurp(argv[5]);
    if (!request) return 1;
    char *dockerfile = NULL;
    if (check(rk_generate_spec(request, &dockerfile), RK_STATUS_OK, "spec")) return 1;
    fputs(dockerfile, stdout);
    rk_string_free(dockerfile);

    char *out = NULL;
    if (check(rk_create_project(svc, "{\"name\":\"c-smoke\"}", &out), RK_STATUS_OK, "create")) return 1;
    char id[128];
    if (field(out, "id", id, sizeof id)) return 1;
    rk_string_free(out);

    if (check(rk_add_files(svc, id, argv[4], &out), RK_STATUS_OK, "add")) return 1;
    rk_string_free(out);
    if (check(rk_build_environment(svc, id, request, &out), RK_STATUS_OK, "environment")) return 1;
    const char *tag = strstr(out, "\"tagId\":");
    if (!tag) return 1;
    long tag_id = strtol(tag + 8, NULL, 10);
    rk_string_free(out);

    char run[256];
    snprintf(run, sizeof run, "{\"command\":\"cat RLCheck/jqf/target/build.txt\",\"tagId\":%ld}", tag_id);
    if (check(rk_run(svc, id, run, &out), RK_STATUS_OK, "run")) return 1;
    if (!strstr(out, "\"exitCode\":0")) {
        fprintf(stderr, "run failed: %s\n", out);
        return 1;
    }
    rk_string_free(out);

    if (check(rk_run(svc, id, "{\"command\":\"true\",\"tagId\":999}", &out), RK_STATUS_NOT_FOUND, "missing tag"))
        return 1;
    if (!rk_last_error() || !strstr(rk_last_error(), "NotFound")) return 1;
    if (check(rk_create_project(NULL, "{}", &out), RK_STATUS_INVALID_ARGUMENT, "null handle")) return 1;

    rk_service_free(svc);
    free(request);
    fprintf(stderr, "ok %s\n", rk_version());
    return 0;
}

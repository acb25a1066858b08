#ifndef REPROKIT_H
#define REPROKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RkStatus {
  RK_STATUS_OK = 0,
  RK_STATUS_NOT_FOUND = 1,
  RK_STATUS_VALIDATION = 2,
  RK_STATUS_ENGINE_FAILURE = 3,
  RK_STATUS_STAGE_FAILURE = 4,
  RK_STATUS_STORAGE = 5,
  RK_STATUS_INVALID_ARGUMENT = 6,
  RK_STATUS_PANIC = 7,
} RkStatus;

/*
 Opaque service handle.
 */
typedef struct RkService RkService;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Open a service from a JSON configuration:
 `{"store", "driver"?, "engineCli"?, "sandboxDir"?, "sandboxPath"?}`.

 # Safety
 `config_json` is a valid NUL-terminated string and `out` is valid for
 one pointer write.
 */
enum RkStatus rk_service_open(const char *config_json, struct RkService **out);

/*
 # Safety
 `handle` is null or a pointer from [`rk_service_open`] not yet freed.
 */
void rk_service_free(struct RkService *handle);

/*
 Render the Dockerfile for an environment request.

 # Safety
 `request_json` is a valid NUL-terminated string and `out` is valid for
 one pointer write.
 */
enum RkStatus rk_generate_spec(const char *request_json, char **out);

/*
 Language profile of a JSON list of relative file paths.

 # Safety
 `paths_json` is a valid NUL-terminated string and `out` is valid for one
 pointer write.
 */
enum RkStatus rk_infer_languages(const char *paths_json, char **out);

/*
 # Safety
 `handle` comes from [`rk_service_open`]; `request_json` is a valid
 NUL-terminated string; `out` is valid for one pointer write.
 */
enum RkStatus rk_create_project(const struct RkService *handle,
                                const char *request_json,
                                char **out);

/*
 Add files from a local directory or zip archive, or from a git or DOI
 URL when `source` contains `://` or starts with `doi:`.

 # Safety
 `handle` comes from [`rk_service_open`]; `project_id` and `source` are
 valid NUL-terminated strings; `out` is valid for one pointer write.
 */
enum RkStatus rk_add_files(const struct RkService *handle,
                           const char *project_id,
                           const char *source,
                           char **out);

/*
 Generate the project's container spec and build its image.

 # Safety
 `handle` comes from [`rk_service_open`]; `project_id` and `request_json`
 are valid NUL-terminated strings; `out` is valid for one pointer write.
 */
enum RkStatus rk_build_environment(const struct RkService *handle,
                                   const char *project_id,
                                   const char *request_json,
                                   char **out);

/*
 Run a command: `{"command", "tagId", "datasetId"?}`.

 # Safety
 `handle` comes from [`rk_service_open`]; `project_id` and `request_json`
 are valid NUL-terminated strings; `out` is valid for one pointer write.
 */
enum RkStatus rk_run(const struct RkService *handle,
                     const char *project_id,
                     const char *request_json,
                     char **out);

/*
 Double-run or compare stored runs, as the `/verify` endpoint.

 # Safety
 `handle` comes from [`rk_service_open`]; `project_id` and `request_json`
 are valid NUL-terminated strings; `out` is valid for one pointer write.
 */
enum RkStatus rk_verify(const struct RkService *handle,
                        const char *project_id,
                        const char *request_json,
                        char **out);

/*
 Check a package directory; the result is its manifest.

 # Safety
 `dir` is a valid NUL-terminated string and `out` is valid for one
 pointer write.
 */
enum RkStatus rk_verify_package(const char *dir, char **out);

/*
 JSON error document of the last failed call on this thread, or null.
 Valid until the next failing call on the same thread.
 */
const char *rk_last_error(void);

/*
 # Safety
 `s` is null or a string returned through an `out` parameter of this
 library, not yet freed.
 */
void rk_string_free(char *s);

const char *rk_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPROKIT_H */

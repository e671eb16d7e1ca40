#ifndef GRIDBOX_H
#define GRIDBOX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every `gb_*` call.
typedef enum GbStatus {
  GB_STATUS_OK = 0,
  // A null pointer, non-UTF-8 string or similar misuse.
  GB_STATUS_INVALID_ARGUMENT = 1,
  // The node could not be reached.
  GB_STATUS_CONNECTION = 2,
  GB_STATUS_AUTH_FAILED = 3,
  // Query or algorithm text did not parse.
  GB_STATUS_SYNTAX = 4,
  GB_STATUS_NOT_FOUND = 5,
  // The node rejected the request for another reason.
  GB_STATUS_REJECTED = 6,
  // A bug in this library.
  GB_STATUS_INTERNAL = 7,
} GbStatus;

// Opaque client handle.
typedef struct GbClient GbClient;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or "" after a success.
// Owned by the library.
const char *gb_last_error(void);

// Library version, static.
const char *gb_version(void);

// Create a client for the node at `addr` (`host:port`). No connection is
// made yet.
//
// # Safety
// `addr` must be null or a NUL-terminated string; `out` writable.
enum GbStatus gb_client_new(const char *addr, struct GbClient **out);

// # Safety
// `c` must be null or a handle from [`gb_client_new`] not yet freed.
void gb_client_free(struct GbClient *c);

// Log in; the session token is kept in the handle.
//
// # Safety
// `c` must be a live handle; `user` and `credential` NUL-terminated strings.
enum GbStatus gb_authenticate(struct GbClient *c, const char *user, const char *credential);

// Use an existing session token instead of logging in.
//
// # Safety
// `c` must be a live handle; `token` a NUL-terminated string.
enum GbStatus gb_set_token(struct GbClient *c, const char *token);

// Copy of the current session token, or null when not logged in. Free
// with [`gb_string_free`].
//
// # Safety
// `c` must be a live handle; `out` must be writable.
enum GbStatus gb_token(struct GbClient *c, char **out);

// Run a federated query. `xml_out` receives the merged result set,
// `warnings_out` (optional) a JSON array of per-site warnings.
//
// # Safety
// `c` must be a live handle; `query` a NUL-terminated string; `xml_out`
// writable; `warnings_out` null or writable.
enum GbStatus gb_query(struct GbClient *c, const char *query, char **xml_out, char **warnings_out);

// Upload one image file. `receipt_out` (optional) receives the receipt as
// JSON: file reference, image and patient ids, bytes written.
//
// # Safety
// `c` must be a live handle; `data` must point to `len` readable bytes;
// `receipt_out` null or writable.
enum GbStatus gb_add(struct GbClient *c, const uint8_t *data, size_t len, char **receipt_out);

// Fetch file bytes by file id, image id, derived id or sha256. Free the
// buffer with [`gb_bytes_free`].
//
// # Safety
// `c` must be a live handle; `id` a NUL-terminated string; `data_out` and
// `len_out` writable.
enum GbStatus gb_retrieve(struct GbClient *c, const char *id, uint8_t **data_out, size_t *len_out);

// Upload an algorithm program; `record_out` (optional) receives the stored
// record as JSON.
//
// # Safety
// `c` must be a live handle; `name`, `source` NUL-terminated strings;
// `record_out` null or writable.
enum GbStatus gb_add_algorithm(struct GbClient *c,
                               const char *name,
                               const char *source,
                               char **record_out);

// Run an algorithm over the images `selector` selects, across the VO.
// `version` 0 means the latest. `receipt_out` (optional) receives the
// per-site counts as JSON.
//
// # Safety
// `c` must be a live handle; `name`, `selector` NUL-terminated strings;
// `receipt_out` null or writable.
enum GbStatus gb_execute_algorithm(struct GbClient *c,
                                   const char *name,
                                   uint32_t version,
                                   const char *selector,
                                   char **receipt_out);

// Catalog statistics of the node as JSON.
//
// # Safety
// `c` must be a live handle; `out` writable.
enum GbStatus gb_stats(struct GbClient *c, char **out);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void gb_string_free(char *s);

// # Safety
// `data`/`len` must be null/0 or exactly a pair returned by
// [`gb_retrieve`], freed once.
void gb_bytes_free(uint8_t *data, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRIDBOX_H */

#ifndef SKETCH2FACE_H
#define SKETCH2FACE_H

#include <stdint.h>
#include <stddef.h>

#define S2F_OK 0

#define S2F_ERR_MISSING_FILE 1

#define S2F_ERR_VERSION_MISMATCH 2

#define S2F_ERR_CORRUPT_WEIGHTS 3

#define S2F_ERR_SHAPE_MISMATCH 4

#define S2F_ERR_NON_FINITE 5

#define S2F_ERR_PRECONDITION 6

#define S2F_ERR_DUPLICATE 7

#define S2F_ERR_UNKNOWN 8

#define S2F_ERR_WEIGHTS_MISSING 9

#define S2F_ERR_EXTRACTOR_MISMATCH 10

#define S2F_ERR_DEGENERATE_IMAGE 11

#define S2F_ERR_DIVERGENCE 12

#define S2F_ERR_ORACLE 13

#define S2F_ERR_DATA 14

#define S2F_ERR_CONFIG 15

#define S2F_ERR_IO 16

/**
 * A required pointer argument was null.
 */
#define S2F_ERR_NULL -1

/**
 * A string argument was not valid UTF-8.
 */
#define S2F_ERR_UTF8 -2

/**
 * A caller buffer had the wrong length.
 */
#define S2F_ERR_BUFFER -3

/**
 * The library panicked; the handle involved should be considered lost.
 */
#define S2F_ERR_PANIC -4

/**
 * Generator, mapper, extractors, HOGFD and the configuration they came from.
 */
typedef struct S2fBundle S2fBundle;

/**
 * Loaded generator.
 */
typedef struct S2fGenerator S2fGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * success. Valid until the next call on the same thread.
 */
const char *s2f_last_error_message(void);

/**
 * Static, NUL-terminated version string.
 */
const char *s2f_version(void);

/**
 * Seeded toy generator (32×32 output, 18×16 latent).
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
int32_t s2f_generator_toy(uint64_t seed, struct S2fGenerator **out);

/**
 * Loads a generator checkpoint. `kind` is `"pretrained"` or `"toy"`.
 *
 * # Safety
 * `path` and `kind` must be NUL-terminated strings; `out` must be writable.
 */
int32_t s2f_generator_load(const char *path, const char *kind, struct S2fGenerator **out);

/**
 * Latent shape (rows, width) and output side length.
 *
 * # Safety
 * `g` must be a live generator handle; the out pointers must be writable.
 */
int32_t s2f_generator_shape(const struct S2fGenerator *g,
                            size_t *rows,
                            size_t *width,
                            size_t *resolution);

/**
 * Renders a row-major latent into `pixels`, height × width × 3 in `[0, 1]`.
 *
 * # Safety
 * `w` must point to `w_len` doubles and `pixels` to `pixels_len` writable
 * doubles.
 */
int32_t s2f_generator_synthesize(const struct S2fGenerator *g,
                                 const double *w,
                                 size_t w_len,
                                 double *pixels,
                                 size_t pixels_len);

/**
 * # Safety
 * `g` must be null or a handle from this library, not yet freed.
 */
void s2f_generator_free(struct S2fGenerator *g);

/**
 * Loads every asset named by a TOML configuration. Relative paths resolve
 * against the file's directory unless `SKETCH2FACE_ASSETS` is set.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out` must be writable.
 */
int32_t s2f_bundle_load(const char *config_path, struct S2fBundle **out);

/**
 * Inverts the sketch PNG at `sketch_path` and writes the run directory
 * (final.png, losses.csv, snapshots, summary) to `out_dir`.
 * `max_iterations` of 0 keeps the configured value. `final_loss` may be
 * null. A diverged run still writes its directory and returns
 * `S2F_ERR_DIVERGENCE`.
 *
 * # Safety
 * `b` must be a live bundle handle; strings must be NUL-terminated.
 */
int32_t s2f_bundle_invert_file(const struct S2fBundle *b,
                               const char *sketch_path,
                               const char *out_dir,
                               uint32_t max_iterations,
                               double *final_loss);

/**
 * # Safety
 * `b` must be null or a handle from this library, not yet freed.
 */
void s2f_bundle_free(struct S2fBundle *b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKETCH2FACE_H */

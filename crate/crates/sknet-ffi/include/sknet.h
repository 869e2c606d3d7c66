/* C interface to the selective kernel network toolkit. */

#ifndef SKNET_H
#define SKNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Outcome of a call. Anything but `Ok` leaves a message for
 `sknet_last_error`.
 */
typedef enum SknetStatus {
  SKNET_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  SKNET_STATUS_NULL_ARGUMENT,
  /*
   A string argument was not valid UTF-8.
   */
  SKNET_STATUS_INVALID_UTF8,
  /*
   Tensor or buffer sizes do not line up.
   */
  SKNET_STATUS_SHAPE,
  /*
   Convolution or pooling geometry cannot be realized.
   */
  SKNET_STATUS_GEOMETRY,
  /*
   Architecture or request rejected at validation.
   */
  SKNET_STATUS_CONFIG,
  /*
   A file or spec failed to decode.
   */
  SKNET_STATUS_DECODE,
  /*
   A checkpoint was malformed.
   */
  SKNET_STATUS_CHECKPOINT,
  /*
   A computation produced NaN or infinity.
   */
  SKNET_STATUS_NON_FINITE,
  /*
   The underlying file operation failed.
   */
  SKNET_STATUS_IO,
  /*
   A bug: the library panicked and the panic was contained.
   */
  SKNET_STATUS_INTERNAL,
} SknetStatus;

/*
 An initialized or loaded network behind an opaque pointer.
 */
typedef struct SknetModel SknetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static nul-terminated string. Never fails.
 */
const char *sknet_version(void);

/*
 Description of the most recent failure on this thread, empty if
 none. The pointer stays valid until the next failing call on the
 same thread.
 */
const char *sknet_last_error(void);

/*
 Frees a string returned by this library. Null is ignored.

 # Safety
 `s` must be a pointer previously returned by a `sknet_*` call that
 documents this deallocator, and must not be used afterwards.
 */
void sknet_string_free(char *s);

/*
 TOML spec of a built-in architecture, or null for an unknown name.
 Release the result with `sknet_string_free`.

 # Safety
 `name` must be null or a nul-terminated string.
 */
char *sknet_preset_toml(const char *name);

/*
 Parameter and multiply-add report for a TOML architecture spec at a
 square input resolution, as a JSON document. Null on failure;
 release the result with `sknet_string_free`.

 # Safety
 `spec_toml` must be null or a nul-terminated string.
 */
char *sknet_cost_json(const char *spec_toml, size_t resolution);

/*
 Builds a freshly initialized model from a TOML architecture spec
 and a weight seed, storing the handle in `out`.

 # Safety
 `spec_toml` must be null or a nul-terminated string; `out` must be
 null or point at writable storage for one pointer.
 */
enum SknetStatus sknet_model_build(const char *spec_toml, uint64_t seed, struct SknetModel **out);

/*
 Loads a model from a checkpoint file, storing the handle in `out`.

 # Safety
 `path` must be null or a nul-terminated string; `out` must be null
 or point at writable storage for one pointer.
 */
enum SknetStatus sknet_model_load(const char *path, struct SknetModel **out);

/*
 Writes the model to a checkpoint file.

 # Safety
 `model` must be null or a live handle from this library; `path`
 must be null or a nul-terminated string.
 */
enum SknetStatus sknet_model_save(const struct SknetModel *model, const char *path);

/*
 Releases a model handle. Null is ignored.

 # Safety
 `model` must be null or a live handle from this library, and must
 not be used afterwards.
 */
void sknet_model_free(struct SknetModel *model);

/*
 Number of output classes, or zero for a null handle.

 # Safety
 `model` must be null or a live handle from this library.
 */
uint32_t sknet_model_class_count(const struct SknetModel *model);

/*
 Number of selective kernel units, or zero for a null handle.

 # Safety
 `model` must be null or a live handle from this library.
 */
uint32_t sknet_model_sk_unit_count(const struct SknetModel *model);

/*
 TOML spec of a live model, for inspecting loaded checkpoints. Null
 on failure; release the result with `sknet_string_free`.

 # Safety
 `model` must be null or a live handle from this library.
 */
char *sknet_model_spec_toml(const struct SknetModel *model);

/*
 Runs inference on a batch laid out as `n * channels * height *
 width` doubles in NCHW order and writes `n * classes` logits,
 sample-major, to `logits`. `logits_len` is the capacity of that
 buffer; it must hold all logits. Batch norm uses running
 statistics.

 # Safety
 `model` must be null or a live handle from this library; `data`
 must be null or point at `n * channels * height * width` readable
 doubles; `logits` must be null or point at `logits_len` writable
 doubles.
 */
enum SknetStatus sknet_model_forward(struct SknetModel *model,
                                     const double *data,
                                     size_t n,
                                     size_t channels,
                                     size_t height,
                                     size_t width,
                                     double *logits,
                                     size_t logits_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKNET_H */

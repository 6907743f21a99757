#ifndef DCELANM_H
#define DCELANM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum DcmStatus {
  DCM_STATUS_OK = 0,
  // Bad argument, shape or configuration.
  DCM_STATUS_USAGE = 1,
  // Unreadable or malformed input data.
  DCM_STATUS_DATA = 2,
  // Checkpoint missing, corrupt or incompatible.
  DCM_STATUS_CHECKPOINT = 3,
  DCM_STATUS_NULL_POINTER = 4,
  // A Rust panic was caught at the boundary.
  DCM_STATUS_INTERNAL = 5,
} DcmStatus;

// Opaque network handle.
typedef struct DcmNetwork DcmNetwork;

// Mean scores over the samples of one call.
typedef struct DcmMetrics {
  double dice;
  double iou;
  double precision;
} DcmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *dcm_last_error(void);

// Library version as a static NUL-terminated string.
const char *dcm_version(void);

// Builds a freshly initialised network. `config` holds `key = value`
// lines and may be null for the defaults.
//
// # Safety
// `config` must be null or a NUL-terminated string; `out` must be writable.
enum DcmStatus dcm_network_create(const char *config, struct DcmNetwork **out);

// Loads a network from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DcmStatus dcm_network_load(const char *path, struct DcmNetwork **out);

// Writes the network and its training state to `path`.
//
// # Safety
// `net` must come from this library; `path` must be a NUL-terminated string.
enum DcmStatus dcm_network_save(const struct DcmNetwork *net, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `net` must be null or a live handle from this library, freed only once.
void dcm_network_free(struct DcmNetwork *net);

// Number of trainable scalars.
//
// # Safety
// `net` must be a live handle; `out` must be writable.
enum DcmStatus dcm_network_param_count(const struct DcmNetwork *net, uint64_t *out);

// Side length the network resizes inputs to.
//
// # Safety
// `net` must be a live handle; `out` must be writable.
enum DcmStatus dcm_network_input_side(const struct DcmNetwork *net, size_t *out);

// Segments one image. `image` is planar RGB, `3·height·width` floats in
// `[0, 1]`; `mask` receives `height·width` bytes, 1 for lesion and 0 for
// background, at the input resolution.
//
// # Safety
// Buffers must hold the stated number of elements.
enum DcmStatus dcm_predict(const struct DcmNetwork *net,
                           const float *image,
                           size_t height,
                           size_t width,
                           uint8_t *mask);

// Hard Dice, IoU and precision of `count` masks of `len` bytes each,
// averaged over masks. Nonzero bytes are foreground.
//
// # Safety
// `pred` and `target` must hold `count·len` bytes; `out` must be writable.
enum DcmStatus dcm_metrics(const uint8_t *pred,
                           const uint8_t *target,
                           size_t count,
                           size_t len,
                           struct DcmMetrics *out);

// Soft Tversky loss `1 − T` of one probability map against a binary mask.
//
// # Safety
// `prob` and `target` must hold `len` elements; `out` must be writable.
enum DcmStatus dcm_tversky_loss(const float *prob,
                                const uint8_t *target,
                                size_t len,
                                double alpha,
                                double beta,
                                double smooth,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCELANM_H */

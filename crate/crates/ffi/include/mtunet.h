#ifndef MTUNET_H
#define MTUNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum MtunetStatus {
  MTUNET_STATUS_OK = 0,
  MTUNET_STATUS_NULL_POINTER = 1,
  MTUNET_STATUS_USAGE = 2,
  MTUNET_STATUS_DIMENSION = 3,
  MTUNET_STATUS_LOAD = 4,
  MTUNET_STATUS_IO = 5,
  MTUNET_STATUS_NON_FINITE = 6,
  MTUNET_STATUS_PARSE = 7,
  MTUNET_STATUS_BUFFER_TOO_SMALL = 8,
  MTUNET_STATUS_INVALID_UTF8 = 9,
  MTUNET_STATUS_PANIC = 10,
} MtunetStatus;

// A loaded model.
typedef struct MtunetModel MtunetModel;

// A PCG32 generator.
typedef struct MtunetRng MtunetRng;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty after a success.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *mtunet_last_error(void);

// Library version as a static NUL-terminated string.
const char *mtunet_version(void);

// Loads a trained checkpoint. `iterations` is the attention round count
// used at training time.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MtunetStatus mtunet_model_load(const char *path,
                                    uint32_t iterations,
                                    struct MtunetModel **out);

// # Safety
// `model` must come from [`mtunet_model_load`] and not be used again.
void mtunet_model_free(struct MtunetModel *model);

// Feature channels c (length of a representation); 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t mtunet_model_channels(const struct MtunetModel *model);

// Pattern count z; 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t mtunet_model_slots(const struct MtunetModel *model);

// Representation of a `channels×height×width` image (channel-major,
// values in [0, 1]). Writes c values to `v_out`. When `attention_out` is
// not null, also writes the z×l attention (l = feature-map positions)
// and stores l in `positions_out` if that is not null.
//
// # Safety
// Pointers must be valid for the stated capacities.
enum MtunetStatus mtunet_model_represent(const struct MtunetModel *model,
                                         const double *pixels,
                                         size_t channels,
                                         size_t height,
                                         size_t width,
                                         double *v_out,
                                         size_t v_capacity,
                                         double *attention_out,
                                         size_t attention_capacity,
                                         size_t *positions_out);

// Membership probability of a query representation for a support
// centroid, both of length `len`.
//
// # Safety
// Pointers must be valid for `len` values; `score_out` writable.
enum MtunetStatus mtunet_model_match_score(const struct MtunetModel *model,
                                           const double *query,
                                           const double *centroid,
                                           size_t len,
                                           double *score_out);

// Index of the best of `way` centroids (row-major, `way×len`) for one
// query; ties go to the lowest index.
//
// # Safety
// Pointers must be valid for the stated sizes; `index_out` writable.
enum MtunetStatus mtunet_model_classify(const struct MtunetModel *model,
                                        const double *query,
                                        const double *centroids,
                                        size_t way,
                                        size_t len,
                                        size_t *index_out);

// New PCG32 generator for `(seed, stream)`; null only on allocation
// failure.
struct MtunetRng *mtunet_rng_new(uint64_t seed, uint64_t stream);

// # Safety
// `rng` must be a live handle.
enum MtunetStatus mtunet_rng_next_u32(struct MtunetRng *rng, uint32_t *out);

// # Safety
// `rng` must come from [`mtunet_rng_new`] and not be used again.
void mtunet_rng_free(struct MtunetRng *rng);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTUNET_H */

#ifndef CYCLEMORPH_H
#define CYCLEMORPH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CmStatus {
  CM_STATUS_OK = 0,
  CM_STATUS_NULL_POINTER = 1,
  CM_STATUS_INVALID_ARGUMENT = 2,
  CM_STATUS_IO = 3,
  CM_STATUS_FORMAT = 4,
  CM_STATUS_RUNTIME = 5,
  CM_STATUS_PANIC = 6,
} CmStatus;

// Trained networks loaded from a training output directory.
typedef struct CmModel CmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *cm_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cm_version(void);

// Loads the networks written by `cyclemorph train --out DIR`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a writable pointer.
enum CmStatus cm_model_load(const char *dir, struct CmModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from `cm_model_load` and not be used afterwards.
void cm_model_free(struct CmModel *model);

// Spatial rank the model was trained for (2 or 3).
//
// # Safety
// `model` must be a live handle and `out` writable.
enum CmStatus cm_model_rank(const struct CmModel *model, size_t *out);

// Whether the model carries a local network for multiscale registration.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum CmStatus cm_model_has_local(const struct CmModel *model, bool *out);

// Registers `moving` onto `fixed`, both single-channel row-major volumes of
// extent `lattice[0..rank]`. Writes the deformed image (n values) and the
// displacement field (rank * n values, component-major) when the output
// pointers are non-null.
//
// # Safety
// Input pointers must reference the stated number of elements; non-null
// outputs must be writable for their sizes.
enum CmStatus cm_register(const struct CmModel *model,
                          const float *moving,
                          const float *fixed,
                          const size_t *lattice,
                          size_t rank,
                          bool multiscale,
                          float *deformed_out,
                          float *field_out);

// Percentage of interior voxels whose mapping Jacobian determinant is <= 0.
//
// # Safety
// `field` must hold rank * prod(lattice) values; `out` must be writable.
enum CmStatus cm_folding_percentage(const float *field,
                                    const size_t *lattice,
                                    size_t rank,
                                    double *out);

// Mean squared local correlation of two single-channel images over
// `window`-wide windows (0 selects the default of 9).
//
// # Safety
// `a` and `b` must hold prod(lattice) values; `out` must be writable.
enum CmStatus cm_local_ncc(const float *a,
                           const float *b,
                           const size_t *lattice,
                           size_t rank,
                           size_t window,
                           double *out);

// Mean Dice over the nonzero labels present in either map. Writes NaN when
// neither map has a foreground label.
//
// # Safety
// `a` and `b` must hold prod(lattice) values; `out` must be writable.
enum CmStatus cm_dice(const uint32_t *a,
                      const uint32_t *b,
                      const size_t *lattice,
                      size_t rank,
                      double *out);

// Mean Euclidean distance between `count` corresponding landmarks stored
// row-major as `count * rank` coordinates. `spacing` may be null for unit
// spacing.
//
// # Safety
// Point arrays must hold count * rank values, `spacing` rank values if
// non-null; `out` must be writable.
enum CmStatus cm_tre(const double *a,
                     const double *b,
                     size_t count,
                     size_t rank,
                     const double *spacing,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CYCLEMORPH_H */

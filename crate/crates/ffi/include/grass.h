#ifndef GRASS_H
#define GRASS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GrassStatus {
  GRASS_STATUS_OK = 0,
  GRASS_STATUS_NULL_POINTER = 1,
  GRASS_STATUS_INVALID_ARGUMENT = 2,
  GRASS_STATUS_PARSE = 3,
  GRASS_STATUS_DIMENSION_MISMATCH = 4,
  GRASS_STATUS_NUMERICAL = 5,
  GRASS_STATUS_IO = 6,
  GRASS_STATUS_FINGERPRINT_MISMATCH = 7,
  GRASS_STATUS_PANIC = 8,
} GrassStatus;

/**
 * Compressor built from a pipeline spec such as
 * `mask:k=512,seed=1+sjlt:k=128,seed=2`.
 */
typedef struct GrassCompressor GrassCompressor;

/**
 * Running FIM sum with a cached damped factorization.
 */
typedef struct GrassFim GrassFim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *grass_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *grass_version(void);

/**
 * Builds a compressor for gradients of length `input_dim`.
 *
 * # Safety
 * `spec` must be a nul-terminated string and `out` a valid pointer.
 */
enum GrassStatus grass_compressor_new(const char *spec,
                                      size_t input_dim,
                                      struct GrassCompressor **out);

/**
 * # Safety
 * `handle` must come from [`grass_compressor_new`] and not be used again.
 */
void grass_compressor_free(struct GrassCompressor *handle);

/**
 * # Safety
 * `handle` must be a live compressor handle.
 */
size_t grass_compressor_input_dim(const struct GrassCompressor *handle);

/**
 * # Safety
 * `handle` must be a live compressor handle.
 */
size_t grass_compressor_output_dim(const struct GrassCompressor *handle);

/**
 * Copies the 32-byte fingerprint into `out`.
 *
 * # Safety
 * `out` must point to 32 writable bytes.
 */
enum GrassStatus grass_compressor_fingerprint(const struct GrassCompressor *handle, uint8_t *out);

/**
 * Compresses a dense f32 gradient of length `len` into `out`, which must
 * hold `out_len == output_dim` values.
 *
 * # Safety
 * `g` and `out` must be valid for `len` and `out_len` elements.
 */
enum GrassStatus grass_compressor_compress_f32(const struct GrassCompressor *handle,
                                               const float *g,
                                               size_t len,
                                               float *out,
                                               size_t out_len);

/**
 * f64 variant of [`grass_compressor_compress_f32`].
 *
 * # Safety
 * As for the f32 variant.
 */
enum GrassStatus grass_compressor_compress_f64(const struct GrassCompressor *handle,
                                               const double *g,
                                               size_t len,
                                               double *out,
                                               size_t out_len);

/**
 * Empty `k x k` FIM accumulator.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GrassStatus grass_fim_new(size_t k, struct GrassFim **out);

/**
 * # Safety
 * `handle` must come from [`grass_fim_new`] and not be used again.
 */
void grass_fim_free(struct GrassFim *handle);

/**
 * Number of accumulated gradients.
 *
 * # Safety
 * `handle` must be a live FIM handle.
 */
uint64_t grass_fim_count(const struct GrassFim *handle);

/**
 * Adds `g g^T`; invalidates any cached factorization.
 *
 * # Safety
 * `g` must be valid for `len` elements.
 */
enum GrassStatus grass_fim_accumulate_f32(struct GrassFim *handle, const float *g, size_t len);

/**
 * Factorizes `F + damping I`, with `F` the mean of the accumulated
 * outer products.
 *
 * # Safety
 * `handle` must be a live FIM handle.
 */
enum GrassStatus grass_fim_factorize(struct GrassFim *handle, double damping);

/**
 * Solves `(F + damping I) x = g` with the cached factorization; `damping`
 * must match the last [`grass_fim_factorize`] call.
 *
 * # Safety
 * `g` and `out` must be valid for `len` elements each.
 */
enum GrassStatus grass_fim_ifvp(const struct GrassFim *handle,
                                double damping,
                                const double *g,
                                size_t len,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRASS_H */

#ifndef NICOLLIDE_H
#define NICOLLIDE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NicStatus {
  NIC_STATUS_OK = 0,
  NIC_STATUS_NULL_POINTER = 1,
  NIC_STATUS_INVALID_ARGUMENT = 2,
  NIC_STATUS_IO = 3,
  NIC_STATUS_BAD_MODEL = 4,
  NIC_STATUS_BAD_IMAGE = 5,
  NIC_STATUS_CORRUPT_STREAM = 6,
  /**
   * A latent fell outside the prior's symbol range.
   */
  NIC_STATUS_OUT_OF_RANGE = 7,
  NIC_STATUS_NUMERIC = 8,
  NIC_STATUS_BUFFER_TOO_SMALL = 9,
  NIC_STATUS_PANIC = 10,
} NicStatus;

/**
 * A compressed image: header plus payload.
 */
typedef struct NicBitstream NicBitstream;

/**
 * A loaded codec model.
 */
typedef struct NicModel NicModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t nic_last_error(char *buf, size_t cap);

/**
 * Loads a `.nicm` model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NicStatus nic_model_load(const char *path, struct NicModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`nic_model_load`] not yet freed.
 */
void nic_model_free(struct NicModel *model);

/**
 * Quality preset (1 = lowest) of a model.
 *
 * # Safety
 * `model` must be a live handle and `qf` a valid pointer.
 */
enum NicStatus nic_model_quality(const struct NicModel *model, uint8_t *qf);

/**
 * Compresses an image. With `lpd` non-zero, analysis activations are
 * rounded to half precision.
 *
 * # Safety
 * `model` must be a live handle, `pixels` must hold `3 * height * width`
 * doubles and `out` must be a valid pointer.
 */
enum NicStatus nic_compress(const struct NicModel *model,
                            const double *pixels,
                            size_t height,
                            size_t width,
                            uint8_t lpd,
                            struct NicBitstream **out);

/**
 * Reconstructs an image into `pixels`, which must have room for
 * `3 * height * width` doubles of the stream's header dimensions.
 * `height` and `width` receive the dimensions in every case, so a call
 * with `cap = 0` queries the size.
 *
 * # Safety
 * `model` and `stream` must be live handles, `pixels` must be null or
 * point to `cap` writable doubles, `height` and `width` valid pointers.
 */
enum NicStatus nic_decompress(const struct NicModel *model,
                              const struct NicBitstream *stream,
                              double *pixels,
                              size_t cap,
                              size_t *height,
                              size_t *width);

/**
 * Serialized `.nicb` length in bytes.
 *
 * # Safety
 * `stream` must be a live handle.
 */
size_t nic_bitstream_size(const struct NicBitstream *stream);

/**
 * Payload length in bits (up to and including the last set bit).
 *
 * # Safety
 * `stream` must be a live handle.
 */
uint64_t nic_bitstream_bits(const struct NicBitstream *stream);

/**
 * Writes the `.nicb` serialization into `buf`.
 *
 * # Safety
 * `stream` must be a live handle, `buf` must point to `cap` writable
 * bytes.
 */
enum NicStatus nic_bitstream_write(const struct NicBitstream *stream, uint8_t *buf, size_t cap);

/**
 * Parses a `.nicb` serialization.
 *
 * # Safety
 * `buf` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum NicStatus nic_bitstream_read(const uint8_t *buf, size_t len, struct NicBitstream **out);

/**
 * # Safety
 * `stream` must be null or a live handle.
 */
void nic_bitstream_free(struct NicBitstream *stream);

/**
 * Normalized Hamming distance of two payloads; 0 means a collision.
 *
 * # Safety
 * `a` and `b` must be live handles, `out` a valid pointer.
 */
enum NicStatus nic_bitstream_hamming(const struct NicBitstream *a,
                                     const struct NicBitstream *b,
                                     double *out);

/**
 * Runs the masked-gradient attack with default settings except the
 * iteration budget (`0` keeps the default). The final iterate is written
 * to `adv` (same layout and size as the inputs) and `collided` receives 1
 * when its bitstream equals the target's.
 *
 * # Safety
 * `model` must be a live handle; `src`, `tgt` and `adv` must each hold
 * `3 * height * width` doubles; `collided` must be a valid pointer.
 */
enum NicStatus nic_attack_mgd(const struct NicModel *model,
                              const double *src,
                              const double *tgt,
                              size_t height,
                              size_t width,
                              size_t max_iterations,
                              double *adv,
                              uint8_t *collided);

/**
 * Compression ratio of the thresholded orthogonal codec at `gamma`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum NicStatus nic_compression_ratio(double gamma, double *out);

/**
 * Collision distance of the thresholded orthogonal codec at `gamma`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum NicStatus nic_collision_distance(double gamma, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NICOLLIDE_H */

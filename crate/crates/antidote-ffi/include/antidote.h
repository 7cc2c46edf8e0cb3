#ifndef ANTIDOTE_H
#define ANTIDOTE_H

/* Generated by cbindgen from antidote-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call. Anything other than Ok
 * leaves a message retrievable via `antidote_last_error`.
 */
typedef enum AntidoteStatus {
  ANTIDOTE_STATUS_OK = 0,
  ANTIDOTE_STATUS_NULL_POINTER = 1,
  ANTIDOTE_STATUS_INVALID_ARGUMENT = 2,
  ANTIDOTE_STATUS_INVALID_SHAPE = 3,
  ANTIDOTE_STATUS_INVALID_RATIO = 4,
  ANTIDOTE_STATUS_OUT_OF_RANGE = 5,
  ANTIDOTE_STATUS_BUFFER_TOO_SMALL = 6,
  ANTIDOTE_STATUS_INTERNAL = 7,
} AntidoteStatus;

typedef struct AntidoteMask AntidoteMask;

typedef struct AntidoteModelSpec AntidoteModelSpec;

typedef struct AntidoteTensor AntidoteTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *antidote_last_error(void);

/**
 * Free a string returned by this library.
 */
void antidote_string_free(char *s);

/**
 * Create an (n, c, h, w) tensor. `data` may be null for a zero fill;
 * otherwise `len` must equal n*c*h*w.
 */
enum AntidoteStatus antidote_tensor_create(uint32_t n,
                                           uint32_t c,
                                           uint32_t h,
                                           uint32_t w,
                                           const float *data,
                                           size_t len,
                                           struct AntidoteTensor **out);

void antidote_tensor_free(struct AntidoteTensor *t);

/**
 * Write the four dims into `out_dims` (length 4).
 */
enum AntidoteStatus antidote_tensor_dims(const struct AntidoteTensor *t, uint32_t *out_dims);

/**
 * Copy the flat NCHW data into `out` (length `len` >= element count).
 */
enum AntidoteStatus antidote_tensor_data(const struct AntidoteTensor *t, float *out, size_t len);

/**
 * Per-channel spatial means of one sample; `out` must hold c values.
 */
enum AntidoteStatus antidote_channel_attention(const struct AntidoteTensor *t,
                                               size_t sample,
                                               float *out,
                                               size_t len);

/**
 * Per-location channel means of one sample; `out` must hold h*w values.
 */
enum AntidoteStatus antidote_spatial_attention(const struct AntidoteTensor *t,
                                               size_t sample,
                                               float *out,
                                               size_t len);

/**
 * Build a top-k keep mask for one sample of a feature map. Keep ratios lie
 * in (0, 1]; k = trunc(ratio * count) clamped to at least 1.
 */
enum AntidoteStatus antidote_mask_create(const struct AntidoteTensor *t,
                                         size_t sample,
                                         double keep_channel,
                                         double keep_spatial,
                                         int32_t criterion,
                                         uint64_t seed,
                                         struct AntidoteMask **out);

void antidote_mask_free(struct AntidoteMask *mask);

/**
 * Number of kept channels and kept spatial columns.
 */
enum AntidoteStatus antidote_mask_kept(const struct AntidoteMask *mask,
                                       size_t *kept_channels,
                                       size_t *kept_columns);

/**
 * Channel keep bits as 0/1 bytes; `out` must hold c values.
 */
enum AntidoteStatus antidote_mask_channel_bits(const struct AntidoteMask *mask,
                                               uint8_t *out,
                                               size_t len);

/**
 * Spatial keep bits in row-major order; `out` must hold h*w values.
 */
enum AntidoteStatus antidote_mask_spatial_bits(const struct AntidoteMask *mask,
                                               uint8_t *out,
                                               size_t len);

/**
 * Text dump of the mask ("ch: ..." plus one line of bits per spatial row).
 * Free with `antidote_string_free`.
 */
enum AntidoteStatus antidote_mask_dump(const struct AntidoteMask *mask, char **out);

/**
 * Zero the masked channels/columns of every sample; returns a new tensor.
 */
enum AntidoteStatus antidote_mask_apply(const struct AntidoteTensor *t,
                                        const struct AntidoteMask *mask,
                                        struct AntidoteTensor **out);

/**
 * Look up a built-in architecture: "toy-vgg", "vgg16-cifar",
 * "vgg16-imagenet" or "resnet56-cifar".
 */
enum AntidoteStatus antidote_model_spec_builtin(const char *name, struct AntidoteModelSpec **out);

void antidote_model_spec_free(struct AntidoteModelSpec *spec);

enum AntidoteStatus antidote_model_spec_blocks(const struct AntidoteModelSpec *spec, size_t *out);

/**
 * Total dense multiply-accumulate count of the architecture.
 */
enum AntidoteStatus antidote_dense_flops_total(const struct AntidoteModelSpec *spec, uint64_t *out);

/**
 * Full dense/dynamic FLOPs report as a JSON string for the given per-block
 * PRUNE ratios (pass null/0 for an unpruned report). Free the string with
 * `antidote_string_free`.
 */
enum AntidoteStatus antidote_flops_report_json(const struct AntidoteModelSpec *spec,
                                               const double *prune_channel,
                                               size_t n_channel,
                                               const double *prune_spatial,
                                               size_t n_spatial,
                                               char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANTIDOTE_H */

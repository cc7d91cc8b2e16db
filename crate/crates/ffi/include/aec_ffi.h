#ifndef AEC_FFI_H
#define AEC_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define AEC_OK 0

// A required pointer argument was null.
#define AEC_ERR_NULL -1

// A string argument was not valid UTF-8.
#define AEC_ERR_UTF8 -2

// The engine panicked; the handle involved should be freed.
#define AEC_ERR_PANIC -3

#define AEC_ERR_INPUT_TOO_SHORT 1

#define AEC_ERR_INVALID_CONFIG 2

#define AEC_ERR_SHAPE_MISMATCH 3

#define AEC_ERR_RATE_MISMATCH 4

#define AEC_ERR_LENGTH_MISMATCH 5

#define AEC_ERR_NO_SIGNAL 6

#define AEC_ERR_NON_FINITE 7

#define AEC_ERR_DIVERGED 8

#define AEC_ERR_AUTODIFF 9

#define AEC_ERR_WAV 10

#define AEC_ERR_PARSE 11

#define AEC_ERR_EMPTY_DATASET 12

#define AEC_ERR_IO 13

// Opaque pipeline handle.
typedef struct AecPipeline AecPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Creates a pipeline.
//
// `config` is optional `key=value` text (one or more pairs per line).
// `checkpoint` is an optional post-filter checkpoint path; without it
// only the linear stage runs. On success `*out` receives a handle that
// must be released with [`aec_pipeline_free`].
//
// # Safety
// `config` and `checkpoint` must be null or NUL-terminated strings;
// `out` must be a valid pointer.
int32_t aec_pipeline_new(const char *config, const char *checkpoint, struct AecPipeline **out);

// Releases a handle from [`aec_pipeline_new`]. Null is ignored.
//
// # Safety
// `p` must be null or a handle not yet freed.
void aec_pipeline_free(struct AecPipeline *p);

// Returns 1 when the pipeline includes the neural post-filter, 0 when it
// stops at the linear stage or `p` is null.
//
// # Safety
// `p` must be null or a live handle.
int32_t aec_pipeline_has_postfilter(const struct AecPipeline *p);

// Processes one recording. `mic`, `reference` and `out` each hold `len`
// samples; `out` receives the echo-cancelled signal. When `delay_out` is
// non-null it receives the estimated bulk delay in samples.
//
// # Safety
// All buffers must be valid for `len` samples; `out` must not alias the
// inputs; `p` must be a live handle.
int32_t aec_pipeline_process(const struct AecPipeline *p,
                             const float *mic,
                             const float *reference,
                             size_t len,
                             uint32_t sample_rate,
                             float *out,
                             size_t *delay_out);

// ERLE in dB of residual `e` against microphone `d`, both `len` samples.
//
// # Safety
// `d` and `e` must be valid for `len` samples; `out` must be valid.
int32_t aec_erle(const float *d, const float *e, size_t len, double *out);

// Message of the last failure on this thread, or null if none. The
// pointer stays valid until the next failing call on the same thread.
const char *aec_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *aec_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AEC_FFI_H */

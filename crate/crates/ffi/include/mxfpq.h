#ifndef MXFPQ_H
#define MXFPQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Values 2 to 7 match the CLI exit codes.
typedef enum MxfpqStatus {
  MXFPQ_STATUS_OK = 0,
  MXFPQ_STATUS_CONFIG = 2,
  MXFPQ_STATUS_INPUT = 3,
  MXFPQ_STATUS_PRECISION = 4,
  MXFPQ_STATUS_FORMAT = 5,
  MXFPQ_STATUS_OVERFLOW = 6,
  MXFPQ_STATUS_IO = 7,
  MXFPQ_STATUS_NULL_POINTER = 8,
  MXFPQ_STATUS_PANIC = 9,
} MxfpqStatus;

typedef enum MxfpqGranularityKind {
  MXFPQ_GRANULARITY_KIND_PER_TENSOR = 0,
  MXFPQ_GRANULARITY_KIND_PER_CHANNEL = 1,
  MXFPQ_GRANULARITY_KIND_PER_TOKEN = 2,
  MXFPQ_GRANULARITY_KIND_PER_GROUP = 3,
} MxfpqGranularityKind;

typedef enum MxfpqAddressMode {
  MXFPQ_ADDRESS_MODE_GUARDED = 0,
  MXFPQ_ADDRESS_MODE_ROUNDED = 1,
} MxfpqAddressMode;

// Dual-format quantized activation.
typedef struct MxfpqDfq MxfpqDfq;

// Lookup tables of the emulated datapath.
typedef struct MxfpqLuts MxfpqLuts;

// Codes plus scales of one quantized matrix.
typedef struct MxfpqQuantized MxfpqQuantized;

// Scale granularity. `group_size` and `pad` only matter for `PerGroup`.
typedef struct MxfpqGranularity {
  enum MxfpqGranularityKind kind;
  size_t group_size;
  bool pad;
} MxfpqGranularity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *mxfpq_last_error(void);

// Static name of a status value.
const char *mxfpq_status_name(enum MxfpqStatus status);

// Largest finite magnitude of a named format such as "E2M1".
//
// # Safety
// `name` must be a NUL-terminated string and `out` writable.
enum MxfpqStatus mxfpq_format_max(const char *name, double *out);

// Rounds `x` to the nearest grid value of a named format (ties to even
// code, saturating at the largest magnitude).
//
// # Safety
// `name` must be a NUL-terminated string and `out` writable.
enum MxfpqStatus mxfpq_format_round(const char *name, double x, double *out);

// Scaled quantization of a `rows x cols` matrix. `format` is an FP format
// name or "INT4"/"INT6"/"INT8".
//
// # Safety
// `x` must hold `rows * cols` doubles, `format` must be NUL-terminated and
// `out` writable.
enum MxfpqStatus mxfpq_quantize(const double *x,
                                size_t rows,
                                size_t cols,
                                const char *format_name,
                                struct MxfpqGranularity gran,
                                struct MxfpqQuantized **out);

// E2M1 quantization through the lookup-table quantizer.
//
// # Safety
// `luts` must be a live handle, `x` must hold `rows * cols` doubles and
// `out` writable.
enum MxfpqStatus mxfpq_lut_quantize(const struct MxfpqLuts *luts,
                                    const double *x,
                                    size_t rows,
                                    size_t cols,
                                    struct MxfpqGranularity gran,
                                    struct MxfpqQuantized **out);

// Shape of the code matrix.
//
// # Safety
// `q` must be a live handle; `rows` and `cols` writable.
enum MxfpqStatus mxfpq_quantized_shape(const struct MxfpqQuantized *q, size_t *rows, size_t *cols);

// Shape of the scale matrix.
//
// # Safety
// `q` must be a live handle; `rows` and `cols` writable.
enum MxfpqStatus mxfpq_quantized_scales_shape(const struct MxfpqQuantized *q,
                                              size_t *rows,
                                              size_t *cols);

// Copies the codes, one per byte, row-major.
//
// # Safety
// `q` must be a live handle and `out` hold `len` bytes.
enum MxfpqStatus mxfpq_quantized_codes(const struct MxfpqQuantized *q, uint8_t *out, size_t len);

// Copies the scales, row-major.
//
// # Safety
// `q` must be a live handle and `out` hold `len` doubles.
enum MxfpqStatus mxfpq_quantized_scales(const struct MxfpqQuantized *q, double *out, size_t len);

// Writes the dequantized matrix.
//
// # Safety
// `q` must be a live handle and `out` hold `len` doubles.
enum MxfpqStatus mxfpq_quantized_dequantize(const struct MxfpqQuantized *q,
                                            double *out,
                                            size_t len);

// # Safety
// `q` must be NULL or a handle not yet freed.
void mxfpq_quantized_free(struct MxfpqQuantized *q);

// Dual-format quantization: elements <= 0 use `neg_format`, the rest
// `pos_format`, each branch with its own scales.
//
// # Safety
// `x` must hold `rows * cols` doubles, the names must be NUL-terminated
// and `out` writable.
enum MxfpqStatus mxfpq_dfq(const double *x,
                           size_t rows,
                           size_t cols,
                           const char *neg_format,
                           const char *pos_format,
                           struct MxfpqGranularity gran,
                           struct MxfpqDfq **out);

// E1M2 / E2M1 dual-format quantization through the lookup tables.
//
// # Safety
// `luts` must be a live handle, `x` must hold `rows * cols` doubles and
// `out` writable.
enum MxfpqStatus mxfpq_dfq_lut_quantize(const struct MxfpqLuts *luts,
                                        const double *x,
                                        size_t rows,
                                        size_t cols,
                                        struct MxfpqGranularity gran,
                                        struct MxfpqDfq **out);

// Copies the combined code plane (sign bit selects the branch).
//
// # Safety
// `d` must be a live handle and `out` hold `len` bytes.
enum MxfpqStatus mxfpq_dfq_codes(const struct MxfpqDfq *d, uint8_t *out, size_t len);

// Writes the dequantized matrix.
//
// # Safety
// `d` must be a live handle and `out` hold `len` doubles.
enum MxfpqStatus mxfpq_dfq_dequantize(const struct MxfpqDfq *d, double *out, size_t len);

// # Safety
// `d` must be NULL or a handle not yet freed.
void mxfpq_dfq_free(struct MxfpqDfq *d);

// Normalized group-wise Hadamard transform of every row, in place.
//
// # Safety
// `data` must hold `rows * cols` doubles.
enum MxfpqStatus mxfpq_ght_inplace(double *data, size_t rows, size_t cols, size_t group_size);

// Weight-side fusion in place: `W <- ght(W / lambda)` with `lambda`
// dividing the columns. A NULL `lambda` means all ones.
//
// # Safety
// `w` must hold `rows * cols` doubles and `lambda`, if not NULL, `cols`.
enum MxfpqStatus mxfpq_fuse_weight_inplace(double *w,
                                           size_t rows,
                                           size_t cols,
                                           const double *lambda,
                                           size_t group_size);

// # Safety
// `out` must be writable.
enum MxfpqStatus mxfpq_luts_new(enum MxfpqAddressMode mode, struct MxfpqLuts **out);

// # Safety
// `luts` must be NULL or a handle not yet freed.
void mxfpq_luts_free(struct MxfpqLuts *luts);

// `X W^T` on the emulated datapath. `x` is `[T, C]`, `w` is `[O, C]`,
// `out` receives `[T, O]`.
//
// # Safety
// All handles must be live and `out` hold `len` doubles.
enum MxfpqStatus mxfpq_emu_gemm(const struct MxfpqLuts *luts,
                                const struct MxfpqQuantized *x,
                                const struct MxfpqQuantized *w,
                                double *out,
                                size_t len);

// Same as [`mxfpq_emu_gemm`] with a dual-format activation.
//
// # Safety
// All handles must be live and `out` hold `len` doubles.
enum MxfpqStatus mxfpq_emu_gemm_dfq(const struct MxfpqLuts *luts,
                                    const struct MxfpqDfq *x,
                                    const struct MxfpqQuantized *w,
                                    double *out,
                                    size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MXFPQ_H */

#ifndef SDQ_H
#define SDQ_H

#include <stddef.h>
#include <stdint.h>

typedef enum SdqStatus {
  SDQ_STATUS_OK = 0,
  SDQ_STATUS_NULL_POINTER = 1,
  SDQ_STATUS_INVALID_UTF8 = 2,
  SDQ_STATUS_CONTRACT = 3,
  SDQ_STATUS_PARSE = 4,
  SDQ_STATUS_IO = 5,
  SDQ_STATUS_CONFIG = 6,
  SDQ_STATUS_NUMERICAL = 7,
  SDQ_STATUS_PANIC = 8,
} SdqStatus;

// A per-layer cost table.
typedef struct SdqLayerTable SdqLayerTable;

// A parsed mixed-precision strategy.
typedef struct SdqStrategy SdqStrategy;

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *sdq_last_error_message(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed, or be null.
void sdq_string_free(char *s);

// Parses strategy text.
//
// # Safety
// `text` must be a nul-terminated string; `out` must be writable.
enum SdqStatus sdq_strategy_parse(const char *text, struct SdqStrategy **out);

// Loads a strategy file.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum SdqStatus sdq_strategy_load(const char *path, struct SdqStrategy **out);

// # Safety
// `s` must come from this library and not have been freed, or be null.
void sdq_strategy_free(struct SdqStrategy *s);

// Serializes a strategy; free the result with [`sdq_string_free`].
//
// # Safety
// `s` must be a live handle; `out` must be writable.
enum SdqStatus sdq_strategy_to_text(const struct SdqStrategy *s, char **out);

// # Safety
// `s` must be a live handle; `out` must be writable.
enum SdqStatus sdq_strategy_layer_count(const struct SdqStrategy *s, size_t *out);

// Bitwidth of layer `index`.
//
// # Safety
// `s` must be a live handle; `out` must be writable.
enum SdqStatus sdq_strategy_layer_bits(const struct SdqStrategy *s, size_t index, uint32_t *out);

// Parameter-weighted average weight bitwidth.
//
// # Safety
// `s` must be a live handle; `out` must be writable.
enum SdqStatus sdq_strategy_avg_bits(const struct SdqStrategy *s, double *out);

// Weight compression rate against 32-bit floats.
//
// # Safety
// `s` must be a live handle; `out` must be writable.
enum SdqStatus sdq_strategy_wcr(const struct SdqStrategy *s, double *out);

// Rounds every layer up to the nearest of `supported[0..n]`; the result
// is a new handle.
//
// # Safety
// `s` must be a live handle, `supported` must point to `n` values, `out`
// must be writable.
enum SdqStatus sdq_strategy_hw_round(const struct SdqStrategy *s,
                                     const uint32_t *supported,
                                     size_t n,
                                     struct SdqStrategy **out);

// Parses a layer table (`name kind params in_w in_h stride` rows).
//
// # Safety
// `text` must be a nul-terminated string; `out` must be writable.
enum SdqStatus sdq_layer_table_parse(const char *text, struct SdqLayerTable **out);

// The built-in ResNet18 layer table.
//
// # Safety
// `out` must be writable.
enum SdqStatus sdq_layer_table_resnet18(struct SdqLayerTable **out);

// # Safety
// `t` must come from this library and not have been freed, or be null.
void sdq_layer_table_free(struct SdqLayerTable *t);

// # Safety
// `t` must be a live handle; `out` must be writable.
enum SdqStatus sdq_layer_table_len(const struct SdqLayerTable *t, size_t *out);

// Total BitOPs of `s` over the layers of `t`.
//
// # Safety
// `s` and `t` must be live handles; `out` must be writable.
enum SdqStatus sdq_bitops_total(const struct SdqStrategy *s,
                                const struct SdqLayerTable *t,
                                double *out);

// Model size in bytes.
//
// # Safety
// `s` and `t` must be live handles; `out` must be writable.
enum SdqStatus sdq_model_size_bytes(const struct SdqStrategy *s,
                                    const struct SdqLayerTable *t,
                                    double *out);

// Rounds `x` onto the `bits`-bit grid of `[0, 1]`.
//
// # Safety
// `out` must be writable.
enum SdqStatus sdq_quantize_unit(double x, uint32_t bits, double *out);

// Quantizes the weight tensor `w[0..n]` at `bits` into `out[0..n]`.
//
// # Safety
// `w` must point to `n` readable values and `out` to `n` writable ones.
enum SdqStatus sdq_quantize_weights(const double *w, size_t n, uint32_t bits, double *out);

// Expected squared error of a `bits`-bit uniform quantizer in units of the
// squared range; 0 for an unsupported bitwidth.
double sdq_expected_error_coeff(uint32_t bits);

#endif  /* SDQ_H */

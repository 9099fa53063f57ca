#ifndef CDR_ADAPTER_H
#define CDR_ADAPTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CDR_SIDE_X 0

#define CDR_SIDE_Y 1

// Result code of every exported function.
typedef enum CdrStatus {
  CDR_STATUS_OK = 0,
  CDR_STATUS_NULL_POINTER = 1,
  CDR_STATUS_INVALID_ARGUMENT = 2,
  CDR_STATUS_IO = 3,
  CDR_STATUS_FORMAT = 4,
  CDR_STATUS_DIM_MISMATCH = 5,
  CDR_STATUS_OUT_OF_RANGE = 6,
  CDR_STATUS_BUFFER_TOO_SMALL = 7,
  CDR_STATUS_PANIC = 8,
  CDR_STATUS_OTHER = 9,
} CdrStatus;

// A trained adapter between two domains.
typedef struct CdrAdapter CdrAdapter;

// A trained one-direction mapping.
typedef struct CdrMapping CdrMapping;

// A frozen embedding table.
typedef struct CdrTable CdrTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cdr_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`) and returns its full length in
// bytes, excluding the terminator. Returns 0 if the last call succeeded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t cdr_last_error_message(char *buf, size_t len);

// Loads a table written by `cdr pretrain`. The table is frozen.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CdrStatus cdr_table_load(const char *path, struct CdrTable **out);

// # Safety
// `data` must point to `len` readable bytes; `out` must be writable.
enum CdrStatus cdr_table_from_bytes(const uint8_t *data, size_t len, struct CdrTable **out);

// # Safety
// `table` must be null or a handle from this library not yet freed.
void cdr_table_free(struct CdrTable *table);

// Embedding dimension, user count and item count.
//
// # Safety
// `table` must be a live handle; the outputs must be writable.
enum CdrStatus cdr_table_shape(const struct CdrTable *table,
                               size_t *dim,
                               size_t *num_users,
                               size_t *num_items);

// Copies user `user`'s embedding into `out`.
//
// # Safety
// `table` must be a live handle; `out` must hold `out_len` doubles.
enum CdrStatus cdr_table_user(const struct CdrTable *table,
                              size_t user,
                              double *out,
                              size_t out_len);

// Inner product of `vec` with item `item`'s embedding.
//
// # Safety
// `table` must be a live handle; `vec` must hold `len` doubles.
enum CdrStatus cdr_table_score(const struct CdrTable *table,
                               const double *vec,
                               size_t len,
                               size_t item,
                               double *out);

// 1-based rank of `positive` among `positive` and `negatives` when scored
// with `vec`; ties go to the lower item index.
//
// # Safety
// `table` must be a live handle; `vec` must hold `len` doubles and
// `negatives` `num_negatives` indices.
enum CdrStatus cdr_rank_positive(const struct CdrTable *table,
                                 const double *vec,
                                 size_t len,
                                 size_t positive,
                                 const size_t *negatives,
                                 size_t num_negatives,
                                 size_t *rank);

// HR@k, NDCG@k and reciprocal rank of a single 1-based rank.
//
// # Safety
// The outputs must be writable.
enum CdrStatus cdr_rank_metrics(size_t rank, size_t k, double *hr, double *ndcg, double *rr);

// Loads an adapter written by `cdr train --method adapter`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CdrStatus cdr_adapter_load(const char *path, struct CdrAdapter **out);

// # Safety
// `data` must point to `len` readable bytes; `out` must be writable.
enum CdrStatus cdr_adapter_from_bytes(const uint8_t *data, size_t len, struct CdrAdapter **out);

// An adapter whose priors and decoders are identity maps.
//
// # Safety
// `out` must be writable.
enum CdrStatus cdr_adapter_identity(size_t dim, struct CdrAdapter **out);

// # Safety
// `adapter` must be null or a handle from this library not yet freed.
void cdr_adapter_free(struct CdrAdapter *adapter);

// # Safety
// `adapter` must be a live handle; `dim` must be writable.
enum CdrStatus cdr_adapter_dim(const struct CdrAdapter *adapter, size_t *dim);

// Transfers a source-side backbone vector to the target side
// (`CDR_SIDE_X` or `CDR_SIDE_Y`).
//
// # Safety
// `adapter` must be a live handle; `vec` must hold `len` doubles and `out`
// `out_len` doubles.
enum CdrStatus cdr_adapter_transfer(const struct CdrAdapter *adapter,
                                    uint32_t src,
                                    uint32_t tgt,
                                    const double *vec,
                                    size_t len,
                                    double *out,
                                    size_t out_len);

// Applies `num_hops` adapters in sequence; hop `i` maps `sides[2i]` to
// `sides[2i + 1]` of `adapters[i]`.
//
// # Safety
// `adapters` must hold `num_hops` live handles, `sides` `2 * num_hops`
// codes, `vec` `len` doubles and `out` `out_len` doubles.
enum CdrStatus cdr_cascade(const struct CdrAdapter *const *adapters,
                           const uint32_t *sides,
                           size_t num_hops,
                           const double *vec,
                           size_t len,
                           double *out,
                           size_t out_len);

// Loads a mapping written by `cdr train --method emcdr`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CdrStatus cdr_mapping_load(const char *path, struct CdrMapping **out);

// # Safety
// `mapping` must be null or a handle from this library not yet freed.
void cdr_mapping_free(struct CdrMapping *mapping);

// Source side of the mapping (`CDR_SIDE_X` maps X to Y).
//
// # Safety
// `mapping` must be a live handle; `src` must be writable.
enum CdrStatus cdr_mapping_source(const struct CdrMapping *mapping, uint32_t *src);

// # Safety
// `mapping` must be a live handle; `vec` must hold `len` doubles and `out`
// `out_len` doubles.
enum CdrStatus cdr_mapping_apply(const struct CdrMapping *mapping,
                                 const double *vec,
                                 size_t len,
                                 double *out,
                                 size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDR_ADAPTER_H */

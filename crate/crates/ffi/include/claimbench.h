#ifndef CLAIMBENCH_H
#define CLAIMBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of an FFI call.
typedef enum CbStatus {
  CB_STATUS_OK = 0,
  CB_STATUS_NULL_POINTER = 1,
  CB_STATUS_INVALID_UTF8 = 2,
  CB_STATUS_INVALID_ARGUMENT = 3,
  CB_STATUS_IO = 4,
  CB_STATUS_DATA = 5,
  CB_STATUS_PANIC = 6,
} CbStatus;

// Opaque flat vector index.
typedef struct CbIndex CbIndex;

// Opaque set of per-year code registries.
typedef struct CbRegistrySet CbRegistrySet;

typedef struct CbKindScore {
  double precision;
  double recall;
  bool full_match;
} CbKindScore;

typedef struct CbCaseScore {
  struct CbKindScore icd10;
  struct CbKindScore cpt;
  struct CbKindScore modifier;
} CbCaseScore;

typedef struct CbStructureScore {
  double rouge_l;
  double rouge_l_sum;
  double meteor;
} CbStructureScore;

typedef struct CbValidityReport {
  uint64_t valid_count;
  uint64_t fabricated_count;
  double valid_pct;
  double fabricated_pct;
} CbValidityReport;

typedef struct CbCodeValidity {
  struct CbValidityReport icd10;
  struct CbValidityReport cpt;
} CbCodeValidity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string. Do not free.
const char *cb_version(void);

// Message for the last failed call on this thread, or an empty string.
// Valid until the next `cb_*` call on the same thread. Do not free.
const char *cb_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a pointer previously returned by this library and not
// yet freed.
void cb_string_free(char *s);

// Parses free-form model output and writes the extracted code sets as JSON
// (`{"icd10": [...], "cpt": [...], "modifier_pairs": [[cpt, mod], ...]}`).
//
// # Safety
// `text` must be a valid NUL-terminated string; `out_json` must be writable.
enum CbStatus cb_parse_claim_json(const char *text_ptr, char **out_json);

// Parses both texts and scores the generated codes against the reference.
//
// # Safety
// Both strings must be valid NUL-terminated strings; `out_score` must be writable.
enum CbStatus cb_score_case(const char *generated,
                            const char *reference,
                            struct CbCaseScore *out_score);

// ROUGE-L, ROUGE-L-Sum (0-100) and METEOR (0-1) of `output` against `reference`.
//
// # Safety
// Both strings must be valid NUL-terminated strings; `out_score` must be writable.
enum CbStatus cb_structure_score(const char *output,
                                 const char *reference,
                                 struct CbStructureScore *out_score);

// Loads every `{year}.csv` registry in a directory.
//
// # Safety
// `dir` must be a valid NUL-terminated string; `out_registry` must be writable.
enum CbStatus cb_registry_load_dir(const char *dir, struct CbRegistrySet **out_registry);

// # Safety
// `registry` must be null or a handle from `cb_registry_load_dir` not yet freed.
void cb_registry_free(struct CbRegistrySet *registry);

// Parses `generated` and counts valid and fabricated codes against the
// registry for `year`.
//
// # Safety
// `registry` must be a live handle, `generated` a valid NUL-terminated
// string, and `out_validity` writable.
enum CbStatus cb_registry_classify(const struct CbRegistrySet *registry,
                                   int32_t year,
                                   const char *generated,
                                   struct CbCodeValidity *out_validity);

// Builds an index from `rows * dim` row-major floats. Row `i` gets the
// encounter id `"i"` and an empty claim.
//
// # Safety
// `data` must point to `rows * dim` readable floats; `out_index` must be writable.
enum CbStatus cb_index_build(const float *data,
                             size_t rows,
                             size_t dim,
                             struct CbIndex **out_index);

// Loads an index saved by the `index` command.
//
// # Safety
// `dir` must be a valid NUL-terminated string; `out_index` must be writable.
enum CbStatus cb_index_load(const char *dir, struct CbIndex **out_index);

// # Safety
// `index` must be null or a handle from this library not yet freed.
void cb_index_free(struct CbIndex *index);

// Number of rows, or 0 for a null handle.
//
// # Safety
// `index` must be null or a live handle.
size_t cb_index_len(const struct CbIndex *index);

// Vector dimension, or 0 for a null handle.
//
// # Safety
// `index` must be null or a live handle.
size_t cb_index_dim(const struct CbIndex *index);

// Exact k-nearest-neighbour search by squared Euclidean distance. Writes `k`
// row ids and distances, nearest first; ties keep the lower row id.
//
// # Safety
// `index` must be a live handle, `query` must point to `dim` floats, and
// `out_rows` and `out_distances` must each have room for `k` elements.
enum CbStatus cb_index_search(const struct CbIndex *index,
                              const float *query,
                              size_t dim,
                              size_t k,
                              size_t *out_rows,
                              double *out_distances);

// Claim text stored with row `row` of a loaded index, or null if out of
// range. Free with `cb_string_free`.
//
// # Safety
// `index` must be null or a live handle.
char *cb_index_claim(const struct CbIndex *index, size_t row);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLAIMBENCH_H */

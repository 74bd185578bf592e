#ifndef PARTICUL_H
#define PARTICUL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ParticulStatus {
  PARTICUL_STATUS_OK = 0,
  PARTICUL_STATUS_NULL_POINTER = 1,
  PARTICUL_STATUS_INVALID_ARGUMENT = 2,
  PARTICUL_STATUS_DIMENSION = 3,
  PARTICUL_STATUS_FORMAT = 4,
  PARTICUL_STATUS_IO = 5,
  PARTICUL_STATUS_CALIBRATION = 6,
  // Caller buffer too short; the last-error message names the needed length.
  PARTICUL_STATUS_BUFFER_TOO_SMALL = 7,
  PARTICUL_STATUS_PANIC = 8,
} ParticulStatus;

// Parsed feature archive.
typedef struct ParticulArchive ParticulArchive;

// Detector bank with its calibration.
typedef struct ParticulBank ParticulBank;

// Classifier checkpoint.
typedef struct ParticulModel ParticulModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *particul_last_error(void);

// Library version as a static nul-terminated string.
const char *particul_version(void);

// Loads a classifier checkpoint.
//
// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum ParticulStatus particul_model_load(const char *path, struct ParticulModel **out);

// # Safety
// `model` must come from `particul_model_load` and not be used afterwards.
void particul_model_free(struct ParticulModel *model);

// Input `(H, W, C)`, feature map `(H', W', D)` and logit count `N`.
//
// # Safety
// All pointers must be valid; `dims` must hold 7 elements.
enum ParticulStatus particul_model_dims(const struct ParticulModel *model, size_t *dims);

// Runs the classifier on an `H×W×C` image in `[0, 1]`, row-major with
// channels last. Writes the feature map and the logits.
//
// # Safety
// All pointers must be valid for their stated lengths.
enum ParticulStatus particul_model_forward(const struct ParticulModel *model,
                                           const double *pixels,
                                           size_t pixels_len,
                                           double *features_out,
                                           size_t features_len,
                                           double *logits_out,
                                           size_t logits_len);

// Loads a detector bank and its calibration.
//
// # Safety
// Paths must be nul-terminated strings and `out` writable.
enum ParticulStatus particul_bank_load(const char *bank_path,
                                       const char *calibration_path,
                                       struct ParticulBank **out);

// # Safety
// `bank` must come from `particul_bank_load` and not be used afterwards.
void particul_bank_free(struct ParticulBank *bank);

// `(class-based ? 1 : 0, N, p, D)`.
//
// # Safety
// All pointers must be valid; `info` must hold 4 elements.
enum ParticulStatus particul_bank_info(const struct ParticulBank *bank, size_t *info);

// Vanilla confidence of an `H×W×D` feature map.
//
// # Safety
// `features` must hold `H·W·D` values; `out` must be writable.
enum ParticulStatus particul_vanilla_confidence(const struct ParticulBank *bank,
                                                const double *features,
                                                size_t height,
                                                size_t width,
                                                size_t depth,
                                                double *out);

// Class-based confidence, using the detectors of the arg-max logit.
//
// # Safety
// `features` must hold `H·W·D` values, `logits` `n` values; `out` writable.
enum ParticulStatus particul_class_confidence(const struct ParticulBank *bank,
                                              const double *features,
                                              size_t height,
                                              size_t width,
                                              size_t depth,
                                              const double *logits,
                                              size_t n,
                                              double *out);

// Maximum softmax probability.
//
// # Safety
// `logits` must hold `n` values; `out` writable.
enum ParticulStatus particul_mcp_confidence(const double *logits, size_t n, double *out);

// Log-sum-exp of the logits.
//
// # Safety
// `logits` must hold `n` values; `out` writable.
enum ParticulStatus particul_energy_confidence(const double *logits, size_t n, double *out);

// Area under the ROC curve, in-distribution as positives.
//
// # Safety
// Score arrays must hold their stated lengths; `out` writable.
enum ParticulStatus particul_auroc(const double *iod,
                                   size_t n_iod,
                                   const double *ood,
                                   size_t n_ood,
                                   double *out);

// Step-wise area under the precision-recall curve.
//
// # Safety
// Score arrays must hold their stated lengths; `out` writable.
enum ParticulStatus particul_aupr(const double *iod,
                                  size_t n_iod,
                                  const double *ood,
                                  size_t n_ood,
                                  double *out);

// False-positive rate at the first threshold reaching `target_tpr`.
//
// # Safety
// Score arrays must hold their stated lengths; `out` writable.
enum ParticulStatus particul_fpr_at_tpr(const double *iod,
                                        size_t n_iod,
                                        const double *ood,
                                        size_t n_ood,
                                        double target_tpr,
                                        double *out);

// Spearman rank correlation. Degenerate input (constant series, fewer than
// three points) is `PARTICUL_STATUS_INVALID_ARGUMENT`.
//
// # Safety
// `xs` and `ys` must hold `n` values; `out` writable.
enum ParticulStatus particul_spearman(const double *xs, const double *ys, size_t n, double *out);

// Loads and validates a feature archive.
//
// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum ParticulStatus particul_archive_load(const char *path, struct ParticulArchive **out);

// Parses an archive from memory.
//
// # Safety
// `bytes` must hold `len` bytes and `out` be writable.
enum ParticulStatus particul_archive_parse(const uint8_t *bytes,
                                           size_t len,
                                           struct ParticulArchive **out);

// # Safety
// `archive` must come from this library and not be used afterwards.
void particul_archive_free(struct ParticulArchive *archive);

// Record count and logits per record.
//
// # Safety
// All pointers must be valid.
enum ParticulStatus particul_archive_info(const struct ParticulArchive *archive,
                                          size_t *records,
                                          size_t *logits);

// `(label, H, W, D)` of one record.
//
// # Safety
// All pointers must be valid; `dims` must hold 4 elements.
enum ParticulStatus particul_archive_record_dims(const struct ParticulArchive *archive,
                                                 size_t index,
                                                 size_t *dims);

// Copies the `H·W·D` feature values of one record.
//
// # Safety
// `out` must hold `len` floats.
enum ParticulStatus particul_archive_record_features(const struct ParticulArchive *archive,
                                                     size_t index,
                                                     float *out,
                                                     size_t len);

// Copies the logits of one record.
//
// # Safety
// `out` must hold `len` floats.
enum ParticulStatus particul_archive_record_logits(const struct ParticulArchive *archive,
                                                   size_t index,
                                                   float *out,
                                                   size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARTICUL_H */

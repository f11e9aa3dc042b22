#ifndef NOISECAL_H
#define NOISECAL_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum NoisecalStatus {
  NOISECAL_STATUS_OK = 0,
  NOISECAL_STATUS_NULL_POINTER = 1,
  NOISECAL_STATUS_INVALID_ARGUMENT = 2,
  NOISECAL_STATUS_SHAPE_ERROR = 3,
  NOISECAL_STATUS_INVALID_STATE = 4,
  NOISECAL_STATUS_STALE_TRACE = 5,
  NOISECAL_STATUS_NON_FINITE_GRADIENT = 6,
  NOISECAL_STATUS_FORMAT_ERROR = 7,
  NOISECAL_STATUS_CORRUPT_DATA = 8,
  NOISECAL_STATUS_DIVERGED = 9,
  NOISECAL_STATUS_CONFIG_ERROR = 10,
  NOISECAL_STATUS_IO_ERROR = 11,
  NOISECAL_STATUS_JSON_ERROR = 12,
  NOISECAL_STATUS_PANIC = 13,
} NoisecalStatus;

// Readout of a model. Stored as `uint32_t` in `NoisecalArch`.
typedef enum NoisecalOutput {
  NOISECAL_OUTPUT_SOFTMAX = 0,
  NOISECAL_OUTPUT_SIGMOID = 1,
} NoisecalOutput;

// Opaque model handle.
typedef struct NoisecalModel NoisecalModel;

// Settings for `noisecal_model_pretrain_noise`. Runs exactly `epochs`
// epochs with no early stopping.
typedef struct NoisecalNoiseOptions {
  size_t epochs;
  size_t batches_per_epoch;
  size_t batch_size;
  double learning_rate;
  // Propagate errors through the model's fixed feedback matrices.
  bool feedback_alignment;
  uint64_t seed;
} NoisecalNoiseOptions;

// Network shape: `depth` hidden Linear, BatchNorm, ReLU blocks of
// `hidden_width` units and a linear head with `num_classes` outputs.
typedef struct NoisecalArch {
  size_t input_dim;
  size_t hidden_width;
  size_t depth;
  size_t num_classes;
  // A `NoisecalOutput` value.
  uint32_t output;
} NoisecalArch;

// Calibration summary of a model on a labelled set.
typedef struct NoisecalMetrics {
  double loss;
  double ece;
  double mean_confidence;
  double accuracy;
  // `mean_confidence - accuracy`.
  double gap;
  double class_bias;
} NoisecalMetrics;

// Outcome of a rank test.
typedef struct NoisecalTestResult {
  // `U` of the first sample (rank-sum) or `W+` (signed-rank).
  double statistic;
  double p_value;
  // Exact null distribution rather than the normal approximation.
  bool exact;
} NoisecalTestResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *noisecal_version(void);

// Message of the last failed call on this thread, or an empty string.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *noisecal_last_error(void);

// Stable kebab-case name of a status code, or null for unknown codes.
const char *noisecal_status_name(int32_t status);

// Default noise-pretraining settings: 50 epochs of 100 batches of 128,
// learning rate 1e-4, backprop, seed 0.
struct NoisecalNoiseOptions noisecal_noise_options_default(void);

// Creates a He-initialised model. With `with_feedback`, fixed random
// feedback matrices are drawn after the forward weights.
//
// # Safety
// `arch` must point to a valid `NoisecalArch` and `out` to writable storage
// for one handle pointer.
enum NoisecalStatus noisecal_model_new(const struct NoisecalArch *arch,
                                       bool with_feedback,
                                       uint64_t seed,
                                       struct NoisecalModel **out);

// Reads a checkpoint written by this library or the `noisecal` CLI.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable storage for one
// handle pointer.
enum NoisecalStatus noisecal_model_load(const char *path, struct NoisecalModel **out);

// Writes the model as a checkpoint file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum NoisecalStatus noisecal_model_save(const struct NoisecalModel *model, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void noisecal_model_free(struct NoisecalModel *model);

// Copies the model's shape into `out`.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum NoisecalStatus noisecal_model_arch(const struct NoisecalModel *model,
                                        struct NoisecalArch *out);

// Number of trainable scalars.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum NoisecalStatus noisecal_model_parameter_count(const struct NoisecalModel *model, size_t *out);

// Eval-mode class probabilities for `rows` row-major samples. `out` must
// hold `rows * num_classes` values.
//
// # Safety
// `model` must be a live handle, `inputs` must hold `rows * input_dim`
// values and `out` must hold `out_len` writable values.
enum NoisecalStatus noisecal_model_predict_proba(const struct NoisecalModel *model,
                                                 const double *inputs,
                                                 size_t rows,
                                                 double *out,
                                                 size_t out_len);

// Loss and calibration metrics on labelled samples, with `num_bins`
// equal-width reliability bins.
//
// # Safety
// `model` must be a live handle, `inputs` must hold `rows * input_dim`
// values, `labels` must hold `rows` values and `out` must be writable.
enum NoisecalStatus noisecal_model_evaluate(const struct NoisecalModel *model,
                                            const double *inputs,
                                            const uint32_t *labels,
                                            size_t rows,
                                            size_t num_bins,
                                            struct NoisecalMetrics *out);

// Trains on Gaussian noise inputs with uniform random labels. Writes the
// final loss on a fixed held-out noise set to `final_loss` when it is not
// null. The optimizer starts fresh on every call.
//
// # Safety
// `model` must be a live handle not used concurrently, `options` must point
// to a valid `NoisecalNoiseOptions` and `final_loss` must be null or
// writable.
enum NoisecalStatus noisecal_model_pretrain_noise(struct NoisecalModel *model,
                                                  const struct NoisecalNoiseOptions *options,
                                                  double *final_loss);

// Expected calibration error of `n` predictions with `num_bins`
// equal-width bins. `correct[i]` is nonzero when prediction `i` is right.
//
// # Safety
// `confidence` and `correct` must hold `n` values and `out` must be
// writable.
enum NoisecalStatus noisecal_ece(const double *confidence,
                                 const uint8_t *correct,
                                 size_t n,
                                 size_t num_bins,
                                 double *out);

// Population standard deviation of per-class prediction shares.
//
// # Safety
// `predicted` must hold `n` values and `out` must be writable.
enum NoisecalStatus noisecal_class_bias(const uint32_t *predicted,
                                        size_t n,
                                        size_t num_classes,
                                        double *out);

// Area under the ROC curve for separating in-distribution scores (positive)
// from out-of-distribution scores by thresholding.
//
// # Safety
// `id` must hold `n_id` values, `ood` must hold `n_ood` values and `out`
// must be writable.
enum NoisecalStatus noisecal_auroc(const double *id,
                                   size_t n_id,
                                   const double *ood,
                                   size_t n_ood,
                                   double *out);

// Wilcoxon rank-sum test of `a` against `b`. The one-sided alternative is
// that `a` tends to be larger.
//
// # Safety
// `a` must hold `n_a` values, `b` must hold `n_b` values and `out` must be
// writable.
enum NoisecalStatus noisecal_rank_sum_test(const double *a,
                                           size_t n_a,
                                           const double *b,
                                           size_t n_b,
                                           bool two_sided,
                                           struct NoisecalTestResult *out);

// Wilcoxon signed-rank test of paired differences. Zero differences are
// dropped. The one-sided alternative is that differences tend to be
// positive.
//
// # Safety
// `diffs` must hold `n` values and `out` must be writable.
enum NoisecalStatus noisecal_signed_rank_test(const double *diffs,
                                              size_t n,
                                              bool two_sided,
                                              struct NoisecalTestResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOISECAL_H */

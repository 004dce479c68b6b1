#ifndef LESIONLAB_H
#define LESIONLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2..=7 match the command-line exit codes.
 */
typedef enum LesionlabStatus {
  LESIONLAB_STATUS_OK = 0,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  LESIONLAB_STATUS_BAD_ARGUMENT = 1,
  LESIONLAB_STATUS_IO = 2,
  LESIONLAB_STATUS_DATA = 3,
  LESIONLAB_STATUS_INVALID_INPUT = 4,
  LESIONLAB_STATUS_PRECONDITION = 5,
  LESIONLAB_STATUS_CHECKPOINT = 6,
  LESIONLAB_STATUS_TRAINING = 7,
  /**
   * An unexpected internal failure.
   */
  LESIONLAB_STATUS_INTERNAL = 8,
} LesionlabStatus;

/**
 * Loaded dataset manifest.
 */
typedef struct LesionlabManifest LesionlabManifest;

/**
 * Aggregated results of a run.
 */
typedef struct LesionlabReport LesionlabReport;

/**
 * Parsed run configuration.
 */
typedef struct LesionlabRunConfig LesionlabRunConfig;

/**
 * Cross-validation split plan.
 */
typedef struct LesionlabSplitPlan LesionlabSplitPlan;

/**
 * Percentages, as in the results table.
 */
typedef struct LesionlabRates {
  double accuracy;
  double sensitivity;
  double specificity;
  double f1_invasive;
  double f1_macro;
} LesionlabRates;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *lesionlab_last_error(void);

/**
 * Library version as a static string.
 */
const char *lesionlab_version(void);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void lesionlab_string_free(char *s);

/**
 * Normalized inverse-frequency weights `[benign, invasive]`.
 *
 * # Safety
 * `out` must point to two writable doubles.
 */
enum LesionlabStatus lesionlab_class_weights(size_t benign, size_t invasive, double *out);

/**
 * Lesion-level rates from confusion counts (invasive is positive).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LesionlabStatus lesionlab_metrics_from_confusion(uint64_t tp,
                                                      uint64_t fp,
                                                      uint64_t tn,
                                                      uint64_t fn_,
                                                      struct LesionlabRates *out);

/**
 * Generates a phantom dataset under `out_dir`. `params_toml` may be null for
 * the default parameters.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` must be valid.
 */
enum LesionlabStatus lesionlab_phantom_generate(const char *params_toml,
                                                size_t n_benign,
                                                size_t n_invasive,
                                                const char *out_dir,
                                                struct LesionlabManifest **out);

/**
 * # Safety
 * `path` must be nul-terminated; `out` must be valid.
 */
enum LesionlabStatus lesionlab_manifest_load(const char *path, struct LesionlabManifest **out);

/**
 * Lesion counts per label.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LesionlabStatus lesionlab_manifest_counts(const struct LesionlabManifest *m,
                                               size_t *benign,
                                               size_t *invasive);

/**
 * # Safety
 * `m` must come from this library or be null.
 */
void lesionlab_manifest_free(struct LesionlabManifest *m);

/**
 * Leave-one-invasive-lesion-out plan; `folds` of 0 means the default count.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LesionlabStatus lesionlab_split_make(const struct LesionlabManifest *m,
                                          size_t n_val_common,
                                          uint64_t seed,
                                          size_t folds,
                                          struct LesionlabSplitPlan **out);

/**
 * # Safety
 * `p` must be a valid plan handle.
 */
size_t lesionlab_split_fold_count(const struct LesionlabSplitPlan *p);

/**
 * The plan as JSON.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LesionlabStatus lesionlab_split_to_json(const struct LesionlabSplitPlan *p, char **out);

/**
 * # Safety
 * `p` must come from this library or be null.
 */
void lesionlab_split_free(struct LesionlabSplitPlan *p);

/**
 * Parses a run configuration file. Relative paths inside it resolve against
 * its directory.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LesionlabStatus lesionlab_config_load(const char *path, struct LesionlabRunConfig **out);

/**
 * Parses configuration text; relative paths stay relative to the process
 * working directory.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LesionlabStatus lesionlab_config_parse(const char *text, struct LesionlabRunConfig **out);

/**
 * Hex digest identifying the configuration (output directory excluded).
 *
 * # Safety
 * Pointers must be valid.
 */
enum LesionlabStatus lesionlab_config_digest(const struct LesionlabRunConfig *c, char **out);

/**
 * # Safety
 * `c` must come from this library or be null.
 */
void lesionlab_config_free(struct LesionlabRunConfig *c);

/**
 * Trains and evaluates every fold (resuming completed ones).
 *
 * # Safety
 * Pointers must be valid.
 */
enum LesionlabStatus lesionlab_run(const struct LesionlabRunConfig *c,
                                   struct LesionlabReport **out);

/**
 * Fold-mean rates.
 *
 * # Safety
 * Pointers must be valid.
 */
enum LesionlabStatus lesionlab_report_mean(const struct LesionlabReport *r,
                                           struct LesionlabRates *out);

/**
 * # Safety
 * `r` must be a valid report handle.
 */
size_t lesionlab_report_fold_count(const struct LesionlabReport *r);

/**
 * Rendered table (header plus one row).
 *
 * # Safety
 * Pointers must be valid.
 */
enum LesionlabStatus lesionlab_report_table(const struct LesionlabReport *r, char **out);

/**
 * # Safety
 * `r` must come from this library or be null.
 */
void lesionlab_report_free(struct LesionlabReport *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LESIONLAB_H */

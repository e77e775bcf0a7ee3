#ifndef TIMNET_H
#define TIMNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum TimnetStatus {
  TIMNET_STATUS_OK = 0,
  TIMNET_STATUS_NULL_POINTER = 1,
  TIMNET_STATUS_INVALID_ARGUMENT = 2,
  TIMNET_STATUS_IO = 3,
  TIMNET_STATUS_FORMAT = 4,
  TIMNET_STATUS_SHAPE = 5,
  TIMNET_STATUS_CONFIG = 6,
  TIMNET_STATUS_DATA = 7,
  TIMNET_STATUS_INTERNAL = 8,
} TimnetStatus;

/**
 * Fine-tuned binary or multi-label image classifier.
 */
typedef struct TimnetClassifier TimnetClassifier;

/**
 * Trained matching network with its vocabulary.
 */
typedef struct TimnetMatcher TimnetMatcher;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call on the same thread.
 */
const char *timnet_last_error(void);

/**
 * Static, NUL-terminated crate version.
 */
const char *timnet_version(void);

/**
 * Loads a matcher. `config_path` (JSON run config) may be NULL for the
 * defaults; it must describe the architecture the weights were saved from.
 *
 * # Safety
 * String arguments are NULL or NUL-terminated; `out` is writable.
 */
enum TimnetStatus timnet_matcher_load(const char *config_path,
                                      const char *weights_path,
                                      const char *vocab_path,
                                      struct TimnetMatcher **out);

/**
 * Probability that `report` describes the image.
 *
 * # Safety
 * `handle` comes from [`timnet_matcher_load`]; `report` is NUL-terminated;
 * `pixels` holds `height * width` bytes; `out_prob` is writable.
 */
enum TimnetStatus timnet_matcher_score(const struct TimnetMatcher *handle,
                                       const char *report,
                                       const uint8_t *pixels,
                                       size_t height,
                                       size_t width,
                                       double *out_prob);

/**
 * Releases a matcher. NULL is ignored.
 *
 * # Safety
 * `handle` is NULL or from [`timnet_matcher_load`] and not yet freed.
 */
void timnet_matcher_free(struct TimnetMatcher *handle);

/**
 * Loads a downstream classifier; the config's `task` selects binary or
 * multi-label outputs.
 *
 * # Safety
 * String arguments are NULL or NUL-terminated; `out` is writable.
 */
enum TimnetStatus timnet_classifier_load(const char *config_path,
                                         const char *weights_path,
                                         struct TimnetClassifier **out);

/**
 * Probabilities per image: 1 (binary, class 1) or `num_classes`.
 *
 * # Safety
 * `handle` is valid or NULL.
 */
size_t timnet_classifier_outputs_per_image(const struct TimnetClassifier *handle);

/**
 * Classifies `count` images stored back to back. Writes
 * `count * timnet_classifier_outputs_per_image` values to `out_probs`,
 * whose capacity is `out_len`.
 *
 * # Safety
 * `pixels` holds `count * height * width` bytes; `out_probs` holds `out_len`
 * doubles.
 */
enum TimnetStatus timnet_classifier_predict(const struct TimnetClassifier *handle,
                                            const uint8_t *pixels,
                                            size_t count,
                                            size_t height,
                                            size_t width,
                                            double *out_probs,
                                            size_t out_len);

/**
 * CAM heatmap of `class` for one image, normalized to `[0,1]`, written as
 * `height * width` doubles.
 *
 * # Safety
 * `pixels` holds `height * width` bytes; `out_heat` holds `out_len` doubles.
 */
enum TimnetStatus timnet_classifier_cam(const struct TimnetClassifier *handle,
                                        const uint8_t *pixels,
                                        size_t height,
                                        size_t width,
                                        size_t class_,
                                        double *out_heat,
                                        size_t out_len);

/**
 * Releases a classifier. NULL is ignored.
 *
 * # Safety
 * `handle` is NULL or from [`timnet_classifier_load`] and not yet freed.
 */
void timnet_classifier_free(struct TimnetClassifier *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TIMNET_H */

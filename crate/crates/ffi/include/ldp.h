/* C interface to the ldp perceptual grouping library. */

#ifndef LDP_H
#define LDP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Opaque dataset handle.
 */
typedef struct LdpDataset LdpDataset;

/**
 * Opaque trained-model handle (checkpoint contents plus derived configs).
 */
typedef struct LdpModel LdpModel;

/**
 * Opaque result of one inner-loop run.
 */
typedef struct LdpRun LdpRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ldp_last_error(void);

/**
 * Library version as a static string.
 */
const char *ldp_version(void);

/**
 * Generate a Multi-Shapes dataset. On success `*out` owns a new handle.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one pointer.
 */
int32_t ldp_dataset_generate_shapes(uintptr_t n,
                                    uintptr_t size,
                                    uintptr_t objects,
                                    uint64_t seed,
                                    struct LdpDataset **out);

/**
 * Read a dataset container file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` as above.
 */
int32_t ldp_dataset_read(const char *path, struct LdpDataset **out);

/**
 * Write a dataset container file.
 *
 * # Safety
 * `ds` must be a live handle; `path` a NUL-terminated string.
 */
int32_t ldp_dataset_write(const struct LdpDataset *ds, const char *path);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
uintptr_t ldp_dataset_len(const struct LdpDataset *ds);

/**
 * Scene height in pixels.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
uintptr_t ldp_dataset_height(const struct LdpDataset *ds);

/**
 * Scene width in pixels.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
uintptr_t ldp_dataset_width(const struct LdpDataset *ds);

/**
 * Copy one sample out: `pixels` receives H*W intensities in [0,1] and
 * `labels` H*W owner bitmasks. Either pointer may be null to skip it.
 *
 * # Safety
 * Non-null buffers must hold at least H*W elements.
 */
int32_t ldp_dataset_sample(const struct LdpDataset *ds,
                           uintptr_t index,
                           double *pixels,
                           uint8_t *labels);

/**
 * Release a dataset handle.
 *
 * # Safety
 * `ds` must be null or a handle produced by this library, not yet freed.
 */
void ldp_dataset_free(struct LdpDataset *ds);

/**
 * Load a trained model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for one pointer.
 */
int32_t ldp_model_load(const char *path, struct LdpModel **out);

/**
 * Mixture component count (background included) of a loaded model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t ldp_model_components(const struct LdpModel *model);

/**
 * Run the unrolled inner loop on one image (length H*W, intensities in
 * [0,1]). `seed` drives the latent initialization.
 *
 * # Safety
 * `pixels` must point at `len` doubles; `out` valid for one pointer.
 */
int32_t ldp_model_run(const struct LdpModel *model,
                      const double *pixels,
                      uintptr_t len,
                      uint64_t seed,
                      struct LdpRun **out);

/**
 * Number of inner steps recorded in a run.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
uintptr_t ldp_run_steps(const struct LdpRun *run);

/**
 * Copy the final grouping labels (argmax of the posterior) into `out`.
 *
 * # Safety
 * `out` must hold at least H*W bytes.
 */
int32_t ldp_run_labels(const struct LdpRun *run, uint8_t *out, uintptr_t len);

/**
 * Copy the per-step losses into `out` (`ldp_run_steps` entries).
 *
 * # Safety
 * `out` must hold at least `ldp_run_steps(run)` doubles.
 */
int32_t ldp_run_losses(const struct LdpRun *run, double *out, uintptr_t len);

/**
 * Copy the final posterior responsibilities (row-major H*W by K) into `out`.
 *
 * # Safety
 * `out` must hold at least H*W*K doubles.
 */
int32_t ldp_run_gamma(const struct LdpRun *run, double *out, uintptr_t len);

/**
 * Release a run handle.
 *
 * # Safety
 * `run` must be null or a handle produced by this library, not yet freed.
 */
void ldp_run_free(struct LdpRun *run);

/**
 * Score a model on a dataset: mean AMI (background/overlap excluded) and
 * mean permutation-minimal reconstruction MSE.
 *
 * # Safety
 * `ami` and `mse` must each point at one writable double.
 */
int32_t ldp_evaluate(const struct LdpModel *model,
                     const struct LdpDataset *ds,
                     uint64_t seed,
                     double *ami,
                     double *mse);

/**
 * Release a model handle.
 *
 * # Safety
 * `model` must be null or a handle produced by this library, not yet freed.
 */
void ldp_model_free(struct LdpModel *model);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LDP_H */

#ifndef CGZ_H
#define CGZ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CgzStatus {
  CGZ_STATUS_OK = 0,
  /**
   * Bad sizes, shapes, hyper-parameters or checkpoint stage.
   */
  CGZ_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The file could not be opened, read or written.
   */
  CGZ_STATUS_IO = 2,
  /**
   * A computation produced NaN or infinity.
   */
  CGZ_STATUS_NUMERICAL = 3,
  /**
   * The file exists but is not a valid, supported cgz file.
   */
  CGZ_STATUS_FORMAT = 4,
  /**
   * A required pointer was null.
   */
  CGZ_STATUS_NULL_POINTER = 5,
  /**
   * Internal panic. The handle arguments should be treated as unusable.
   */
  CGZ_STATUS_PANIC = 6,
} CgzStatus;

/**
 * Terms of the contrastive objective, for [`cgz_contrastive_loss`].
 */
typedef enum CgzLossVariant {
  CGZ_LOSS_VARIANT_COMBINED = 0,
  CGZ_LOSS_VARIANT_NTXENT_ONLY = 1,
  CGZ_LOSS_VARIANT_REDUNDANCY_ONLY = 2,
} CgzLossVariant;

/**
 * Gaze samples held in memory.
 */
typedef struct CgzDataset CgzDataset;

/**
 * A checkpoint loaded for inference.
 */
typedef struct CgzModel CgzModel;

/**
 * Image geometry, channels first.
 */
typedef struct CgzImageShape {
  size_t channels;
  size_t height;
  size_t width;
} CgzImageShape;

/**
 * What a loaded checkpoint expects and produces.
 */
typedef struct CgzModelInfo {
  struct CgzImageShape input;
  size_t latent_dim;
  /**
   * False for a contrastive-pretraining checkpoint, whose regressor is untrained.
   */
  bool finetuned;
} CgzModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the current thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len` bytes including the NUL.
 *
 * Returns the buffer size needed for the whole message, or 0 when no call
 * on this thread has failed yet. Passing a null `buf` only queries the size.
 *
 * # Safety
 * `buf` is null or points to `len` writable bytes.
 */
size_t cgz_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint written by `cgz pretrain` or `cgz finetune`.
 * `*out` is set to null on failure.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` points to writable storage.
 */
enum CgzStatus cgz_model_load(const char *path, struct CgzModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` is null or a handle from [`cgz_model_load`] not yet freed.
 */
void cgz_model_free(struct CgzModel *model);

/**
 * Input geometry, latent width and stage of a model.
 *
 * # Safety
 * `model` is a live handle; `out` points to writable storage.
 */
enum CgzStatus cgz_model_info(const struct CgzModel *model, struct CgzModelInfo *out);

/**
 * Latent vectors for `n` images.
 *
 * `images` holds `n` images of the model's input shape, channels first,
 * values in [0, 1]. `out` receives `n * latent_dim` floats.
 *
 * # Safety
 * `model` is a live handle; `images` and `out` point to buffers of the sizes above.
 */
enum CgzStatus cgz_model_embed(const struct CgzModel *model,
                               const float *images,
                               size_t n,
                               float *out);

/**
 * Gaze predictions for `n` images as (pitch, yaw) pairs in radians.
 *
 * Requires a fine-tuned checkpoint. `images` is laid out as for
 * [`cgz_model_embed`]; `out` receives `2 * n` floats.
 *
 * # Safety
 * `model` is a live handle; `images` and `out` point to buffers of the sizes above.
 */
enum CgzStatus cgz_model_predict(const struct CgzModel *model,
                                 const float *images,
                                 size_t n,
                                 float *out);

/**
 * Loads a `.cgzd` dataset file. `*out` is set to null on failure.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` points to writable storage.
 */
enum CgzStatus cgz_dataset_load(const char *path, struct CgzDataset **out);

/**
 * Renders `count` synthetic samples of `size x size` pixels. The same
 * arguments always give the same dataset. `*out` is set to null on failure.
 *
 * # Safety
 * `out` points to writable storage.
 */
enum CgzStatus cgz_dataset_generate(size_t count,
                                    uint64_t seed,
                                    size_t size,
                                    bool jitter,
                                    struct CgzDataset **out);

/**
 * Writes a dataset to a `.cgzd` file.
 *
 * # Safety
 * `dataset` is a live handle; `path` is a NUL-terminated string.
 */
enum CgzStatus cgz_dataset_save(const struct CgzDataset *dataset, const char *path);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `dataset` is null or a live handle.
 */
size_t cgz_dataset_len(const struct CgzDataset *dataset);

/**
 * Shape of the images in a non-empty dataset.
 *
 * # Safety
 * `dataset` is a live handle; `out` points to writable storage.
 */
enum CgzStatus cgz_dataset_image_shape(const struct CgzDataset *dataset, struct CgzImageShape *out);

/**
 * Copies sample `index`. `image` receives channels x height x width floats
 * and may be null to fetch only the label. `pitch` and `yaw` are radians.
 *
 * # Safety
 * `dataset` is a live handle; `image` is null or large enough; `pitch` and
 * `yaw` point to writable storage.
 */
enum CgzStatus cgz_dataset_get(const struct CgzDataset *dataset,
                               size_t index,
                               float *image,
                               float *pitch,
                               float *yaw);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `dataset` is null or a handle from this library not yet freed.
 */
void cgz_dataset_free(struct CgzDataset *dataset);

/**
 * Mean angular error in degrees between `n` predicted and true
 * (pitch, yaw) pairs in radians. `n` must be positive.
 *
 * # Safety
 * `pred` and `truth` point to `2 * n` floats; `out` to writable storage.
 */
enum CgzStatus cgz_mean_angular_error(const float *pred, const float *truth, size_t n, double *out);

/**
 * Contrastive objective of two `batch x dim` projection matrices, row `i`
 * of each being the two views of sample `i`. `variant` is a
 * [`CgzLossVariant`] value.
 *
 * # Safety
 * `p1` and `p2` point to `batch * dim` doubles; `out` to writable storage.
 */
enum CgzStatus cgz_contrastive_loss(const double *p1,
                                    const double *p2,
                                    size_t batch,
                                    size_t dim,
                                    double tau,
                                    double gamma,
                                    uint32_t variant,
                                    double *out);

/**
 * Mean elementwise Huber penalty of `pred - target` with threshold `delta`.
 *
 * # Safety
 * `pred` and `target` point to `len` doubles; `out` to writable storage.
 */
enum CgzStatus cgz_huber_loss(const double *pred,
                              const double *target,
                              size_t len,
                              double delta,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CGZ_H */

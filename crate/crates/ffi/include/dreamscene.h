#ifndef DREAMSCENE_H
#define DREAMSCENE_H

#include <stddef.h>
#include <stdint.h>

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_ARGUMENT = 2,
  DS_STATUS_IO = 3,
  DS_STATUS_FORMAT = 4,
  DS_STATUS_SHAPE_MISMATCH = 5,
  DS_STATUS_BUFFER_TOO_SMALL = 6,
  DS_STATUS_OUT_OF_RANGE = 7,
  DS_STATUS_NUMERIC = 8,
  DS_STATUS_INTERNAL = 99,
} DsStatus;

// Gaussian field handle.
typedef struct DsField DsField;

// Camera trajectory handle.
typedef struct DsTrajectory DsTrajectory;

// Pinhole camera. Pixel centers sit at integer coordinates.
typedef struct DsIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} DsIntrinsics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *ds_last_error(void);

// Library version as a static NUL-terminated string.
const char *ds_version(void);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum DsStatus ds_field_load(const char *path, struct DsField **out);

// # Safety
// `field` must be a live handle and `path` a NUL-terminated string.
enum DsStatus ds_field_save(const struct DsField *field, const char *path);

// # Safety
// `field` must be a live handle and `out` writable.
enum DsStatus ds_field_count(const struct DsField *field, size_t *out);

// Drops primitives with opacity below `threshold` in place. `removed` may
// be null.
//
// # Safety
// `field` must be a live handle; `removed` null or writable.
enum DsStatus ds_field_prune(struct DsField *field, double threshold, size_t *removed);

// # Safety
// `field` must be null or a handle not yet freed.
void ds_field_free(struct DsField *field);

// Spiral of `n_views` poses looking at `look_point`.
//
// # Safety
// `look_point` and `up` must point to 3 doubles; `out` writable.
enum DsStatus ds_trajectory_spiral(double r,
                                   size_t n_views,
                                   const double *look_point,
                                   const double *up,
                                   struct DsIntrinsics intrinsics,
                                   struct DsTrajectory **out);

// Reads a trajectory JSON file and multiplies translations by `scale`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum DsStatus ds_trajectory_load(const char *path, double scale, struct DsTrajectory **out);

// # Safety
// `traj` must be a live handle and `path` a NUL-terminated string.
enum DsStatus ds_trajectory_save(const struct DsTrajectory *traj, const char *path);

// # Safety
// `traj` must be a live handle and `out` writable.
enum DsStatus ds_trajectory_len(const struct DsTrajectory *traj, size_t *out);

// Writes pose `index` as `[w, x, y, z, tx, ty, tz]` (world-to-camera).
//
// # Safety
// `traj` must be a live handle and `pose` point to 7 writable doubles.
enum DsStatus ds_trajectory_pose(const struct DsTrajectory *traj, size_t index, double *pose);

// # Safety
// `traj` must be a live handle and `out` writable.
enum DsStatus ds_trajectory_intrinsics(const struct DsTrajectory *traj, struct DsIntrinsics *out);

// Rebases the trajectory onto its first camera in place.
//
// # Safety
// `traj` must be a live handle.
enum DsStatus ds_trajectory_standardize(struct DsTrajectory *traj);

// # Safety
// `traj` must be null or a handle not yet freed.
void ds_trajectory_free(struct DsTrajectory *traj);

// Renders `field` from `pose` (`[w, x, y, z, tx, ty, tz]`) into caller
// buffers. `rgb` must hold `rgb_len >= width * height * 3` doubles; `alpha`
// may be null, otherwise it must hold `alpha_len >= width * height`.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum DsStatus ds_render(const struct DsField *field,
                        const double *pose,
                        struct DsIntrinsics intrinsics,
                        double *rgb,
                        size_t rgb_len,
                        double *alpha,
                        size_t alpha_len);

// PSNR in dB for images in `[0, peak]`.
//
// # Safety
// `a` and `b` must hold `width * height * 3` doubles; `out` writable.
enum DsStatus ds_psnr(const double *a,
                      const double *b,
                      uint32_t width,
                      uint32_t height,
                      double peak,
                      double *out);

// Mean SSIM over the three channels. Images must be at least 11×11.
//
// # Safety
// `a` and `b` must hold `width * height * 3` doubles; `out` writable.
enum DsStatus ds_ssim(const double *a,
                      const double *b,
                      uint32_t width,
                      uint32_t height,
                      double *out);

// Mean absolute difference per channel value.
//
// # Safety
// `a` and `b` must hold `width * height * 3` doubles; `out` writable.
enum DsStatus ds_l1(const double *a, const double *b, uint32_t width, uint32_t height, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DREAMSCENE_H */

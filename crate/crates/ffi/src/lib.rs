//! C ABI over the dreamscene library.
//!
//! Every function returns a [`DsStatus`]. On failure the message is kept per
//! thread and can be read with [`ds_last_error`]. Handles are opaque and owned
//! by the caller until passed to the matching `*_free`.
//!
//! Images cross the boundary as interleaved RGB `double` triples, row-major,
//! `width * height * 3` values; alpha as `width * height` values.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dreamscene::camera::{spiral_trajectory, standardize_trajectory, CameraPose, Intrinsics, Trajectory};
use dreamscene::gaussian_field::{load_ply, prune, save_ply, GaussianField};
use dreamscene::metrics;
use dreamscene::raster::RgbImage;
use dreamscene::splat_render::render;
use dreamscene::Error;
use nalgebra::Vector3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    BufferTooSmall = 6,
    OutOfRange = 7,
    Numeric = 8,
    Internal = 99,
}

/// Pinhole camera. Pixel centers sit at integer coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl DsIntrinsics {
    fn to_core(self) -> Result<Intrinsics, Failure> {
        Ok(Intrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width as usize,
            self.height as usize,
        )?)
    }

    fn from_core(k: &Intrinsics) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width as u32,
            height: k.height as u32,
        }
    }
}

/// Gaussian field handle.
pub struct DsField {
    inner: GaussianField,
}

/// Camera trajectory handle.
pub struct DsTrajectory {
    inner: Trajectory,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure {
    status: DsStatus,
    message: String,
}

impl Failure {
    fn new(status: DsStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => DsStatus::Io,
            Error::Format { .. } | Error::Json(_) | Error::Image(_) => DsStatus::Format,
            Error::ShapeMismatch(_) | Error::TooSmall(_) => DsStatus::ShapeMismatch,
            Error::NonFiniteLoss { .. } | Error::DegenerateFit(_) | Error::DegenerateLookAt(_) => DsStatus::Numeric,
            _ => DsStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            DsStatus::Ok
        }
        Ok(Err(fail)) => {
            set_error(fail.message);
            fail.status
        }
        Err(_) => {
            set_error("internal panic".into());
            DsStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::new(DsStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::new(DsStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(DsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(DsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn read_image(data: *const f64, width: u32, height: u32, what: &str) -> Result<RgbImage, Failure> {
    if data.is_null() {
        return Err(Failure::new(DsStatus::NullPointer, format!("{what} is null")));
    }
    let (w, h) = (width as usize, height as usize);
    let flat = std::slice::from_raw_parts(data, w * h * 3);
    Ok(RgbImage {
        width: w,
        height: h,
        data: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_field_load(path: *const c_char, out: *mut *mut DsField) -> DsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let field = load_ply(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DsField { inner: field }));
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ds_field_save(field: *const DsField, path: *const c_char) -> DsStatus {
    guard(|| {
        let field = handle(field, "field")?;
        save_ply(&field.inner, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_field_count(field: *const DsField, out: *mut usize) -> DsStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(field, "field")?.inner.len();
        Ok(())
    })
}

/// Drops primitives with opacity below `threshold` in place. `removed` may
/// be null.
///
/// # Safety
/// `field` must be a live handle; `removed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ds_field_prune(field: *mut DsField, threshold: f64, removed: *mut usize) -> DsStatus {
    guard(|| {
        let field = out_ptr(field, "field")?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Failure::new(DsStatus::InvalidArgument, "threshold outside [0, 1]"));
        }
        let before = field.inner.len();
        field.inner = prune(&field.inner, threshold);
        if let Some(r) = removed.as_mut() {
            *r = before - field.inner.len();
        }
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_field_free(field: *mut DsField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Spiral of `n_views` poses looking at `look_point`.
///
/// # Safety
/// `look_point` and `up` must point to 3 doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_trajectory_spiral(
    r: f64,
    n_views: usize,
    look_point: *const f64,
    up: *const f64,
    intrinsics: DsIntrinsics,
    out: *mut *mut DsTrajectory,
) -> DsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if look_point.is_null() || up.is_null() {
            return Err(Failure::new(DsStatus::NullPointer, "look_point or up is null"));
        }
        let lp = std::slice::from_raw_parts(look_point, 3);
        let u = std::slice::from_raw_parts(up, 3);
        let traj = spiral_trajectory(
            r,
            n_views,
            &Vector3::new(lp[0], lp[1], lp[2]),
            &Vector3::new(u[0], u[1], u[2]),
            intrinsics.to_core()?,
        )?;
        *out = Box::into_raw(Box::new(DsTrajectory { inner: traj }));
        Ok(())
    })
}

/// Reads a trajectory JSON file and multiplies translations by `scale`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_trajectory_load(path: *const c_char, scale: f64, out: *mut *mut DsTrajectory) -> DsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Failure::new(DsStatus::InvalidArgument, "scale must be positive"));
        }
        let traj = Trajectory::load(path_arg(path)?)?.scaled(scale);
        *out = Box::into_raw(Box::new(DsTrajectory { inner: traj }));
        Ok(())
    })
}

/// # Safety
/// `traj` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ds_trajectory_save(traj: *const DsTrajectory, path: *const c_char) -> DsStatus {
    guard(|| {
        handle(traj, "trajectory")?.inner.save(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `traj` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_trajectory_len(traj: *const DsTrajectory, out: *mut usize) -> DsStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(traj, "trajectory")?.inner.len();
        Ok(())
    })
}

/// Writes pose `index` as `[w, x, y, z, tx, ty, tz]` (world-to-camera).
///
/// # Safety
/// `traj` must be a live handle and `pose` point to 7 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_trajectory_pose(traj: *const DsTrajectory, index: usize, pose: *mut f64) -> DsStatus {
    guard(|| {
        let traj = handle(traj, "trajectory")?;
        if pose.is_null() {
            return Err(Failure::new(DsStatus::NullPointer, "pose is null"));
        }
        let p = traj.inner.poses.get(index).ok_or_else(|| {
            Failure::new(
                DsStatus::OutOfRange,
                format!("pose {index} of {}", traj.inner.len()),
            )
        })?;
        std::slice::from_raw_parts_mut(pose, 7).copy_from_slice(&p.to_array());
        Ok(())
    })
}

/// # Safety
/// `traj` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_trajectory_intrinsics(traj: *const DsTrajectory, out: *mut DsIntrinsics) -> DsStatus {
    guard(|| {
        *out_ptr(out, "out")? = DsIntrinsics::from_core(&handle(traj, "trajectory")?.inner.intrinsics);
        Ok(())
    })
}

/// Rebases the trajectory onto its first camera in place.
///
/// # Safety
/// `traj` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ds_trajectory_standardize(traj: *mut DsTrajectory) -> DsStatus {
    guard(|| {
        let traj = out_ptr(traj, "trajectory")?;
        traj.inner = standardize_trajectory(&traj.inner);
        Ok(())
    })
}

/// # Safety
/// `traj` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_trajectory_free(traj: *mut DsTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Renders `field` from `pose` (`[w, x, y, z, tx, ty, tz]`) into caller
/// buffers. `rgb` must hold `rgb_len >= width * height * 3` doubles; `alpha`
/// may be null, otherwise it must hold `alpha_len >= width * height`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ds_render(
    field: *const DsField,
    pose: *const f64,
    intrinsics: DsIntrinsics,
    rgb: *mut f64,
    rgb_len: usize,
    alpha: *mut f64,
    alpha_len: usize,
) -> DsStatus {
    guard(|| {
        let field = handle(field, "field")?;
        if pose.is_null() || rgb.is_null() {
            return Err(Failure::new(DsStatus::NullPointer, "pose or rgb is null"));
        }
        let mut q = [0.0; 7];
        q.copy_from_slice(std::slice::from_raw_parts(pose, 7));
        let pose = CameraPose::from_array(q)?;
        let k = intrinsics.to_core()?;
        let n = k.pixel_count();
        if rgb_len < n * 3 || (!alpha.is_null() && alpha_len < n) {
            return Err(Failure::new(
                DsStatus::BufferTooSmall,
                format!("need {} rgb and {n} alpha values", n * 3),
            ));
        }
        let out = render(&field.inner, &pose, &k);
        let dst = std::slice::from_raw_parts_mut(rgb, n * 3);
        for (d, c) in dst.chunks_exact_mut(3).zip(&out.color.data) {
            d.copy_from_slice(c);
        }
        if !alpha.is_null() {
            std::slice::from_raw_parts_mut(alpha, n).copy_from_slice(&out.alpha.data);
        }
        Ok(())
    })
}

unsafe fn compare(
    a: *const f64,
    b: *const f64,
    width: u32,
    height: u32,
    out: *mut f64,
    f: impl FnOnce(&RgbImage, &RgbImage) -> dreamscene::Result<f64>,
) -> DsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let a = read_image(a, width, height, "a")?;
        let b = read_image(b, width, height, "b")?;
        *out = f(&a, &b)?;
        Ok(())
    })
}

/// PSNR in dB for images in `[0, peak]`.
///
/// # Safety
/// `a` and `b` must hold `width * height * 3` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_psnr(a: *const f64, b: *const f64, width: u32, height: u32, peak: f64, out: *mut f64) -> DsStatus {
    compare(a, b, width, height, out, |x, y| metrics::psnr(x, y, peak))
}

/// Mean SSIM over the three channels. Images must be at least 11×11.
///
/// # Safety
/// `a` and `b` must hold `width * height * 3` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_ssim(a: *const f64, b: *const f64, width: u32, height: u32, out: *mut f64) -> DsStatus {
    compare(a, b, width, height, out, metrics::ssim)
}

/// Mean absolute difference per channel value.
///
/// # Safety
/// `a` and `b` must hold `width * height * 3` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_l1(a: *const f64, b: *const f64, width: u32, height: u32, out: *mut f64) -> DsStatus {
    compare(a, b, width, height, out, metrics::l1)
}

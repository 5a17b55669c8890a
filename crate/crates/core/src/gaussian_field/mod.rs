//! Gaussian primitives, initialization from RGBD views, and pruning.

mod optimize;
mod ply;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::raster::{Mask, Rgb};
use crate::rgbd_warp::{pixel_index, project_point, RgbdImage};

pub use optimize::{optimize, photometric_loss, GradientScale, LearningRates, OptimizeConfig, OptimizeReport};
pub use ply::{load_ply, read_ply, save_ply, write_ply};

pub const INIT_OPACITY: f64 = 0.8;
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.005;
/// Relative depth agreement under which a pixel counts as already covered.
pub const COVERAGE_DEPTH_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Vector3<f64>,
    /// Natural log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; normalized wherever it is used.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Rgb,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `q / |q|`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

impl GaussianPrimitive {
    pub fn isotropic(center: Vector3<f64>, scale: f64, opacity: f64, color: Rgb) -> Self {
        Self {
            center,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    /// `R·diag(s²)·Rᵀ`
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianField {
    pub primitives: Vec<GaussianPrimitive>,
}

impl GaussianField {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        Self { primitives }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Half the diagonal of the centers' bounding box.
    pub fn extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.primitives {
            lo = lo.inf(&p.center);
            hi = hi.sup(&p.center);
        }
        if self.primitives.is_empty() {
            0.0
        } else {
            0.5 * (hi - lo).norm()
        }
    }
}

/// Whether `world` is already explained by one of `views`: it projects
/// inside that view and its depth agrees within 5%.
pub(crate) fn covered_by(world: &Vector3<f64>, views: &[RgbdImage]) -> bool {
    views.iter().any(|view| {
        let Some((u, v, z)) = project_point(&view.pose, &view.intrinsics, world) else {
            return false;
        };
        let Some((x, y)) = pixel_index(&view.intrinsics, u, v) else {
            return false;
        };
        view.depth
            .get(x, y)
            .is_some_and(|d| (z - d).abs() <= COVERAGE_DEPTH_TOLERANCE * d)
    })
}

/// Primitives for the stride-sampled valid pixels of `view` that are selected
/// by `mask` (all pixels when `None`) and not covered by `earlier`.
pub fn primitives_from_view(
    view: &RgbdImage,
    mask: Option<&Mask>,
    earlier: &[RgbdImage],
    stride: usize,
) -> Vec<GaussianPrimitive> {
    let stride = stride.max(1);
    let intr = &view.intrinsics;
    let cam_to_world = view.pose.invert();
    let mut out = Vec::new();
    for v in (0..intr.height).step_by(stride) {
        for u in (0..intr.width).step_by(stride) {
            if mask.is_some_and(|m| !m.get(u, v)) {
                continue;
            }
            let Some(d) = view.depth.get(u, v) else { continue };
            let world = cam_to_world.transform_point(&intr.unproject(u as f64, v as f64, d));
            if covered_by(&world, earlier) {
                continue;
            }
            let footprint = d / intr.fx * stride as f64;
            out.push(GaussianPrimitive::isotropic(
                world,
                footprint,
                INIT_OPACITY,
                view.color.get(u, v),
            ));
        }
    }
    out
}

/// One primitive per sampled valid pixel across `views`, skipping pixels an
/// earlier view already covers.
pub fn init_from_rgbd(views: &[RgbdImage], stride: usize) -> Result<GaussianField> {
    if views.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let mut primitives = Vec::new();
    for (i, view) in views.iter().enumerate() {
        primitives.extend(primitives_from_view(view, None, &views[..i], stride));
    }
    if primitives.is_empty() {
        return Err(Error::EmptyField);
    }
    Ok(GaussianField { primitives })
}

/// Drops primitives whose opacity is below `threshold`, keeping order.
pub fn prune(field: &GaussianField, threshold: f64) -> GaussianField {
    GaussianField {
        primitives: field
            .primitives
            .iter()
            .filter(|p| p.opacity() >= threshold)
            .copied()
            .collect(),
    }
}

//! Synthetic scene and ground-truth services shared by integration tests.
#![allow(dead_code)]

use dreamscene::camera::{look_at_rotation, CameraPose, Intrinsics};
use dreamscene::gaussian_field::{logit, GaussianField, GaussianPrimitive};
use dreamscene::inpaint_bridge::{
    Captioner, DepthEstimator, InpaintJob, Inpainter, Services, StaticCaption, ViewContext,
};
use dreamscene::raster::{Rgb, RgbImage};
use dreamscene::rgbd_warp::DepthMap;
use dreamscene::splat_render::{render, RenderOutput};
use dreamscene::Result;
use nalgebra::{Rotation3, UnitQuaternion, Vector3};

pub const SPACING: f64 = 0.03;

fn quat_of(rot: &Rotation3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(rot);
    [q.w, q.i, q.j, q.k]
}

/// Flat primitives tiling the rectangle `origin + a·e1 + b·e2`, `a ∈ [0, la]`,
/// `b ∈ [0, lb]`.
fn patch(
    out: &mut Vec<GaussianPrimitive>,
    origin: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    la: f64,
    lb: f64,
    color: impl Fn(f64, f64) -> Rgb,
) {
    let normal = e1.cross(&e2);
    let rot = Rotation3::from_basis_unchecked(&[e1, e2, normal]);
    let q = quat_of(&rot);
    let na = (la / SPACING).round() as usize;
    let nb = (lb / SPACING).round() as usize;
    for i in 0..=na {
        for j in 0..=nb {
            let (a, b) = (i as f64 * la / na as f64, j as f64 * lb / nb as f64);
            out.push(GaussianPrimitive {
                center: origin + e1 * a + e2 * b,
                log_scale: Vector3::new(0.75 * SPACING, 0.75 * SPACING, 0.05 * SPACING).map(f64::ln),
                rotation: q,
                opacity_logit: logit(0.97),
                color: color(a, b),
            });
        }
    }
}

fn wall_color(x: f64, y: f64) -> Rgb {
    let s = (2.1 * x).sin() * (1.7 * y).cos();
    let t = (1.3 * x + 0.9 * y).sin();
    let cell = if ((x * 1.25).floor() + (y * 1.25).floor()) as i64 % 2 == 0 { 0.08 } else { -0.08 };
    [0.5 + 0.25 * s + cell, 0.45 + 0.2 * t + cell, 0.55 - 0.2 * s * t + cell]
}

fn add_box(out: &mut Vec<GaussianPrimitive>, lo: Vector3<f64>, size: Vector3<f64>, base: Rgb) {
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    let shade = |k: f64| move |a: f64, b: f64| {
        let g = 0.06 * ((6.0 * a).sin() + (5.0 * b).cos());
        [base[0] * k + g, base[1] * k + g, base[2] * k - g]
    };
    // Front (−z), left, right, top, bottom; the back face is never seen.
    patch(out, lo, x, y, size.x, size.y, shade(1.0));
    patch(out, lo, y, z, size.y, size.z, shade(0.8));
    patch(out, lo + x * size.x, z, y, size.z, size.y, shade(0.85));
    patch(out, lo, z, x, size.z, size.x, shade(0.7));
    patch(out, lo + y * size.y, x, z, size.x, size.z, shade(0.9));
}

/// Textured wall at z = 4 with three boxes in front of it.
pub fn reference_field() -> GaussianField {
    let mut p = Vec::new();
    patch(&mut p, Vector3::new(-3.2, -3.2, 4.0), Vector3::x(), Vector3::y(), 6.4, 6.4, |a, b| wall_color(a - 3.2, b - 3.2));
    add_box(&mut p, Vector3::new(-1.3, -0.2, 2.9), Vector3::new(0.6, 0.7, 0.6), [0.85, 0.3, 0.25]);
    add_box(&mut p, Vector3::new(0.4, -0.8, 2.5), Vector3::new(0.5, 0.5, 0.5), [0.2, 0.7, 0.35]);
    add_box(&mut p, Vector3::new(-0.2, 0.5, 3.3), Vector3::new(0.7, 0.45, 0.4), [0.25, 0.35, 0.85]);
    for g in &mut p {
        g.color = g.color.map(|c| c.clamp(0.02, 0.98));
    }
    GaussianField::new(p)
}

pub fn intrinsics(size: usize) -> Intrinsics {
    Intrinsics::default_for(size, size)
}

pub fn look_from(position: Vector3<f64>, target: Vector3<f64>) -> CameraPose {
    let rot = look_at_rotation(&position, &target, &Vector3::y()).unwrap();
    CameraPose::from_position(rot, position)
}

pub fn ground_truth(field: &GaussianField, view: &ViewContext) -> RenderOutput {
    render(field, &view.pose, &view.intrinsics)
}

pub fn gt_depth(out: &RenderOutput) -> DepthMap {
    let mut d = DepthMap::from_values(out.width(), out.height(), out.depth.data.clone()).unwrap();
    for (v, a) in d.valid.iter_mut().zip(&out.alpha.data) {
        *v &= *a > 0.5;
    }
    d
}

/// Inpainter and depth estimator that answer with renders of the reference
/// field from the requested camera.
pub struct GroundTruth(pub GaussianField);

impl Inpainter for GroundTruth {
    fn fill(&self, _: &InpaintJob, view: &ViewContext) -> Result<RgbImage> {
        Ok(ground_truth(&self.0, view).color)
    }
}

impl DepthEstimator for GroundTruth {
    fn estimate(&self, _: &RgbImage, view: &ViewContext) -> Result<DepthMap> {
        Ok(gt_depth(&ground_truth(&self.0, view)))
    }
}

pub struct Caption;
impl Captioner for Caption {
    fn caption(&self, _: &RgbImage) -> Result<String> {
        StaticCaption("synthetic".into()).caption(&RgbImage::new(1, 1))
    }
}

pub fn ground_truth_services(field: &GaussianField) -> Services {
    Services {
        inpainter: Box::new(GroundTruth(field.clone())),
        depth: Box::new(GroundTruth(field.clone())),
        captioner: Box::new(Caption),
    }
}

//! Camera transform, EWA projection and front-to-back alpha compositing of a
//! Gaussian field.

mod backward;

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{CameraPose, Intrinsics, Trajectory};
use crate::error::{Error, Result};
use crate::gaussian_field::{GaussianField, GaussianPrimitive};
use crate::raster::{frame_name, Plane, Rgb, RgbImage};
use crate::rgbd_warp::Z_NEAR;

pub use backward::{render_backward, PrimitiveGrad};

/// Added to every projected covariance (pixel²).
pub const DILATION: f64 = 0.3;
pub const MAX_CONTRIBUTION: f64 = 0.99;
pub const MIN_CONTRIBUTION: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance drops below this; the color left
/// behind is bounded by it.
pub const MIN_TRANSMITTANCE: f64 = 1e-5;
pub const TILE: usize = 4;
/// Keeps culling strictly inside the region where `α·G < 1/255`.
const CULL_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2DGaussian {
    /// Position of the source primitive in the field.
    pub index: usize,
    pub mean: Vector2<f64>,
    /// Includes the dilation term.
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Rgb,
    pub alpha: f64,
    /// Squared Mahalanobis radius beyond which `alpha·G` is below the skip
    /// threshold.
    pub cutoff2: f64,
}

impl Projected2DGaussian {
    /// `G2D(x)` at pixel `(u, v)` together with the offset from the mean.
    #[inline]
    pub fn eval(&self, u: f64, v: f64) -> (f64, Vector2<f64>) {
        let d = Vector2::new(u - self.mean.x, v - self.mean.y);
        let q = &self.conic;
        let power = 0.5 * (q[(0, 0)] * d.x * d.x + 2.0 * q[(0, 1)] * d.x * d.y + q[(1, 1)] * d.y * d.y);
        ((-power).exp(), d)
    }

    /// [`Self::eval`], or `None` when the pixel lies beyond the footprint
    /// cutoff and would be skipped anyway.
    #[inline]
    pub(crate) fn eval_within(&self, u: f64, v: f64) -> Option<(f64, Vector2<f64>)> {
        let d = Vector2::new(u - self.mean.x, v - self.mean.y);
        let q = &self.conic;
        let power = 0.5 * (q[(0, 0)] * d.x * d.x + 2.0 * q[(0, 1)] * d.x * d.y + q[(1, 1)] * d.y * d.y);
        (power <= 0.5 * self.cutoff2 + CULL_MARGIN).then(|| ((-power).exp(), d))
    }

    /// Inclusive pixel bounds of the cutoff ellipse, clipped to the image.
    fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let r = self.cutoff2.sqrt();
        let ex = r * self.cov2d[(0, 0)].sqrt() + 1e-6;
        let ey = r * self.cov2d[(1, 1)].sqrt() + 1e-6;
        let u0 = (self.mean.x - ex).ceil().max(0.0);
        let u1 = (self.mean.x + ex).floor().min(width as f64 - 1.0);
        let v0 = (self.mean.y - ey).ceil().max(0.0);
        let v1 = (self.mean.y + ey).floor().min(height as f64 - 1.0);
        if u0 > u1 || v0 > v1 {
            return None;
        }
        Some((u0 as usize, u1 as usize, v0 as usize, v1 as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub alpha: Plane,
    /// Alpha-normalized expected depth; 0 where nothing was composited.
    pub depth: Plane,
}

impl RenderOutput {
    fn empty(width: usize, height: usize) -> Self {
        Self {
            color: RgbImage::new(width, height),
            alpha: Plane::new(width, height),
            depth: Plane::new(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// `(R·o + t, R·Σ·Rᵀ)`
pub fn transform_to_camera(prim: &GaussianPrimitive, pose: &CameraPose) -> (Vector3<f64>, Matrix3<f64>) {
    let r = pose.rotation_matrix();
    (r * prim.center + pose.translation, r * prim.covariance() * r.transpose())
}

/// Jacobian of the pinhole projection at a camera-space point.
pub fn projection_jacobian(p: &Vector3<f64>, intr: &Intrinsics) -> Matrix2x3<f64> {
    let z = p.z;
    Matrix2x3::new(
        intr.fx / z,
        0.0,
        -intr.fx * p.x / (z * z),
        0.0,
        intr.fy / z,
        -intr.fy * p.y / (z * z),
    )
}

/// Pixel mean and dilated 2D covariance.
pub fn project_ewa(
    center: &Vector3<f64>,
    cov: &Matrix3<f64>,
    intr: &Intrinsics,
) -> Result<(Vector2<f64>, Matrix2<f64>)> {
    if center.z <= Z_NEAR {
        return Err(Error::BehindCamera { z: center.z });
    }
    let j = projection_jacobian(center, intr);
    let cov2d = j * cov * j.transpose() + Matrix2::identity() * DILATION;
    let (u, v) = intr.project(center);
    Ok((Vector2::new(u, v), cov2d))
}

fn project_primitive(
    index: usize,
    prim: &GaussianPrimitive,
    pose: &CameraPose,
    intr: &Intrinsics,
) -> Option<Projected2DGaussian> {
    let (center, cov) = transform_to_camera(prim, pose);
    let (mean, cov2d) = project_ewa(&center, &cov, intr).ok()?;
    let alpha = prim.opacity();
    let conic = cov2d.try_inverse()?;
    if !mean.iter().all(|x| x.is_finite()) || !conic.iter().all(|x| x.is_finite()) {
        return None;
    }
    let cutoff2 = if alpha * MAX_CONTRIBUTION >= MIN_CONTRIBUTION {
        2.0 * (alpha / MIN_CONTRIBUTION).ln().max(0.0)
    } else {
        0.0
    };
    Some(Projected2DGaussian {
        index,
        mean,
        cov2d,
        conic,
        depth: center.z,
        color: prim.color,
        alpha,
        cutoff2,
    })
}

/// Projects every primitive in front of the camera and sorts front to back
/// by camera z, ties broken by field index.
pub fn project_field(field: &GaussianField, pose: &CameraPose, intr: &Intrinsics) -> Vec<Projected2DGaussian> {
    let mut out: Vec<Projected2DGaussian> = field
        .primitives
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| project_primitive(i, p, pose, intr))
        .collect();
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

/// Per-pixel blend of `a = min(0.99, α·G)`; contributions under 1/255 are
/// skipped.
#[inline]
pub(crate) fn contribution(g: &Projected2DGaussian, gauss: f64) -> Option<f64> {
    let a = (g.alpha * gauss).min(MAX_CONTRIBUTION);
    (a >= MIN_CONTRIBUTION).then_some(a)
}

#[derive(Default, Clone, Copy)]
struct PixelAccum {
    color: Rgb,
    depth: f64,
    transmittance: f64,
}

#[inline]
fn composite<'a>(
    u: f64,
    v: f64,
    gaussians: impl Iterator<Item = &'a Projected2DGaussian>,
    tiled: bool,
) -> PixelAccum {
    let mut acc = PixelAccum {
        transmittance: 1.0,
        ..Default::default()
    };
    for g in gaussians {
        let gauss = if tiled {
            match g.eval_within(u, v) {
                Some((gauss, _)) => gauss,
                None => continue,
            }
        } else {
            g.eval(u, v).0
        };
        let Some(a) = contribution(g, gauss) else { continue };
        let w = a * acc.transmittance;
        for c in 0..3 {
            acc.color[c] += g.color[c] * w;
        }
        acc.depth += g.depth * w;
        acc.transmittance *= 1.0 - a;
        if tiled && acc.transmittance < MIN_TRANSMITTANCE {
            break;
        }
    }
    acc
}

fn assemble(width: usize, height: usize, pixels: Vec<PixelAccum>) -> RenderOutput {
    let mut out = RenderOutput::empty(width, height);
    for (i, p) in pixels.into_iter().enumerate() {
        let alpha = 1.0 - p.transmittance;
        out.color.data[i] = p.color.map(|c| c.clamp(0.0, 1.0));
        out.alpha.data[i] = alpha.clamp(0.0, 1.0);
        out.depth.data[i] = if alpha > 0.0 { p.depth / alpha } else { 0.0 };
    }
    out
}

/// Per-tile lists of indices into `projected`, each list in sorted order.
pub(crate) struct TileBins {
    pub tiles_x: usize,
    pub bins: Vec<Vec<u32>>,
}

pub(crate) fn bin_tiles(projected: &[Projected2DGaussian], width: usize, height: usize) -> TileBins {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (i, g) in projected.iter().enumerate() {
        let Some((u0, u1, v0, v1)) = g.pixel_bounds(width, height) else { continue };
        for ty in v0 / TILE..=v1 / TILE {
            for tx in u0 / TILE..=u1 / TILE {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    TileBins { tiles_x, bins }
}

/// Tiled renderer with footprint culling and early termination.
pub fn render(field: &GaussianField, pose: &CameraPose, intr: &Intrinsics) -> RenderOutput {
    let (w, h) = (intr.width, intr.height);
    let projected = project_field(field, pose, intr);
    if projected.is_empty() {
        return RenderOutput::empty(w, h);
    }
    let bins = bin_tiles(&projected, w, h);
    let mut pixels = vec![PixelAccum::default(); w * h];
    pixels.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        let ty = v / TILE;
        for (u, px) in row.iter_mut().enumerate() {
            let bin = &bins.bins[ty * bins.tiles_x + u / TILE];
            *px = composite(u as f64, v as f64, bin.iter().map(|&i| &projected[i as usize]), true);
        }
    });
    assemble(w, h, pixels)
}

/// Every projected primitive at every pixel in sorted order, with no
/// footprint cutoff and no early termination.
pub fn render_brute_force(field: &GaussianField, pose: &CameraPose, intr: &Intrinsics) -> RenderOutput {
    let (w, h) = (intr.width, intr.height);
    let projected = project_field(field, pose, intr);
    let pixels = (0..w * h)
        .map(|i| composite((i % w) as f64, (i / w) as f64, projected.iter(), false))
        .collect();
    assemble(w, h, pixels)
}

pub fn render_video(field: &GaussianField, traj: &Trajectory) -> Vec<RenderOutput> {
    traj.poses
        .par_iter()
        .map(|pose| render(field, pose, &traj.intrinsics))
        .collect()
}

/// Writes `frame_XXXXXX.png` and, when requested, `alpha_XXXXXX.png`.
pub fn write_frames(frames: &[RenderOutput], dir: &Path, with_alpha: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames.par_iter().enumerate().try_for_each(|(i, f)| {
        f.color.save_png(dir.join(frame_name("frame", i)))?;
        if with_alpha {
            f.alpha.save_png(dir.join(frame_name("alpha", i)))?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(w: usize, h: usize) -> Intrinsics {
        Intrinsics::new(w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng, k: usize) -> GaussianField {
        GaussianField::new(
            (0..k)
                .map(|_| GaussianPrimitive {
                    center: Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(2.0..5.0),
                    ),
                    log_scale: Vector3::from_fn(|_, _| rng.random_range(-3.5f64..-1.5)),
                    rotation: [0.0; 4].map(|_| rng.random_range(-1.0..1.0)),
                    opacity_logit: rng.random_range(-3.0..3.0),
                    color: [0.0; 3].map(|_| rng.random_range(0.0..1.0)),
                })
                .collect(),
        )
    }

    #[test]
    fn camera_transform_examples() {
        let p = GaussianPrimitive {
            center: Vector3::new(1.0, 2.0, 3.0),
            log_scale: Vector3::new(1.0f64, 2.0, 3.0).map(|s| s.sqrt().ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color: [0.0; 3],
        };
        let (c, s) = transform_to_camera(&p, &CameraPose::identity());
        assert_eq!(c, p.center);
        assert!((s - p.covariance()).abs().max() < 1e-15);

        let t = CameraPose::new(UnitQuaternion::identity(), Vector3::new(0.5, -1.0, 2.0));
        let (c, s) = transform_to_camera(&p, &t);
        assert_eq!(c, Vector3::new(1.5, 1.0, 5.0));
        assert!((s - p.covariance()).abs().max() < 1e-15);

        let rz = CameraPose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2),
            Vector3::zeros(),
        );
        let (_, s) = transform_to_camera(&p, &rz);
        let want = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 3.0));
        assert!((s - want).abs().max() < 1e-12, "{s}");
    }

    #[test]
    fn on_axis_projection_closed_form() {
        let k = intr(64, 48);
        let sigma: f64 = 0.05;
        let z = 2.5;
        let (mean, cov2d) = project_ewa(
            &Vector3::new(0.0, 0.0, z),
            &(Matrix3::identity() * sigma * sigma),
            &k,
        )
        .unwrap();
        assert_eq!(mean, Vector2::new(k.cx, k.cy));
        let s = (k.fx * sigma / z).powi(2) + DILATION;
        assert!((cov2d - Matrix2::identity() * s).abs().max() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let k = intr(8, 8);
        for z in [Z_NEAR, 0.0, -1.0] {
            assert!(matches!(
                project_ewa(&Vector3::new(0.0, 0.0, z), &Matrix3::identity(), &k),
                Err(Error::BehindCamera { .. })
            ));
        }
        let field = GaussianField::new(vec![GaussianPrimitive::isotropic(
            Vector3::new(0.0, 0.0, -1.0),
            0.1,
            0.9,
            [1.0; 3],
        )]);
        assert!(render(&field, &CameraPose::identity(), &k).alpha.data.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Intrinsics::new(70.0, 55.0, 31.0, 29.0, 64, 64).unwrap();
        for _ in 0..50 {
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..4.0));
            let j = projection_jacobian(&p, &k);
            let h = 1e-6;
            for axis in 0..3 {
                let mut lo = p;
                let mut hi = p;
                lo[axis] -= h;
                hi[axis] += h;
                let (a, b) = (k.project(&hi), k.project(&lo));
                let num = Vector2::new(a.0 - b.0, a.1 - b.1) / (2.0 * h);
                for row in 0..2 {
                    assert!((j[(row, axis)] - num[row]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn single_opaque_gaussian_at_its_mean() {
        let k = Intrinsics::new(9.0, 9.0, 4.0, 4.0, 9, 9).unwrap();
        let mut g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.2, 0.5, [0.2, 0.4, 0.6]);
        g.opacity_logit = 50.0;
        let out = render(&GaussianField::new(vec![g]), &CameraPose::identity(), &k);
        let c = out.color.get(4, 4).map(|x| x / MAX_CONTRIBUTION);
        for (a, b) in c.iter().zip(g.color) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.depth.get(4, 4) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_field_renders_zeros() {
        let k = intr(7, 5);
        for out in [
            render(&GaussianField::default(), &CameraPose::identity(), &k),
            render_brute_force(&GaussianField::default(), &CameraPose::identity(), &k),
        ] {
            assert!(out.color.data.iter().all(|c| *c == [0.0; 3]));
            assert!(out.alpha.data.iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn two_gaussian_overlap_matches_closed_form() {
        let k = intr(16, 16);
        let near = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.1, 0.6, [1.0, 0.0, 0.0]);
        let far = GaussianPrimitive::isotropic(Vector3::new(0.05, 0.0, 3.0), 0.2, 0.7, [0.0, 0.0, 1.0]);
        let field = GaussianField::new(vec![far, near]);
        let out = render(&field, &CameraPose::identity(), &k);
        let pose = CameraPose::identity();
        let g = |p: &GaussianPrimitive, u: f64, v: f64| {
            let (c, s) = transform_to_camera(p, &pose);
            let (m, cov) = project_ewa(&c, &s, &k).unwrap();
            let d = Vector2::new(u, v) - m;
            p.opacity() * (-0.5 * (d.transpose() * cov.try_inverse().unwrap() * d)[0]).exp()
        };
        for (u, v) in [(8usize, 8usize), (9, 8), (10, 7)] {
            let (a1, a2) = (g(&near, u as f64, v as f64), g(&far, u as f64, v as f64));
            let want = [a1, 0.0, a2 * (1.0 - a1)];
            let got = out.color.get(u, v);
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() < 1e-12, "{u},{v}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn matches_brute_force_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = intr(64, 64);
        for _ in 0..5 {
            let field = random_field(&mut rng, 200);
            let fast = render(&field, &CameraPose::identity(), &k);
            let slow = render_brute_force(&field, &CameraPose::identity(), &k);
            for (a, b) in fast.color.data.iter().zip(&slow.color.data) {
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn single_gaussian_equals_brute_force() {
        let k = intr(32, 32);
        let field = GaussianField::new(vec![GaussianPrimitive {
            center: Vector3::new(0.1, -0.2, 2.0),
            log_scale: Vector3::new(-2.0, -1.5, -2.5),
            rotation: [0.9, 0.1, -0.3, 0.2],
            opacity_logit: 1.0,
            color: [0.3, 0.6, 0.9],
        }]);
        let a = render(&field, &CameraPose::identity(), &k);
        let b = render_brute_force(&field, &CameraPose::identity(), &k);
        for (x, y) in a.color.data.iter().zip(&b.color.data) {
            for c in 0..3 {
                assert!((x[c] - y[c]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn blend_weights_and_colors_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = intr(32, 32);
        let field = random_field(&mut rng, 150);
        let cmax = field.primitives.iter().fold([0.0f64; 3], |m, p| {
            [m[0].max(p.color[0]), m[1].max(p.color[1]), m[2].max(p.color[2])]
        });
        let out = render_brute_force(&field, &CameraPose::identity(), &k);
        for (c, a) in out.color.data.iter().zip(&out.alpha.data) {
            assert!((0.0..=1.0).contains(a));
            for ch in 0..3 {
                assert!(c[ch] >= 0.0 && c[ch] <= cmax[ch] + 1e-12);
            }
        }
    }

    #[test]
    fn permutation_invariant_with_distinct_depths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = intr(32, 32);
        let field = random_field(&mut rng, 60);
        let mut shuffled = field.clone();
        shuffled.primitives.reverse();
        shuffled.primitives.swap(3, 40);
        let a = render(&field, &CameraPose::identity(), &k);
        let b = render(&shuffled, &CameraPose::identity(), &k);
        for (x, y) in a.color.data.iter().zip(&b.color.data) {
            for c in 0..3 {
                assert!((x[c] - y[c]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn video_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = intr(16, 16);
        let field = random_field(&mut rng, 20);
        let single = Trajectory::single(CameraPose::identity(), k);
        let frames = render_video(&field, &single);
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0], render(&field, &CameraPose::identity(), &k));
        let constant = Trajectory {
            poses: vec![CameraPose::identity(); 4],
            intrinsics: k,
        };
        let frames = render_video(&field, &constant);
        assert!(frames.windows(2).all(|w| w[0] == w[1]));

        let dir = tempfile::tempdir().unwrap();
        write_frames(&frames, dir.path(), true).unwrap();
        assert!(dir.path().join("frame_000003.png").exists());
        assert!(dir.path().join("alpha_000000.png").exists());
    }
}

//! Reverse-mode gradients of the tiled renderer's color output.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{bin_tiles, contribution, project_field, projection_jacobian, MIN_TRANSMITTANCE, TILE};
use crate::camera::{CameraPose, Intrinsics};
use crate::gaussian_field::{GaussianField, GaussianPrimitive};
use crate::raster::Rgb;

/// Gradient with respect to each field parameter of one primitive.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrimitiveGrad {
    pub center: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Rgb,
}

impl PrimitiveGrad {
    pub fn add(&mut self, other: &PrimitiveGrad) {
        self.center += other.center;
        self.log_scale += other.log_scale;
        for i in 0..4 {
            self.rotation[i] += other.rotation[i];
        }
        self.opacity_logit += other.opacity_logit;
        for c in 0..3 {
            self.color[c] += other.color[c];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().chain(self.log_scale.iter()).all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// Pixel rows per partial accumulator; partials are summed in band order so
/// the result does not depend on the thread count.
const BAND_ROWS: usize = 32;

/// Image-space gradient of one projected Gaussian.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean: Vector2<f64>,
    /// Per-entry gradient of the conic, `(q00, q01 = q10, q11)`.
    conic: [f64; 3],
    alpha: f64,
    color: Rgb,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean += o.mean;
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.alpha += o.alpha;
    }
}

struct Hit {
    slot: usize,
    a: f64,
    gauss: f64,
    clamped: bool,
    transmittance: f64,
    d: Vector2<f64>,
}

/// Given `d_color[i] = ∂L/∂color[i]` for the image returned by
/// [`super::render`], returns `∂L/∂θ` for every primitive of `field`.
pub fn render_backward(
    field: &GaussianField,
    pose: &CameraPose,
    intr: &Intrinsics,
    d_color: &[Rgb],
) -> Vec<PrimitiveGrad> {
    let (w, h) = (intr.width, intr.height);
    assert_eq!(d_color.len(), w * h, "upstream gradient must match the image size");
    let mut grads = vec![PrimitiveGrad::default(); field.len()];
    let projected = project_field(field, pose, intr);
    if projected.is_empty() {
        return grads;
    }
    let bins = bin_tiles(&projected, w, h);
    let bands = h.div_ceil(BAND_ROWS);

    let partials: Vec<Vec<ScreenGrad>> = (0..bands)
        .into_par_iter()
        .map(|band| {
            let mut acc = vec![ScreenGrad::default(); projected.len()];
            let mut hits = Vec::new();
            for v in band * BAND_ROWS..((band + 1) * BAND_ROWS).min(h) {
                let ty = v / TILE;
                for u in 0..w {
                    let up = d_color[v * w + u];
                    if up == [0.0; 3] {
                        continue;
                    }
                    let (uf, vf) = (u as f64, v as f64);
                    hits.clear();
                    let mut t = 1.0;
                    for &slot in &bins.bins[ty * bins.tiles_x + u / TILE] {
                        let g = &projected[slot as usize];
                        let Some((gauss, d)) = g.eval_within(uf, vf) else { continue };
                        let Some(a) = contribution(g, gauss) else { continue };
                        hits.push(Hit {
                            slot: slot as usize,
                            a,
                            gauss,
                            clamped: g.alpha * gauss > a,
                            transmittance: t,
                            d,
                        });
                        t *= 1.0 - a;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    // Running color composited behind the current hit.
                    let mut behind = [0.0; 3];
                    for hit in hits.iter().rev() {
                        let g = &projected[hit.slot];
                        let sg = &mut acc[hit.slot];
                        let wgt = hit.a * hit.transmittance;
                        let mut d_a = 0.0;
                        for c in 0..3 {
                            sg.color[c] += up[c] * wgt;
                            d_a += up[c] * (g.color[c] * hit.transmittance - behind[c] / (1.0 - hit.a));
                            behind[c] += g.color[c] * wgt;
                        }
                        if hit.clamped {
                            continue;
                        }
                        sg.alpha += d_a * hit.gauss;
                        let d_power = -d_a * g.alpha * hit.gauss;
                        let qd = g.conic * hit.d;
                        sg.mean -= qd * d_power;
                        let half = 0.5 * d_power;
                        sg.conic[0] += half * hit.d.x * hit.d.x;
                        sg.conic[1] += half * hit.d.x * hit.d.y;
                        sg.conic[2] += half * hit.d.y * hit.d.y;
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); projected.len()];
    for part in &partials {
        for (s, p) in screen.iter_mut().zip(part) {
            s.add(p);
        }
    }

    let r_cam = pose.rotation_matrix();
    let chained: Vec<(usize, PrimitiveGrad)> = projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|(g, sg)| (g.index, chain_to_params(&field.primitives[g.index], sg, &r_cam, &pose.translation, intr, &g.conic)))
        .collect();
    for (i, g) in chained {
        grads[i] = g;
    }
    grads
}

fn chain_to_params(
    prim: &GaussianPrimitive,
    sg: &ScreenGrad,
    r_cam: &Matrix3<f64>,
    t_cam: &Vector3<f64>,
    intr: &Intrinsics,
    conic: &Matrix2<f64>,
) -> PrimitiveGrad {
    let p = r_cam * prim.center + t_cam;
    let rot = prim.rotation_matrix();
    let s = prim.scale();
    let m = rot * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    let sigma_cam = r_cam * sigma * r_cam.transpose();
    let j = projection_jacobian(&p, intr);

    let g_conic = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let g_cov2d = -conic * g_conic * conic;
    let g_sigma_cam = j.transpose() * g_cov2d * j;
    let g_j = 2.0 * g_cov2d * j * sigma_cam;

    let mut g_p = j.transpose() * sg.mean;
    let z = p.z;
    let (z2, z3) = (z * z, z * z * z);
    g_p.z += g_j[(0, 0)] * (-intr.fx / z2)
        + g_j[(0, 2)] * (2.0 * intr.fx * p.x / z3)
        + g_j[(1, 1)] * (-intr.fy / z2)
        + g_j[(1, 2)] * (2.0 * intr.fy * p.y / z3);
    g_p.x += g_j[(0, 2)] * (-intr.fx / z2);
    g_p.y += g_j[(1, 2)] * (-intr.fy / z2);

    let g_sigma = r_cam.transpose() * g_sigma_cam * r_cam;
    let g_m = 2.0 * g_sigma * m;
    let mut g_rot = Matrix3::zeros();
    let mut g_log_scale = Vector3::zeros();
    for col in 0..3 {
        let mut ds = 0.0;
        for row in 0..3 {
            g_rot[(row, col)] = g_m[(row, col)] * s[col];
            ds += g_m[(row, col)] * rot[(row, col)];
        }
        g_log_scale[col] = ds * s[col];
    }

    let alpha = prim.opacity();
    PrimitiveGrad {
        center: r_cam.transpose() * g_p,
        log_scale: g_log_scale,
        rotation: quat_grad(&prim.rotation, &g_rot),
        opacity_logit: sg.alpha * alpha * (1.0 - alpha),
        color: sg.color,
    }
}

/// Pulls `∂L/∂R` back through `R(q / |q|)` to the raw quaternion.
fn quat_grad(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gn = [gw, gx, gy, gz];
    let dot = gn[0] * w + gn[1] * x + gn[2] * y + gn[3] * z;
    let qn = [w, x, y, z];
    [0, 1, 2, 3].map(|i| (gn[i] - qn[i] * dot) / n)
}

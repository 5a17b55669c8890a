//! Photometric fitting of a field to posed RGB views.

use log::debug;
use serde::{Deserialize, Serialize};

use super::GaussianField;
use crate::error::{Error, Result};
use crate::metrics::{ssim_with_grad, SsimWindow};
use crate::raster::Rgb;
use crate::rgbd_warp::RgbdImage;
use crate::splat_render::{render, render_backward, PrimitiveGrad};

pub const L1_WEIGHT: f64 = 0.8;
pub const SSIM_WEIGHT: f64 = 0.2;

/// Step sizes per parameter group. The center rate is relative to the
/// field's extent at the start of optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub center: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center: 1.6e-4,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn color_only(color: f64) -> Self {
        Self {
            center: 0.0,
            color,
            opacity: 0.0,
            scale: 0.0,
            rotation: 0.0,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            center: self.center * k,
            color: self.color * k,
            opacity: self.opacity * k,
            scale: self.scale * k,
            rotation: self.rotation * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub iters: usize,
    pub lr: LearningRates,
    pub gradient: GradientScale,
}

/// What the learning rates multiply. The reported loss is always the
/// per-pixel mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScale {
    /// Gradient of the per-pixel mean loss.
    Mean,
    /// Gradient of the loss summed over the pixels of one view.
    #[default]
    PixelSum,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: LearningRates::default(),
            gradient: GradientScale::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Loss of the returned field.
    pub final_loss: f64,
}

/// Mean over views of `0.8·L1 + 0.2·(1 − SSIM)` with its gradient.
pub fn photometric_loss(field: &GaussianField, views: &[RgbdImage]) -> Result<(f64, Vec<PrimitiveGrad>)> {
    if views.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    let mut total = 0.0;
    let mut grads = vec![PrimitiveGrad::default(); field.len()];
    let inv_views = 1.0 / views.len() as f64;
    for view in views {
        let out = render(field, &view.pose, &view.intrinsics);
        let target = &view.color;
        let n = (target.len() * 3) as f64;
        let win = SsimWindow::fitting(target.width.min(target.height));
        let (s, ds) = ssim_with_grad(&out.color, target, &win)?;
        let mut l1 = 0.0;
        let d_color: Vec<Rgb> = out
            .color
            .data
            .iter()
            .zip(&target.data)
            .zip(&ds)
            .map(|((c, t), g)| {
                let mut d = [0.0; 3];
                for k in 0..3 {
                    let diff = c[k] - t[k];
                    l1 += diff.abs();
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    d[k] = inv_views * (L1_WEIGHT * sign / n - SSIM_WEIGHT * g[k]);
                }
                d
            })
            .collect();
        total += inv_views * (L1_WEIGHT * l1 / n + SSIM_WEIGHT * (1.0 - s));
        for (acc, g) in grads
            .iter_mut()
            .zip(render_backward(field, &view.pose, &view.intrinsics, &d_color))
        {
            acc.add(&g);
        }
    }
    Ok((total, grads))
}

fn step(field: &mut GaussianField, grads: &[PrimitiveGrad], lr: &LearningRates, center_lr: f64) {
    for (p, g) in field.primitives.iter_mut().zip(grads) {
        p.center -= g.center * center_lr;
        p.log_scale -= g.log_scale * lr.scale;
        p.opacity_logit -= g.opacity_logit * lr.opacity;
        for c in 0..3 {
            p.color[c] = (p.color[c] - g.color[c] * lr.color).clamp(0.0, 1.0);
        }
        let mut n = 0.0;
        for i in 0..4 {
            p.rotation[i] -= g.rotation[i] * lr.rotation;
            n += p.rotation[i] * p.rotation[i];
        }
        let n = n.sqrt();
        if n > 0.0 {
            p.rotation.iter_mut().for_each(|q| *q /= n);
        }
    }
}

/// Plain gradient descent for `config.iters` steps.
pub fn optimize(
    field: &GaussianField,
    views: &[RgbdImage],
    config: &OptimizeConfig,
) -> Result<(GaussianField, OptimizeReport)> {
    if field.is_empty() {
        return Err(Error::EmptyField);
    }
    let mut field = field.clone();
    let k = match config.gradient {
        GradientScale::Mean => 1.0,
        GradientScale::PixelSum => views.iter().map(|v| v.color.len() as f64).sum::<f64>() / views.len().max(1) as f64,
    };
    let lr = config.lr.scaled(k);
    let center_lr = lr.center * field.extent();
    let mut losses = Vec::with_capacity(config.iters);
    for iteration in 0..config.iters {
        let (loss, grads) = photometric_loss(&field, views)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, value: loss });
        }
        debug!("iteration {iteration}: loss {loss:.6}");
        losses.push(loss);
        step(&mut field, &grads, &lr, center_lr);
    }
    let (final_loss, _) = photometric_loss(&field, views)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: config.iters,
            value: final_loss,
        });
    }
    Ok((field, OptimizeReport { losses, final_loss }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraPose, Intrinsics};
    use crate::gaussian_field::GaussianPrimitive;
    use crate::raster::RgbImage;
    use crate::rgbd_warp::DepthMap;
    use nalgebra::Vector3;

    fn view(w: usize, color: impl Fn(usize, usize) -> Rgb) -> RgbdImage {
        let intr = Intrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0, w, w).unwrap();
        RgbdImage::new(
            RgbImage::from_fn(w, w, color),
            DepthMap::constant(w, w, 2.0),
            CameraPose::identity(),
            intr,
        )
        .unwrap()
    }

    fn blob(color: Rgb) -> GaussianPrimitive {
        GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.6, 0.8, color)
    }

    #[test]
    fn zero_iterations_is_identity() {
        let field = GaussianField::new(vec![blob([0.5; 3])]);
        let (out, report) = optimize(
            &field,
            &[view(8, |_, _| [0.2; 3])],
            &OptimizeConfig {
                iters: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out, field);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn color_only_loss_strictly_decreases() {
        let field = GaussianField::new(vec![blob([0.1, 0.5, 0.9])]);
        let views = [view(8, |u, v| [0.6, 0.3 + 0.02 * u as f64, 0.2 + 0.01 * v as f64])];
        let config = OptimizeConfig {
            iters: 50,
            lr: LearningRates::color_only(2.5e-3),
            gradient: GradientScale::Mean,
        };
        let (_, report) = optimize(&field, &views, &config).unwrap();
        let mut seq = report.losses.clone();
        seq.push(report.final_loss);
        for w in seq.windows(2) {
            assert!(w[1] < w[0], "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn non_finite_parameters_abort() {
        let mut bad = blob([0.5; 3]);
        bad.log_scale = Vector3::repeat(f64::NAN);
        let field = GaussianField::new(vec![blob([0.5; 3]), bad]);
        let mut good = blob([0.5; 3]);
        good.color = [f64::NAN, 0.0, 0.0];
        let nan_color = GaussianField::new(vec![good]);
        let r = optimize(&nan_color, &[view(8, |_, _| [0.2; 3])], &OptimizeConfig::default());
        assert!(matches!(r, Err(Error::NonFiniteLoss { iteration: 0, .. })), "{r:?}");
        // A primitive with NaN geometry projects to nothing and is ignored.
        assert!(optimize(&field, &[view(8, |_, _| [0.2; 3])], &OptimizeConfig { iters: 1, ..Default::default() }).is_ok());
    }

    #[test]
    fn deterministic() {
        let field = GaussianField::new(vec![blob([0.1, 0.5, 0.9]), GaussianPrimitive::isotropic(Vector3::new(0.3, 0.1, 2.5), 0.4, 0.5, [0.9, 0.1, 0.3])]);
        let views = [view(12, |u, v| [(u as f64 / 12.0), 0.4, (v as f64 / 12.0)])];
        let config = OptimizeConfig {
            iters: 5,
            ..Default::default()
        };
        let a = optimize(&field, &views, &config).unwrap();
        let b = optimize(&field, &views, &config).unwrap();
        assert_eq!(a, b);
    }
}

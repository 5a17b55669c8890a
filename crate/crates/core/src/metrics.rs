//! PSNR, SSIM and L1 on RGB images in `[0, 1]`.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03, and
//! averages the local index over every fully-contained window position
//! ("valid" filtering), per channel, then over channels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{list_pngs, Plane, Rgb, RgbImage};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;

fn check_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_shape(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.len()).max(1) as f64)
}

/// `10·log10(peak² / MSE)`, capped at 99 dB for identical inputs.
pub fn psnr(a: &RgbImage, b: &RgbImage, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

pub fn l1(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_shape(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.len()).max(1) as f64)
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
#[derive(Debug, Clone)]
pub struct SsimWindow {
    pub taps: Vec<f64>,
}

impl SsimWindow {
    pub fn gaussian(radius: usize, sigma: f64) -> Self {
        let mut taps: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        Self { taps }
    }

    pub fn standard() -> Self {
        Self::gaussian(SSIM_RADIUS, SSIM_SIGMA)
    }

    /// Standard window, shrunk so it fits an image whose smaller side is
    /// `min_dim` pixels.
    pub fn fitting(min_dim: usize) -> Self {
        let radius = SSIM_RADIUS.min(min_dim.saturating_sub(1) / 2);
        Self::gaussian(radius, SSIM_SIGMA)
    }

    pub fn size(&self) -> usize {
        self.taps.len()
    }
}

/// Correlates with the separable window, keeping fully-contained positions.
fn filter_valid(x: &Plane, taps: &[f64]) -> Plane {
    let n = taps.len();
    let (ow, oh) = (x.width + 1 - n, x.height + 1 - n);
    let mut tmp = vec![0.0; ow * x.height];
    for v in 0..x.height {
        let row = &x.data[v * x.width..(v + 1) * x.width];
        for p in 0..ow {
            tmp[v * ow + p] = taps.iter().zip(&row[p..p + n]).map(|(g, x)| g * x).sum();
        }
    }
    let mut out = Plane::new(ow, oh);
    for q in 0..oh {
        for (j, g) in taps.iter().enumerate() {
            let src = &tmp[(q + j) * ow..(q + j + 1) * ow];
            let dst = &mut out.data[q * ow..(q + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += g * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a window-position map back onto
/// the `width × height` pixel grid.
fn filter_adjoint(m: &Plane, taps: &[f64], width: usize, height: usize) -> Plane {
    let n = taps.len();
    let mut tmp = vec![0.0; m.width * height];
    for q in 0..m.height {
        for (j, g) in taps.iter().enumerate() {
            let dst = &mut tmp[(q + j) * m.width..(q + j + 1) * m.width];
            let src = &m.data[q * m.width..(q + 1) * m.width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += g * s;
            }
        }
    }
    let mut out = Plane::new(width, height);
    for v in 0..height {
        let src = &tmp[v * m.width..(v + 1) * m.width];
        let dst = &mut out.data[v * width..(v + 1) * width];
        for (p, s) in src.iter().enumerate() {
            for (i, g) in taps.iter().enumerate() {
                dst[p + i] += g * s;
            }
        }
    }
    debug_assert_eq!(n, taps.len());
    out
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

struct SsimMaps {
    mu_x: Plane,
    mu_y: Plane,
    var_x: Plane,
    var_y: Plane,
    cov: Plane,
}

fn ssim_maps(x: &Plane, y: &Plane, win: &SsimWindow) -> SsimMaps {
    let mu_x = filter_valid(x, &win.taps);
    let mu_y = filter_valid(y, &win.taps);
    let exx = filter_valid(&product(x, x), &win.taps);
    let eyy = filter_valid(&product(y, y), &win.taps);
    let exy = filter_valid(&product(x, y), &win.taps);
    let n = mu_x.data.len();
    let mut var_x = Plane::new(mu_x.width, mu_x.height);
    let mut var_y = var_x.clone();
    let mut cov = var_x.clone();
    for i in 0..n {
        var_x.data[i] = exx.data[i] - mu_x.data[i] * mu_x.data[i];
        var_y.data[i] = eyy.data[i] - mu_y.data[i] * mu_y.data[i];
        cov.data[i] = exy.data[i] - mu_x.data[i] * mu_y.data[i];
    }
    SsimMaps {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
    }
}

const C1: f64 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
const C2: f64 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

/// Mean SSIM of one channel, and optionally its gradient with respect to `x`.
pub fn ssim_plane(x: &Plane, y: &Plane, win: &SsimWindow, want_grad: bool) -> (f64, Option<Plane>) {
    let maps = ssim_maps(x, y, win);
    let n = maps.mu_x.data.len();
    let nf = n as f64;
    let mut total = 0.0;
    let mut d_mu = Plane::new(maps.mu_x.width, maps.mu_x.height);
    let mut d_var = d_mu.clone();
    let mut d_cov = d_mu.clone();
    for i in 0..n {
        let (mx, my) = (maps.mu_x.data[i], maps.mu_y.data[i]);
        let (vx, vy, cxy) = (maps.var_x.data[i], maps.var_y.data[i], maps.cov.data[i]);
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * cxy + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = vx + vy + C2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if want_grad {
            let ds_dmu = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            let ds_dvar = -s / b2;
            let ds_dcov = 2.0 * a1 / (b1 * b2);
            // dS/dx_q = w·[ds_dmu + 2·ds_dvar·(x_q − μx) + ds_dcov·(y_q − μy)]
            d_mu.data[i] = (ds_dmu - 2.0 * ds_dvar * mx - ds_dcov * my) / nf;
            d_var.data[i] = 2.0 * ds_dvar / nf;
            d_cov.data[i] = ds_dcov / nf;
        }
    }
    let mean = total / nf;
    if !want_grad {
        return (mean, None);
    }
    let ga = filter_adjoint(&d_mu, &win.taps, x.width, x.height);
    let gb = filter_adjoint(&d_var, &win.taps, x.width, x.height);
    let gc = filter_adjoint(&d_cov, &win.taps, x.width, x.height);
    let mut grad = Plane::new(x.width, x.height);
    for q in 0..grad.data.len() {
        grad.data[q] = ga.data[q] + x.data[q] * gb.data[q] + y.data[q] * gc.data[q];
    }
    (mean, Some(grad))
}

fn ssim_rgb(a: &RgbImage, b: &RgbImage, win: &SsimWindow, want_grad: bool) -> (f64, Option<Vec<Rgb>>) {
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; a.len()]);
    for c in 0..3 {
        let (s, g) = ssim_plane(&a.channel(c), &b.channel(c), win, want_grad);
        total += s;
        if let (Some(out), Some(g)) = (grad.as_mut(), g) {
            for (o, v) in out.iter_mut().zip(g.data) {
                o[c] = v / 3.0;
            }
        }
    }
    (total / 3.0, grad)
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_shape(a, b)?;
    let win = SsimWindow::standard();
    if a.width < win.size() || a.height < win.size() {
        return Err(Error::TooSmall(format!(
            "SSIM needs at least {0}x{0} pixels, got {1}x{2}",
            win.size(),
            a.width,
            a.height
        )));
    }
    Ok(ssim_rgb(a, b, &win, false).0)
}

/// SSIM with a caller-chosen window and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &RgbImage, b: &RgbImage, win: &SsimWindow) -> Result<(f64, Vec<Rgb>)> {
    check_shape(a, b)?;
    if a.width < win.size() || a.height < win.size() {
        return Err(Error::TooSmall(format!(
            "window of {} does not fit {}x{}",
            win.size(),
            a.width,
            a.height
        )));
    }
    let (s, g) = ssim_rgb(a, b, win, true);
    Ok((s, g.expect("gradient requested")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub aggregate: FrameMetrics,
}

pub fn frame_metrics(reference: &RgbImage, test: &RgbImage) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        psnr: psnr(reference, test, 1.0)?,
        ssim: ssim(reference, test)?,
        l1: l1(reference, test)?,
    })
}

pub fn report(pairs: &[(RgbImage, RgbImage)]) -> Result<MetricReport> {
    use rayon::prelude::*;
    let per_frame = pairs
        .par_iter()
        .map(|(r, t)| frame_metrics(r, t))
        .collect::<Result<Vec<_>>>()?;
    let n = per_frame.len().max(1) as f64;
    let aggregate = FrameMetrics {
        psnr: per_frame.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per_frame.iter().map(|m| m.ssim).sum::<f64>() / n,
        l1: per_frame.iter().map(|m| m.l1).sum::<f64>() / n,
    };
    Ok(MetricReport { per_frame, aggregate })
}

/// Pairs PNG frames of two directories by sorted order and scores them.
pub fn compare_dirs(reference: &Path, test: &Path) -> Result<MetricReport> {
    let refs = list_pngs(reference)?;
    let tests = list_pngs(test)?;
    if refs.len() != tests.len() || refs.is_empty() {
        return Err(Error::shape(format!(
            "{} reference frames vs {} test frames",
            refs.len(),
            tests.len()
        )));
    }
    let pairs = refs
        .iter()
        .zip(&tests)
        .map(|(r, t)| Ok((RgbImage::load_png(r)?, RgbImage::load_png(t)?)))
        .collect::<Result<Vec<_>>>()?;
    report(&pairs)
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    /// Direct windowed SSIM: explicit 2D weights, explicit double loop.
    pub fn naive_ssim_plane(x: &Plane, y: &Plane, radius: usize, sigma: f64) -> f64 {
        let n = 2 * radius + 1;
        let mut w = vec![vec![0.0; n]; n];
        let mut total = 0.0;
        for (j, row) in w.iter_mut().enumerate() {
            for (i, cell) in row.iter_mut().enumerate() {
                let dx = i as f64 - radius as f64;
                let dy = j as f64 - radius as f64;
                *cell = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                total += *cell;
            }
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for q in 0..=(x.height - n) {
            for p in 0..=(x.width - n) {
                let (mut mx, mut my) = (0.0, 0.0);
                for j in 0..n {
                    for i in 0..n {
                        mx += w[j][i] / total * x.get(p + i, q + j);
                        my += w[j][i] / total * y.get(p + i, q + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for j in 0..n {
                    for i in 0..n {
                        let dx = x.get(p + i, q + j) - mx;
                        let dy = y.get(p + i, q + j) - my;
                        vx += w[j][i] / total * dx * dx;
                        vy += w[j][i] / total * dy * dy;
                        cxy += w[j][i] / total * dx * dy;
                    }
                }
                let c1 = (SSIM_K1 * 1.0f64).powi(2);
                let c2 = (SSIM_K2 * 1.0f64).powi(2);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    pub fn naive_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
        (0..3)
            .map(|c| naive_ssim_plane(&a.channel(c), &b.channel(c), SSIM_RADIUS, SSIM_SIGMA))
            .sum::<f64>()
            / 3.0
    }

    /// Two fixed 16×16 patterns used by the SSIM equivalence checks.
    pub fn fixtures() -> (RgbImage, RgbImage) {
        let a = RgbImage::from_fn(16, 16, |u, v| {
            let (x, y) = (u as f64, v as f64);
            [
                0.5 + 0.4 * (0.7 * x).sin() * (0.3 * y).cos(),
                ((u * 7 + v * 3) % 16) as f64 / 15.0,
                if (u / 4 + v / 4) % 2 == 0 { 0.9 } else { 0.1 },
            ]
        });
        let b = RgbImage::from_fn(16, 16, |u, v| {
            let c = a.get(u, v);
            let (x, y) = (u as f64, v as f64);
            [
                (c[0] * 0.8 + 0.1 * (x * y * 0.05).sin()).clamp(0.0, 1.0),
                (c[1] + 0.05 * ((u + 2 * v) % 3) as f64).min(1.0),
                c[2] * 0.6 + 0.2,
            ]
        });
        (a, b)
    }
}

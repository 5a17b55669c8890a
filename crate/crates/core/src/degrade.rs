//! Background degradations that mimic coarse splat renders, plus the mask
//! loss weighting, character blackout and reference sampling used to build
//! training data.

use std::ops::Range;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose_mask::BBox;
use crate::raster::{Mask, Plane, Rgb, RgbImage};

/// Inclusive `[min, max]` ranges sampled once per clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeParams {
    pub block_count: [usize; 2],
    /// Side lengths in pixels, drawn independently for width and height.
    pub block_size: [usize; 2],
    pub noise_sigma: [f64; 2],
    pub blur_radius: [usize; 2],
    /// Corner jitter as a fraction of the shorter image side.
    pub perspective: [f64; 2],
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            block_count: [0, 6],
            block_size: [16, 96],
            noise_sigma: [0.0, 0.05],
            blur_radius: [0, 2],
            perspective: [0.0, 0.04],
            seed: 0,
        }
    }
}

impl DegradeParams {
    pub fn identity() -> Self {
        Self {
            block_count: [0, 0],
            block_size: [0, 0],
            noise_sigma: [0.0, 0.0],
            blur_radius: [0, 0],
            perspective: [0.0, 0.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered_f = |r: [f64; 2], name: &str| {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(Error::invalid(format!("{name} range {r:?} must be ordered and non-negative")));
            }
            Ok(())
        };
        let ordered_u = |r: [usize; 2], name: &str| {
            if r[0] > r[1] {
                return Err(Error::invalid(format!("{name} range {r:?} must be ordered")));
            }
            Ok(())
        };
        ordered_u(self.block_count, "block_count")?;
        ordered_u(self.block_size, "block_size")?;
        ordered_u(self.blur_radius, "blur_radius")?;
        ordered_f(self.noise_sigma, "noise_sigma")?;
        ordered_f(self.perspective, "perspective")?;
        if self.perspective[1] >= 0.5 {
            return Err(Error::invalid("perspective jitter must stay below 0.5"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Concrete degradation drawn for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipDegradation {
    /// `(x, y, w, h)` in pixels.
    pub blocks: Vec<(usize, usize, usize, usize)>,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    /// Destination offsets of the corners (top-left, top-right, bottom-right,
    /// bottom-left) in pixels.
    pub corner_offsets: [[f64; 2]; 4],
}

fn draw_u(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn draw_f(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

impl ClipDegradation {
    pub fn sample(params: &DegradeParams, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Self {
        let jitter = draw_f(rng, params.perspective) * width.min(height) as f64;
        let mut corner_offsets = [[0.0; 2]; 4];
        if jitter > 0.0 {
            for c in corner_offsets.iter_mut() {
                *c = [rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter)];
            }
        }
        let count = draw_u(rng, params.block_count);
        let blocks = (0..count)
            .map(|_| {
                let bw = draw_u(rng, params.block_size).min(width);
                let bh = draw_u(rng, params.block_size).min(height);
                let x = rng.random_range(0..=width - bw);
                let y = rng.random_range(0..=height - bh);
                (x, y, bw, bh)
            })
            .collect();
        Self {
            blocks,
            noise_sigma: draw_f(rng, params.noise_sigma),
            blur_radius: draw_u(rng, params.blur_radius),
            corner_offsets,
        }
    }

    /// Applies the fixed pipeline perspective → blocks → blur → noise.
    pub fn apply(&self, frame: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
        let mut out = if self.corner_offsets.iter().flatten().any(|&o| o != 0.0) {
            perspective_warp(frame, &self.corner_offsets)
        } else {
            frame.clone()
        };
        for &(x, y, w, h) in &self.blocks {
            fill_rect(&mut out, x, y, w, h);
        }
        if self.blur_radius > 0 {
            out = box_blur(&out, self.blur_radius);
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            for px in out.data.iter_mut() {
                for c in px.iter_mut() {
                    *c = (*c + normal.sample(rng)).clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

fn fill_rect(img: &mut RgbImage, x: usize, y: usize, w: usize, h: usize) {
    for v in y..(y + h).min(img.height) {
        for u in x..(x + w).min(img.width) {
            img.set(u, v, [0.0; 3]);
        }
    }
}

/// Homography taking `src[i]` to `dst[i]`.
fn homography(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ([x, y], [u, v]) = (src[i], dst[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> Option<Rgb> {
    let (w, h) = (img.width as f64, img.height as f64);
    if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let (a, b, c, d) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
    Some([0, 1, 2].map(|k| (a[k] * (1.0 - tx) + b[k] * tx) * (1.0 - ty) + (c[k] * (1.0 - tx) + d[k] * tx) * ty))
}

/// Moves the image corners by `offsets`; uncovered pixels become black.
pub fn perspective_warp(frame: &RgbImage, offsets: &[[f64; 2]; 4]) -> RgbImage {
    let (w, h) = ((frame.width - 1) as f64, (frame.height - 1) as f64);
    let corners = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    let mut moved = corners;
    for (m, o) in moved.iter_mut().zip(offsets) {
        m[0] += o[0];
        m[1] += o[1];
    }
    // Inverse map: output pixel to source position.
    let Some(inv) = homography(&moved, &corners) else {
        return frame.clone();
    };
    RgbImage::from_fn(frame.width, frame.height, |u, v| {
        let p = inv * Vector3::new(u as f64, v as f64, 1.0);
        if p.z.abs() < 1e-12 {
            return [0.0; 3];
        }
        bilinear(frame, p.x / p.z, p.y / p.z).unwrap_or([0.0; 3])
    })
}

/// Separable box filter of width `2·radius + 1`, edges clamped.
pub fn box_blur(img: &RgbImage, radius: usize) -> RgbImage {
    let pass = |src: &RgbImage, horizontal: bool| {
        let r = radius as isize;
        let norm = 1.0 / (2 * radius + 1) as f64;
        RgbImage::from_fn(src.width, src.height, |u, v| {
            let mut acc = [0.0; 3];
            for k in -r..=r {
                let (uu, vv) = if horizontal {
                    ((u as isize + k).clamp(0, src.width as isize - 1) as usize, v)
                } else {
                    (u, (v as isize + k).clamp(0, src.height as isize - 1) as usize)
                };
                let c = src.get(uu, vv);
                for i in 0..3 {
                    acc[i] += c[i];
                }
            }
            acc.map(|a| a * norm)
        })
    };
    pass(&pass(img, true), false)
}

fn check_clip(frames: &[RgbImage]) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::invalid("clip has no frames"))?;
    if frames.iter().any(|f| !f.same_shape(first)) {
        return Err(Error::shape("frames of one clip differ in size"));
    }
    Ok(())
}

/// One degradation drawn from `params.seed` and applied to every frame.
pub fn degrade_video(frames: &[RgbImage], params: &DegradeParams) -> Result<Vec<RgbImage>> {
    params.validate()?;
    check_clip(frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let draw = ClipDegradation::sample(params, frames[0].width, frames[0].height, &mut rng);
    Ok(frames.iter().map(|f| draw.apply(f, &mut rng)).collect())
}

/// Degrades clips in parallel; clip `i` uses seed `params.seed ^ i`.
pub fn degrade_clips(clips: &[Vec<RgbImage>], params: &DegradeParams) -> Result<Vec<Vec<RgbImage>>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| degrade_video(clip, &params.with_seed(params.seed ^ i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_masked: f64,
    pub w_background: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_masked: 1.0,
            w_background: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !ok(self.w_masked) || !ok(self.w_background) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.w_masked == 0.0 && self.w_background == 0.0 {
            return Err(Error::invalid("loss weights cannot both be zero"));
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, masked: bool) -> f64 {
        if masked {
            self.w_masked
        } else {
            self.w_background
        }
    }
}

/// Compensated sum; keeps finite-difference probes of the loss near one ulp.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean of `loss·w(mask)` over flat, equally long buffers.
pub fn reweight_flat(loss: &[f64], mask: &[bool], w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if loss.len() != mask.len() {
        return Err(Error::shape(format!("{} loss values for {} mask bits", loss.len(), mask.len())));
    }
    if loss.is_empty() {
        return Err(Error::invalid("empty loss"));
    }
    let sum = neumaier_sum(loss.iter().zip(mask).map(|(l, &m)| l * w.weight(m)));
    Ok(sum / loss.len() as f64)
}

pub fn reweight_loss(loss: &[Plane], mask: &[Mask], w: &LossWeights) -> Result<f64> {
    if loss.len() != mask.len() {
        return Err(Error::shape(format!("{} loss frames for {} masks", loss.len(), mask.len())));
    }
    for (l, m) in loss.iter().zip(mask) {
        if l.width != m.width || l.height != m.height {
            return Err(Error::shape(format!(
                "loss frame is {}x{} but mask is {}x{}",
                l.width, l.height, m.width, m.height
            )));
        }
    }
    let flat_loss: Vec<f64> = loss.iter().flat_map(|l| l.data.iter().copied()).collect();
    let flat_mask: Vec<bool> = mask.iter().flat_map(|m| m.bits.iter().copied()).collect();
    reweight_flat(&flat_loss, &flat_mask, w)
}

/// Zeroes each frame inside its box; `None` leaves the frame untouched.
pub fn blackout_character(frames: &[RgbImage], boxes: &[Option<BBox>]) -> Result<Vec<RgbImage>> {
    if frames.len() != boxes.len() {
        return Err(Error::shape(format!("{} frames but {} boxes", frames.len(), boxes.len())));
    }
    Ok(frames
        .iter()
        .zip(boxes)
        .map(|(f, b)| {
            let mut out = f.clone();
            if let Some(b) = b {
                for v in 0..f.height {
                    for u in 0..f.width {
                        if b.contains(u, v) {
                            out.set(u, v, [0.0; 3]);
                        }
                    }
                }
            }
            out
        })
        .collect())
}

/// Blackout is active for the first `fraction` of training steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlackoutSchedule {
    pub fraction: f64,
}

impl Default for BlackoutSchedule {
    fn default() -> Self {
        Self { fraction: 0.2 }
    }
}

impl BlackoutSchedule {
    pub fn active(&self, step: usize, total_steps: usize) -> bool {
        (step as f64) < self.fraction * total_steps as f64
    }
}

/// Uniform frame index outside the half-open `clip`.
pub fn sample_reference_frame(clip: Range<usize>, video_length: usize, rng: &mut impl Rng) -> Result<usize> {
    let start = clip.start.min(video_length);
    let end = clip.end.clamp(start, video_length);
    let free = video_length - (end - start);
    if free == 0 {
        return Err(Error::NoValidReference {
            start: clip.start,
            end: clip.end,
            len: video_length,
        });
    }
    let k = rng.random_range(0..free);
    Ok(if k < start { k } else { k + (end - start) })
}

//! Deterministic offline stand-ins for the external services.

use super::{Captioner, DepthEstimator, InpaintJob, Inpainter, ViewContext};
use crate::error::Result;
use crate::raster::{HoleMask, Rgb, RgbImage};
use crate::rgbd_warp::DepthMap;

#[derive(Debug, Clone, Copy, Default)]
pub struct PushPullInpainter;

impl Inpainter for PushPullInpainter {
    fn fill(&self, job: &InpaintJob, _: &ViewContext) -> Result<RgbImage> {
        Ok(push_pull_fill(&job.image, &job.mask))
    }
}

struct Level {
    w: usize,
    h: usize,
    color: Vec<Rgb>,
    weight: Vec<f64>,
}

impl Level {
    fn has_holes(&self) -> bool {
        self.weight.iter().any(|&w| w == 0.0)
    }

    /// Weighted 2×2 average; coarse weight is the clamped sum.
    fn push(&self) -> Level {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut color = vec![[0.0; 3]; w * h];
        let mut weight = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                let mut wsum = 0.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (fx, fy) = (2 * x + dx, 2 * y + dy);
                    if fx >= self.w || fy >= self.h {
                        continue;
                    }
                    let i = fy * self.w + fx;
                    let wt = self.weight[i];
                    for c in 0..3 {
                        acc[c] += wt * self.color[i][c];
                    }
                    wsum += wt;
                }
                let i = y * w + x;
                if wsum > 0.0 {
                    color[i] = acc.map(|a| a / wsum);
                }
                weight[i] = wsum.min(1.0);
            }
        }
        Level { w, h, color, weight }
    }

    /// Bilinear sample at a continuous position, edges clamped.
    fn sample(&self, x: f64, y: f64) -> Rgb {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let at = |xx: usize, yy: usize| self.color[yy * self.w + xx];
        let (a, b, c, d) = (at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1));
        [0, 1, 2].map(|k| {
            (a[k] * (1.0 - tx) + b[k] * tx) * (1.0 - ty) + (c[k] * (1.0 - tx) + d[k] * tx) * ty
        })
    }

    /// Blends the upsampled coarse level into the partially known pixels.
    fn pull(&mut self, coarse: &Level) {
        for y in 0..self.h {
            for x in 0..self.w {
                let i = y * self.w + x;
                let wt = self.weight[i];
                if wt >= 1.0 {
                    continue;
                }
                let up = coarse.sample((x as f64 + 0.5) / 2.0 - 0.5, (y as f64 + 0.5) / 2.0 - 0.5);
                for c in 0..3 {
                    self.color[i][c] = wt * self.color[i][c] + (1.0 - wt) * up[c];
                }
                self.weight[i] = 1.0;
            }
        }
    }
}

/// Push-pull hole filling: average down a pyramid until no holes remain,
/// then interpolate back up. Known pixels are returned unchanged. An image
/// with no known pixel is returned as is.
pub fn push_pull_fill(image: &RgbImage, holes: &HoleMask) -> RgbImage {
    if !holes.any() || holes.count() == holes.bits.len() {
        return image.clone();
    }
    let mut levels = vec![Level {
        w: image.width,
        h: image.height,
        color: image
            .data
            .iter()
            .zip(&holes.bits)
            .map(|(&c, &hole)| if hole { [0.0; 3] } else { c })
            .collect(),
        weight: holes.bits.iter().map(|&h| if h { 0.0 } else { 1.0 }).collect(),
    }];
    while levels.last().unwrap().has_holes() {
        let next = levels.last().unwrap().push();
        levels.push(next);
    }
    while levels.len() > 1 {
        let coarse = levels.pop().unwrap();
        levels.last_mut().unwrap().pull(&coarse);
    }
    let filled = levels.pop().unwrap();
    let mut out = image.clone();
    for (i, &hole) in holes.bits.iter().enumerate() {
        if hole {
            out.data[i] = filled.color[i];
        }
    }
    out
}

/// Plane proxy whose depth runs linearly from `d_min` on the bottom row to
/// `d_max` on the top row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientDepth {
    pub d_min: f64,
    pub d_max: f64,
}

impl GradientDepth {
    pub fn new(d_min: f64, d_max: f64) -> Self {
        Self { d_min, d_max }
    }

    pub fn depth_map(&self, width: usize, height: usize) -> DepthMap {
        let denom = height.saturating_sub(1).max(1) as f64;
        let mut values = Vec::with_capacity(width * height);
        for v in 0..height {
            let t = (height - 1 - v) as f64 / denom;
            let d = self.d_min + (self.d_max - self.d_min) * t;
            values.extend(std::iter::repeat_n(d, width));
        }
        DepthMap::from_values(width, height, values).expect("values match dimensions")
    }
}

impl DepthEstimator for GradientDepth {
    fn estimate(&self, image: &RgbImage, _: &ViewContext) -> Result<DepthMap> {
        Ok(self.depth_map(image.width, image.height))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticCaption(pub String);

impl Captioner for StaticCaption {
    fn caption(&self, _: &RgbImage) -> Result<String> {
        Ok(self.0.clone())
    }
}

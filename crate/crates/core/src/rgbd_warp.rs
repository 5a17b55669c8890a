//! Depth maps, RGBD views and depth-based forward warping.
//!
//! Forward warping splats every valid source pixel onto its nearest
//! destination pixel, keeping the nearest depth. Isolated one-pixel cracks
//! left by magnification are closed with a 3×3 median before the hole mask
//! is emitted, so holes mark genuine disocclusions and out-of-view regions.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::camera::{CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::raster::{HoleMask, Mask, Rgb, RgbImage};

/// Points closer than this to the camera plane are not projected.
pub const Z_NEAR: f64 = 0.01;
/// Depths closer than this are treated as a z-buffer tie.
pub const DEPTH_TIE_EPS: f64 = 1e-9;
pub const MIN_ALIGN_OVERLAP: usize = 16;
const CRACK_MIN_NEIGHBORS: usize = 6;

const DEPTH_MAGIC: &[u8; 4] = b"DDP1";

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            values: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    /// Builds a map from raw values; pixels that are not finite and positive
    /// are marked invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "depth has {} values for {width}x{height}",
                values.len()
            )));
        }
        let valid = values.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        let mut map = Self {
            width,
            height,
            values,
            valid,
        };
        map.sanitize();
        Ok(map)
    }

    fn sanitize(&mut self) {
        for (d, ok) in self.values.iter_mut().zip(self.valid.iter_mut()) {
            if !(d.is_finite() && *d > 0.0) {
                *ok = false;
            }
            if !*ok {
                *d = 0.0;
            }
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then(|| self.values[i])
    }

    pub fn validity_mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.valid.clone(),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    pub fn median(&self) -> Option<f64> {
        let mut vals: Vec<f64> = self
            .values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(&d, _)| d)
            .collect();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(f64::total_cmp);
        let n = vals.len();
        Some(if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        })
    }

    /// `DDP1` blob: magic, u32 width, u32 height, f32 depths, u8 validity.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(12 + 5 * n);
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for &d in &self.values {
            out.extend_from_slice(&(d as f32).to_le_bytes());
        }
        out.extend(self.valid.iter().map(|&b| b as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..], Path::new("<memory>"))
    }

    fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let mut header = [0u8; 12];
        r.read_exact(&mut header).map_err(|_| bad("truncated depth header"))?;
        if &header[..4] != DEPTH_MAGIC {
            return Err(bad("missing DDP1 magic"));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| bad("depth dimensions overflow"))?;
        let mut raw = vec![0u8; n * 5];
        r.read_exact(&mut raw).map_err(|_| bad("truncated depth payload"))?;
        let values = raw[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut valid = Vec::with_capacity(n);
        for &b in &raw[4 * n..] {
            match b {
                0 => valid.push(false),
                1 => valid.push(true),
                _ => return Err(bad("validity bytes must be 0 or 1")),
            }
        }
        let mut map = Self {
            width,
            height,
            values,
            valid,
        };
        map.sanitize();
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file), path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub color: RgbImage,
    pub depth: DepthMap,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

impl RgbdImage {
    pub fn new(color: RgbImage, depth: DepthMap, pose: CameraPose, intrinsics: Intrinsics) -> Result<Self> {
        let (w, h) = (intrinsics.width, intrinsics.height);
        if color.width != w || color.height != h || depth.width != w || depth.height != h {
            return Err(Error::shape(format!(
                "color {}x{} / depth {}x{} do not match intrinsics {w}x{h}",
                color.width, color.height, depth.width, depth.height
            )));
        }
        Ok(Self {
            color,
            depth,
            pose,
            intrinsics,
        })
    }

    /// World-space point seen at pixel `(u, v)`.
    pub fn world_point(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        let d = self.depth.get(u, v)?;
        let cam = self.intrinsics.unproject(u as f64, v as f64, d);
        Some(self.pose.invert().transform_point(&cam))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Vector3<f64>,
    pub color: Rgb,
    pub pixel: (usize, usize),
}

/// One world-space point per valid depth pixel, in row-major pixel order.
pub fn unproject(img: &RgbdImage) -> Vec<ColoredPoint> {
    let cam_to_world = img.pose.invert();
    let mut out = Vec::with_capacity(img.depth.valid_count());
    for v in 0..img.intrinsics.height {
        for u in 0..img.intrinsics.width {
            if let Some(d) = img.depth.get(u, v) {
                let cam = img.intrinsics.unproject(u as f64, v as f64, d);
                out.push(ColoredPoint {
                    position: cam_to_world.transform_point(&cam),
                    color: img.color.get(u, v),
                    pixel: (u, v),
                });
            }
        }
    }
    out
}

/// Projects a world point; returns `(u, v, z)` in continuous pixel
/// coordinates, or `None` behind the near plane.
pub fn project_point(pose: &CameraPose, intr: &Intrinsics, world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let cam = pose.transform_point(world);
    if cam.z <= Z_NEAR {
        return None;
    }
    let (u, v) = intr.project(&cam);
    Some((u, v, cam.z))
}

/// Nearest pixel index for continuous coordinates, if inside the image.
#[inline]
pub(crate) fn pixel_index(intr: &Intrinsics, u: f64, v: f64) -> Option<(usize, usize)> {
    let (ui, vi) = (u.round(), v.round());
    if ui < 0.0 || vi < 0.0 || ui >= intr.width as f64 || vi >= intr.height as f64 {
        return None;
    }
    Some((ui as usize, vi as usize))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub color: RgbImage,
    pub depth: DepthMap,
    pub holes: HoleMask,
}

/// Splats `src` into the view at `dst_pose` (same intrinsics).
pub fn forward_warp(src: &RgbdImage, dst_pose: &CameraPose) -> WarpResult {
    let intr = src.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let relative = dst_pose.compose(&src.pose.invert());
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut color = RgbImage::new(w, h);

    // Row-major traversal with a strict `<` keeps the lowest source index on ties.
    for v in 0..h {
        for u in 0..w {
            let Some(d) = src.depth.get(u, v) else { continue };
            let cam = relative.transform_point(&intr.unproject(u as f64, v as f64, d));
            if cam.z <= Z_NEAR {
                continue;
            }
            let (pu, pv) = intr.project(&cam);
            let Some((x, y)) = pixel_index(&intr, pu, pv) else { continue };
            let i = y * w + x;
            if cam.z < zbuf[i] - DEPTH_TIE_EPS {
                zbuf[i] = cam.z;
                color.data[i] = src.color.get(u, v);
            }
        }
    }

    let filled: Vec<bool> = zbuf.iter().map(|z| z.is_finite()).collect();
    let mut depth = DepthMap {
        width: w,
        height: h,
        values: zbuf.iter().map(|&z| if z.is_finite() { z } else { 0.0 }).collect(),
        valid: filled.clone(),
    };
    fill_cracks(&filled, &mut color, &mut depth);
    let holes = Mask {
        width: w,
        height: h,
        bits: depth.valid.iter().map(|ok| !ok).collect(),
    };
    WarpResult { color, depth, holes }
}

/// One pass over the pre-fill state: an empty pixel with at least six of
/// its eight neighbors filled takes their per-channel median.
fn fill_cracks(filled: &[bool], color: &mut RgbImage, depth: &mut DepthMap) {
    let (w, h) = (depth.width, depth.height);
    let src_color = color.clone();
    let src_depth = depth.values.clone();
    let mut samples: Vec<(Rgb, f64)> = Vec::with_capacity(8);
    for v in 0..h {
        for u in 0..w {
            if filled[v * w + u] {
                continue;
            }
            samples.clear();
            for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    if du == 0 && dv == 0 {
                        continue;
                    }
                    let (x, y) = (u as i64 + du, v as i64 + dv);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let j = y as usize * w + x as usize;
                    if filled[j] {
                        samples.push((src_color.data[j], src_depth[j]));
                    }
                }
            }
            if samples.len() < CRACK_MIN_NEIGHBORS {
                continue;
            }
            let i = v * w + u;
            let mut c = [0.0; 3];
            for (ch, out) in c.iter_mut().enumerate() {
                *out = median(samples.iter().map(|s| s.0[ch]).collect());
            }
            color.data[i] = c;
            depth.values[i] = median(samples.iter().map(|s| s.1).collect());
            depth.valid[i] = true;
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthAlignment {
    pub scale: f64,
    pub offset: f64,
    pub overlap: usize,
}

/// Least-squares `(s, b)` minimizing `Σ (s·new + b − anchor)²` over pixels in
/// `overlap` where both maps are valid.
pub fn fit_depth_alignment(new_depth: &DepthMap, anchor: &DepthMap, overlap: &Mask) -> Result<DepthAlignment> {
    if new_depth.width != anchor.width
        || new_depth.height != anchor.height
        || overlap.width != anchor.width
        || overlap.height != anchor.height
    {
        return Err(Error::shape("depth alignment inputs differ in size"));
    }
    let pairs: Vec<(f64, f64)> = (0..overlap.bits.len())
        .filter(|&i| overlap.bits[i] && new_depth.valid[i] && anchor.valid[i])
        .map(|i| (new_depth.values[i], anchor.values[i]))
        .collect();
    let n = pairs.len();
    if n < MIN_ALIGN_OVERLAP {
        return Err(Error::InsufficientOverlap {
            found: n,
            required: MIN_ALIGN_OVERLAP,
        });
    }
    let nf = n as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let var_x = pairs.iter().map(|p| (p.0 - mean_x).powi(2)).sum::<f64>() / nf;
    if var_x < 1e-12 {
        return Err(Error::DegenerateFit(format!(
            "overlap depth variance {var_x:e} is below 1e-12"
        )));
    }
    let cov = pairs
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum::<f64>()
        / nf;
    let scale = cov / var_x;
    if !(scale > 0.0) {
        return Err(Error::DegenerateFit(format!("fitted scale {scale} is not positive")));
    }
    Ok(DepthAlignment {
        scale,
        offset: mean_y - scale * mean_x,
        overlap: n,
    })
}

pub fn align_depth(new_depth: &DepthMap, anchor: &DepthMap, overlap: &Mask) -> Result<DepthMap> {
    let fit = fit_depth_alignment(new_depth, anchor, overlap)?;
    Ok(apply_alignment(new_depth, fit.scale, fit.offset))
}

pub(crate) fn apply_alignment(depth: &DepthMap, scale: f64, offset: f64) -> DepthMap {
    let mut out = depth.clone();
    for (d, &ok) in out.values.iter_mut().zip(&depth.valid) {
        if ok {
            *d = scale * *d + offset;
        }
    }
    out.sanitize();
    out
}

/// Ratio-only fallback `s = Σ new·anchor / Σ new²` for overlaps where the
/// affine fit is degenerate (e.g. a fronto-parallel plane).
pub fn fit_depth_scale(new_depth: &DepthMap, anchor: &DepthMap, overlap: &Mask) -> Result<f64> {
    let (mut xy, mut xx, mut n) = (0.0, 0.0, 0usize);
    for i in 0..overlap.bits.len() {
        if overlap.bits[i] && new_depth.valid[i] && anchor.valid[i] {
            xy += new_depth.values[i] * anchor.values[i];
            xx += new_depth.values[i] * new_depth.values[i];
            n += 1;
        }
    }
    if n < MIN_ALIGN_OVERLAP {
        return Err(Error::InsufficientOverlap {
            found: n,
            required: MIN_ALIGN_OVERLAP,
        });
    }
    Ok(xy / xx)
}

/// Solves the 2×2 normal equations directly; test oracle for the fit.
#[cfg(test)]
fn normal_equations(pairs: &[(f64, f64)]) -> (f64, f64) {
    use nalgebra::{Matrix2, Vector2};
    let mut a = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for &(x, y) in pairs {
        a += Matrix2::new(x * x, x, x, 1.0);
        rhs += Vector2::new(x * y, y);
    }
    let sol = a.lu().solve(&rhs).unwrap();
    (sol[0], sol[1])
}

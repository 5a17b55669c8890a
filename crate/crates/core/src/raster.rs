//! Plain in-memory image containers shared by every stage, plus PNG I/O.
//!
//! Colors are stored as `f64` triples in `[0, 1]`, row-major, with pixel
//! `(u, v)` at index `v * width + u`.

use std::fs::File;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Rgb {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: Rgb) {
        self.data[v * self.width + u] = c;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// One color channel as a scalar plane.
    pub fn channel(&self, c: usize) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[c]).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.pixels_mut().zip(&self.data) {
            *dst = image::Rgb(src.map(quantize));
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img
                .pixels()
                .map(|p| p.0.map(|c| c as f64 / 255.0))
                .collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })
    }
}

/// Maps `[0, 1]` to a byte with round-half-up; out-of-range values clamp.
#[inline]
pub fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Scalar image, used for single channels, alpha and per-pixel losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, x: f64) {
        self.data[v * self.width + u] = x;
    }

    /// Grayscale 8-bit PNG, values clamped to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&x| quantize(x)).collect(),
        )
        .expect("plane buffer matches its dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })
    }
}

/// Binary per-pixel mask. For hole masks `true` means missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

pub type HoleMask = Mask;
pub type MaskVideo = Vec<Mask>;

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, b: bool) {
        self.bits[v * self.width + u] = b;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }

    /// Any nonzero pixel of the decoded image counts as set.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        Ok(Self::from_luma(&img))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_luma8();
        Ok(Self::from_luma(&img))
    }

    fn from_luma(img: &image::GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            bits: img.pixels().map(|p| p.0[0] > 0).collect(),
        }
    }

    /// 8-bit grayscale PNG (0 / 255), used for wire payloads.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("mask buffer matches its dimensions");
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// 1-bit grayscale PNG.
    pub fn save_png_1bit(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for v in 0..self.height {
            for u in 0..self.width {
                if self.get(u, v) {
                    packed[v * stride + u / 8] |= 0x80 >> (u % 8);
                }
            }
        }
        let to_err = |e: png::EncodingError| match e {
            png::EncodingError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        };
        let mut writer = encoder.write_header().map_err(to_err)?;
        writer.write_image_data(&packed).map_err(to_err)?;
        writer.finish().map_err(to_err)
    }
}

/// Lists `*.png` files in a directory in lexicographic order.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// `frame_000042.png`
pub fn frame_name(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:06}.png")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_quantized_colors() {
        let img = RgbImage::from_fn(5, 3, |u, v| [u as f64 / 4.0, v as f64 / 2.0, 0.5]);
        let back = RgbImage::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert!(back.same_shape(&img));
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn one_bit_mask_png_decodes_to_same_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = Mask::new(11, 4);
        m.set(0, 0, true);
        m.set(10, 3, true);
        m.set(7, 2, true);
        m.save_png_1bit(&path).unwrap();
        assert_eq!(Mask::load_png(&path).unwrap(), m);
    }
}

//! Keypoint sequences to pose-guidance rasters and inpainting masks.

use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, MaskVideo, Rgb, RgbImage};

pub const DEFAULT_CONF_MIN: f64 = 0.3;
/// Disk radius at a 768-pixel short side; scale with [`default_dilation`].
pub const REFERENCE_DILATION: f64 = 12.0;
/// Drawn skeleton lines cover pixels within this distance of the segment.
pub const LINE_HALF_WIDTH: f64 = 2.0;

/// `(x, y, confidence)` in pixels.
pub type Keypoint = [f64; 3];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseFrame {
    pub body: Vec<Keypoint>,
    pub face: Vec<Keypoint>,
    pub hand: Vec<Keypoint>,
}

pub type PoseVideo = Vec<PoseFrame>;

/// COCO-17 skeleton.
pub const BODY_EDGES: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

pub const BODY_COLORS: [Rgb; 19] = [
    [1.0, 0.0, 0.0],
    [1.0, 0.33, 0.0],
    [1.0, 0.67, 0.0],
    [1.0, 1.0, 0.0],
    [0.67, 1.0, 0.0],
    [0.33, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.33],
    [0.0, 1.0, 0.67],
    [0.0, 1.0, 1.0],
    [0.0, 0.67, 1.0],
    [0.0, 0.33, 1.0],
    [0.0, 0.0, 1.0],
    [0.33, 0.0, 1.0],
    [0.67, 0.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.0, 0.67],
    [1.0, 0.0, 0.33],
    [0.5, 0.5, 0.5],
];

/// One color per finger, thumb first.
pub const HAND_COLORS: [Rgb; 5] = [
    [1.0, 0.2, 0.2],
    [1.0, 0.8, 0.2],
    [0.2, 1.0, 0.4],
    [0.2, 0.6, 1.0],
    [0.8, 0.3, 1.0],
];

pub const FACE_COLOR: Rgb = [1.0, 1.0, 1.0];

/// Hands come in blocks of 21 keypoints: wrist, then four joints per finger.
pub fn hand_edges(n_points: usize) -> Vec<((usize, usize), Rgb)> {
    let mut out = Vec::new();
    for base in (0..n_points / 21).map(|h| h * 21) {
        for (finger, color) in HAND_COLORS.iter().enumerate() {
            let mut prev = base;
            for j in 0..4 {
                let next = base + 1 + finger * 4 + j;
                out.push(((prev, next), *color));
                prev = next;
            }
        }
    }
    out
}

/// 68-point face contour: jaw, brows, nose, closed eye and lip loops.
pub fn face_edges() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut chain = |lo: usize, hi: usize, closed: bool| {
        for i in lo..hi {
            out.push((i, i + 1));
        }
        if closed {
            out.push((hi, lo));
        }
    };
    chain(0, 16, false);
    chain(17, 21, false);
    chain(22, 26, false);
    chain(27, 30, false);
    chain(31, 35, false);
    chain(36, 41, true);
    chain(42, 47, true);
    chain(48, 59, true);
    chain(60, 67, true);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseStyle {
    Body,
    Face,
    Hand,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Union of keypoint disks and skeleton capsules.
    #[default]
    Disks,
    /// Padded keypoint bounding box.
    BBox,
}

/// Pixel rectangle covering `x0 ≤ u < x1`, `y0 ≤ v < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn contains(&self, u: usize, v: usize) -> bool {
        let (u, v) = (u as f64, v as f64);
        u >= self.x0 && u < self.x1 && v >= self.y0 && v < self.y1
    }

    pub fn to_mask(&self, width: usize, height: usize) -> Mask {
        let mut m = Mask::new(width, height);
        for v in 0..height {
            for u in 0..width {
                if self.contains(u, v) {
                    m.set(u, v, true);
                }
            }
        }
        m
    }
}

pub fn default_dilation(width: usize, height: usize) -> f64 {
    REFERENCE_DILATION * width.min(height) as f64 / 768.0
}

fn valid(k: &Keypoint, conf_min: f64) -> bool {
    k[0].is_finite() && k[1].is_finite() && k[2] >= conf_min
}

impl PoseFrame {
    pub fn keypoints(&self) -> impl Iterator<Item = &Keypoint> {
        self.body.iter().chain(&self.face).chain(&self.hand)
    }

    /// Segments whose endpoints both pass `conf_min`, with their draw color.
    fn segments(&self, style: PoseStyle, conf_min: f64) -> Vec<(Keypoint, Keypoint, Rgb)> {
        let mut out = Vec::new();
        let mut push = |pts: &[Keypoint], (a, b): (usize, usize), color: Rgb| {
            if let (Some(p), Some(q)) = (pts.get(a), pts.get(b)) {
                if valid(p, conf_min) && valid(q, conf_min) {
                    out.push((*p, *q, color));
                }
            }
        };
        if matches!(style, PoseStyle::Body | PoseStyle::All) {
            for (e, c) in BODY_EDGES.iter().zip(BODY_COLORS) {
                push(&self.body, *e, c);
            }
        }
        if matches!(style, PoseStyle::Face | PoseStyle::All) {
            for e in face_edges() {
                push(&self.face, e, FACE_COLOR);
            }
        }
        if matches!(style, PoseStyle::Hand | PoseStyle::All) {
            for (e, c) in hand_edges(self.hand.len()) {
                push(&self.hand, e, c);
            }
        }
        out
    }
}

pub fn read_pose_video(reader: impl BufRead) -> Result<PoseVideo> {
    let mut frames = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<pose stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: PoseFrame = serde_json::from_str(&line)
            .map_err(|e| Error::format("<pose stream>", format!("line {}: {e}", n + 1)))?;
        if frame.keypoints().any(|k| !k[0].is_finite() || !k[1].is_finite() || !(0.0..=1.0).contains(&k[2])) {
            return Err(Error::format("<pose stream>", format!("line {}: keypoint out of range", n + 1)));
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::format("<pose stream>", "no frames"));
    }
    Ok(frames)
}

pub fn load_pose_video(path: impl AsRef<Path>) -> Result<PoseVideo> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pose_video(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

/// Bounds of the confident keypoints, padded and clamped to the image.
pub fn pose_bbox(frame: &PoseFrame, conf_min: f64, padding: f64, width: usize, height: usize) -> Option<BBox> {
    let mut it = frame.keypoints().filter(|k| valid(k, conf_min)).peekable();
    it.peek()?;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in it {
        x0 = x0.min(k[0]);
        y0 = y0.min(k[1]);
        x1 = x1.max(k[0]);
        y1 = y1.max(k[1]);
    }
    Some(BBox {
        x0: (x0 - padding).max(0.0),
        y0: (y0 - padding).max(0.0),
        x1: (x1 + padding).min(width as f64),
        y1: (y1 + padding).min(height as f64),
    })
}

fn segment_distance2(px: f64, py: f64, a: &Keypoint, b: &Keypoint) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a[0] + t * dx - px, a[1] + t * dy - py);
    ex * ex + ey * ey
}

/// Calls `f` for every pixel within `radius` of segment `a`–`b`.
fn for_capsule(a: &Keypoint, b: &Keypoint, radius: f64, width: usize, height: usize, mut f: impl FnMut(usize, usize)) {
    if width == 0 || height == 0 {
        return;
    }
    let r2 = radius * radius;
    let lo_u = (a[0].min(b[0]) - radius).ceil().max(0.0);
    let hi_u = (a[0].max(b[0]) + radius).floor().min(width as f64 - 1.0);
    let lo_v = (a[1].min(b[1]) - radius).ceil().max(0.0);
    let hi_v = (a[1].max(b[1]) + radius).floor().min(height as f64 - 1.0);
    if lo_u > hi_u || lo_v > hi_v {
        return;
    }
    for v in lo_v as usize..=hi_v as usize {
        for u in lo_u as usize..=hi_u as usize {
            if segment_distance2(u as f64, v as f64, a, b) <= r2 {
                f(u, v);
            }
        }
    }
}

/// Disks of `dilation` around every confident keypoint plus capsules of the
/// same radius along every drawable edge.
pub fn frame_mask(frame: &PoseFrame, width: usize, height: usize, conf_min: f64, dilation: f64) -> Mask {
    let mut m = Mask::new(width, height);
    for k in frame.keypoints().filter(|k| valid(k, conf_min)) {
        for_capsule(k, k, dilation, width, height, |u, v| m.set(u, v, true));
    }
    for (a, b, _) in frame.segments(PoseStyle::All, conf_min) {
        for_capsule(&a, &b, dilation, width, height, |u, v| m.set(u, v, true));
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskOptions {
    pub conf_min: f64,
    /// `None` scales [`REFERENCE_DILATION`] to the image.
    pub dilation: Option<f64>,
    pub mode: MaskMode,
    /// OR each mask with its neighbors one frame before and after.
    pub temporal: bool,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            conf_min: DEFAULT_CONF_MIN,
            dilation: None,
            mode: MaskMode::Disks,
            temporal: true,
        }
    }
}

pub fn mask_video(pv: &[PoseFrame], width: usize, height: usize, opts: &MaskOptions) -> MaskVideo {
    let dilation = opts.dilation.unwrap_or_else(|| default_dilation(width, height));
    let raw: Vec<Mask> = pv
        .par_iter()
        .map(|f| match opts.mode {
            MaskMode::Disks => frame_mask(f, width, height, opts.conf_min, dilation),
            MaskMode::BBox => pose_bbox(f, opts.conf_min, dilation, width, height)
                .map(|b| b.to_mask(width, height))
                .unwrap_or_else(|| Mask::new(width, height)),
        })
        .collect();
    if !opts.temporal {
        return raw;
    }
    (0..raw.len())
        .map(|i| {
            let mut m = raw[i].clone();
            if i > 0 {
                m = m.union(&raw[i - 1]);
            }
            if i + 1 < raw.len() {
                m = m.union(&raw[i + 1]);
            }
            m
        })
        .collect()
}

/// Skeleton edges as colored lines of half-width [`LINE_HALF_WIDTH`] on
/// black; later edges overwrite earlier ones.
pub fn rasterize_pose(frame: &PoseFrame, width: usize, height: usize, style: PoseStyle, conf_min: f64) -> RgbImage {
    let mut img = RgbImage::new(width, height);
    for (a, b, color) in frame.segments(style, conf_min) {
        for_capsule(&a, &b, LINE_HALF_WIDTH, width, height, |u, v| img.set(u, v, color));
    }
    img
}

pub fn rasterize_video(pv: &[PoseFrame], width: usize, height: usize, style: PoseStyle, conf_min: f64) -> Vec<RgbImage> {
    pv.par_iter()
        .map(|f| rasterize_pose(f, width, height, style, conf_min))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(x: f64, y: f64) -> PoseFrame {
        PoseFrame {
            body: vec![[x, y, 1.0]],
            ..Default::default()
        }
    }

    #[test]
    fn bbox_examples() {
        let f = PoseFrame {
            body: vec![[3.0, 3.0, 0.1]],
            ..Default::default()
        };
        assert_eq!(pose_bbox(&f, 0.3, 5.0, 64, 64), None);
        assert_eq!(
            pose_bbox(&single(10.0, 20.0), 0.3, 5.0, 64, 64),
            Some(BBox { x0: 5.0, y0: 15.0, x1: 15.0, y1: 25.0 })
        );
        let two = PoseFrame {
            body: vec![[10.0, 20.0, 0.9]],
            hand: vec![[30.0, 8.0, 0.5]],
            ..Default::default()
        };
        assert_eq!(
            pose_bbox(&two, 0.3, 2.0, 64, 64),
            Some(BBox { x0: 8.0, y0: 6.0, x1: 32.0, y1: 22.0 })
        );
        assert_eq!(pose_bbox(&single(1.0, 62.0), 0.3, 5.0, 64, 64).unwrap(), BBox { x0: 0.0, y0: 57.0, x1: 6.0, y1: 64.0 });
    }

    #[test]
    fn empty_frame_gives_empty_outputs() {
        let f = PoseFrame::default();
        assert!(!frame_mask(&f, 16, 16, 0.3, 3.0).any());
        assert!(rasterize_pose(&f, 16, 16, PoseStyle::All, 0.3).data.iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn single_keypoint_disk_matches_pixel_count() {
        let m = frame_mask(&single(10.0, 10.0), 32, 32, 0.3, 3.0);
        let mut oracle = 0;
        for v in 0..32i64 {
            for u in 0..32i64 {
                if (u - 10).pow(2) + (v - 10).pow(2) <= 9 {
                    oracle += 1;
                }
            }
        }
        assert_eq!(oracle, 29);
        assert_eq!(m.count(), oracle);
    }

    #[test]
    fn horizontal_edge_pixel_count() {
        let mut f = PoseFrame {
            body: vec![[0.0, 0.0, 0.0]; 17],
            ..Default::default()
        };
        f.body[15] = [4.0, 10.0, 1.0];
        f.body[13] = [20.0, 10.0, 1.0];
        let img = rasterize_pose(&f, 32, 32, PoseStyle::Body, 0.3);
        let lit: Vec<(usize, usize)> = (0..32 * 32)
            .filter(|i| img.data[*i] != [0.0; 3])
            .map(|i| (i % 32, i / 32))
            .collect();
        // Straight run of 17 columns, 5 rows, plus 2-pixel round caps.
        let mut oracle = 0;
        for v in 0..32i64 {
            for u in 0..32i64 {
                let dx = if u < 4 { 4 - u } else if u > 20 { u - 20 } else { 0 };
                if dx * dx + (v - 10).pow(2) <= 4 {
                    oracle += 1;
                }
            }
        }
        assert_eq!(lit.len(), oracle);
        assert_eq!(oracle, 17 * 5 + 2 * 4);
        assert!(lit.iter().all(|&(u, v)| img.get(u, v) == BODY_COLORS[0]));
    }

    #[test]
    fn raster_is_deterministic_and_inside_mask() {
        let frame = PoseFrame {
            body: (0..17).map(|i| [8.0 + 3.0 * i as f64, 10.0 + (i * 7 % 40) as f64, 0.9]).collect(),
            face: (0..68).map(|i| [30.0 + (i as f64 * 0.5).cos() * 6.0, 12.0 + (i as f64 * 0.5).sin() * 6.0, 0.8]).collect(),
            hand: (0..42).map(|i| [10.0 + i as f64, 50.0 - (i % 21) as f64, 0.7]).collect(),
        };
        let a = rasterize_pose(&frame, 64, 64, PoseStyle::All, 0.3);
        assert_eq!(a, rasterize_pose(&frame, 64, 64, PoseStyle::All, 0.3));
        let m = frame_mask(&frame, 64, 64, 0.3, 2.0 * LINE_HALF_WIDTH);
        for (i, c) in a.data.iter().enumerate() {
            if *c != [0.0; 3] {
                assert!(m.bits[i]);
            }
        }
        assert_eq!(hand_edges(42).len(), 40);
        assert_eq!(face_edges().len(), 16 + 4 + 4 + 3 + 4 + 6 + 6 + 12 + 8);
    }

    #[test]
    fn temporal_or_fills_dropouts() {
        let pv = vec![single(5.0, 5.0), PoseFrame::default(), single(20.0, 20.0)];
        let opts = MaskOptions {
            dilation: Some(2.0),
            ..Default::default()
        };
        let masks = mask_video(&pv, 32, 32, &opts);
        assert_eq!(masks.len(), 3);
        assert!(masks[1].get(5, 5) && masks[1].get(20, 20));
        assert!(!masks[0].get(20, 20));
        let raw = mask_video(&pv, 32, 32, &MaskOptions { temporal: false, ..opts });
        assert!(!raw[1].any());
        let boxes = mask_video(&pv, 32, 32, &MaskOptions { mode: MaskMode::BBox, temporal: false, ..opts });
        assert_eq!(boxes[0].count(), 16);
    }

    #[test]
    fn jsonl_reader() {
        let text = "{\"body\": [[1, 2, 0.5]], \"hand\": []}\n\n{\"face\": [[3, 4, 1.0]]}\n";
        let pv = read_pose_video(text.as_bytes()).unwrap();
        assert_eq!(pv.len(), 2);
        assert_eq!(pv[0].body[0], [1.0, 2.0, 0.5]);
        assert!(read_pose_video("{\"legs\": []}".as_bytes()).is_err());
        assert!(read_pose_video("{\"body\": [[1, 2, 1.5]]}".as_bytes()).is_err());
        assert!(read_pose_video("".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn mask_monotone_in_dilation(x in 0.0f64..40.0, y in 0.0f64..40.0, x2 in 0.0f64..40.0, d1 in 0.0f64..6.0, extra in 0.0f64..6.0) {
            let mut f = PoseFrame { body: vec![[0.0, 0.0, 0.0]; 17], ..Default::default() };
            f.body[5] = [x, y, 1.0];
            f.body[6] = [x2, y, 1.0];
            let small = frame_mask(&f, 40, 40, 0.3, d1);
            let big = frame_mask(&f, 40, 40, 0.3, d1 + extra);
            prop_assert!(small.bits.iter().zip(&big.bits).all(|(a, b)| !a || *b));
        }
    }
}

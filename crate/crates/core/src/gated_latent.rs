//! Latent assembly, timestep-gated guidance injection, a toy diffusion
//! process and a small convolutional denoiser with hand-written gradients.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{reweight_flat, LossWeights};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const EMBED_DIM: usize = 64;
pub const GATE_INIT_STD: f64 = 0.02;
pub const DIFFUSION_STEPS: usize = 50;
pub const C_LATENT: usize = 8;
pub const C_MODEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Background,
    Pose,
    Character,
    Noise,
    Injected,
    Mask,
    Other,
}

/// `C×T×H×W` tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub role: Role,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl LatentVideo {
    pub fn zeros(role: Role, c: usize, t: usize, h: usize, w: usize) -> Self {
        Self {
            role,
            c,
            t,
            h,
            w,
            data: vec![0.0; c * t * h * w],
        }
    }

    pub fn from_data(role: Role, c: usize, t: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * t * h * w {
            return Err(Error::shape(format!("{} values for a {c}x{t}x{h}x{w} latent", data.len())));
        }
        Ok(Self { role, c, t, h, w, data })
    }

    pub fn random(role: Role, c: usize, t: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let data = (0..c * t * h * w).map(|_| StandardNormal.sample(rng)).collect();
        Self { role, c, t, h, w, data }
    }

    pub fn voxels(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn same_extent(&self, other: &LatentVideo) -> bool {
        (self.t, self.h, self.w) == (other.t, other.h, other.w)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Channels `lo..hi` as a new latent.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> LatentVideo {
        let n = self.voxels();
        LatentVideo {
            role: self.role,
            c: hi - lo,
            t: self.t,
            h: self.h,
            w: self.w,
            data: self.data[lo * n..hi * n].to_vec(),
        }
    }
}

fn check_extent(a: &LatentVideo, b: &LatentVideo) -> Result<()> {
    if !a.same_extent(b) {
        return Err(Error::shape(format!(
            "latent extents differ: {}x{}x{} vs {}x{}x{}",
            a.t, a.h, a.w, b.t, b.h, b.w
        )));
    }
    Ok(())
}

pub fn concat_channels(parts: &[&LatentVideo], role: Role) -> Result<LatentVideo> {
    let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
    for p in parts {
        check_extent(first, p)?;
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(LatentVideo {
        role,
        c: parts.iter().map(|p| p.c).sum(),
        t: first.t,
        h: first.h,
        w: first.w,
        data,
    })
}

/// `[coarse, mask, noise]` along channels.
pub fn assemble_background(coarse: &LatentVideo, mask: &LatentVideo, x_t: &LatentVideo) -> Result<LatentVideo> {
    concat_channels(&[coarse, mask, x_t], Role::Background)
}

/// Fixed full-rank lift from RGB to `c_latent` channels and its
/// least-squares inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLift {
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
    pinv: DMatrix<f64>,
}

impl ChannelLift {
    pub fn standard(c_latent: usize) -> Result<Self> {
        if c_latent < 3 {
            return Err(Error::invalid("the lift needs at least 3 latent channels"));
        }
        let weight = DMatrix::from_fn(c_latent, 3, |i, j| {
            if i == j {
                1.0
            } else {
                0.25 * ((i + 1) as f64 * (j + 2) as f64 * 0.7).cos()
            }
        });
        let bias = (0..c_latent).map(|i| 0.1 * (i as f64 * 1.3).sin()).collect();
        let gram = weight.transpose() * &weight;
        let pinv = gram
            .try_inverse()
            .ok_or_else(|| Error::invalid("lift matrix is rank deficient"))?
            * weight.transpose();
        Ok(Self { weight, bias, pinv })
    }

    pub fn channels(&self) -> usize {
        self.weight.nrows()
    }
}

/// Block-average pooling by `(temporal, spatial, spatial)` then the affine
/// channel lift.
pub fn toy_encode(frames: &[RgbImage], spatial: usize, temporal: usize, lift: &ChannelLift) -> Result<LatentVideo> {
    let first = frames.first().ok_or_else(|| Error::shape("no frames to encode"))?;
    let (fw, fh) = (first.width, first.height);
    if frames.iter().any(|f| f.width != fw || f.height != fh) {
        return Err(Error::shape("frames differ in size"));
    }
    if spatial == 0 || temporal == 0 || fw % spatial != 0 || fh % spatial != 0 || frames.len() % temporal != 0 {
        return Err(Error::shape(format!(
            "{}x{}x{} video is not divisible by factors ({temporal}, {spatial})",
            frames.len(),
            fh,
            fw
        )));
    }
    let (t, h, w) = (frames.len() / temporal, fh / spatial, fw / spatial);
    let c = lift.channels();
    let mut out = LatentVideo::zeros(Role::Other, c, t, h, w);
    let n = out.voxels();
    let norm = 1.0 / (temporal * spatial * spatial) as f64;
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let mut mean = [0.0; 3];
                for f in &frames[ti * temporal..(ti + 1) * temporal] {
                    for v in y * spatial..(y + 1) * spatial {
                        for u in x * spatial..(x + 1) * spatial {
                            let px = f.get(u, v);
                            for k in 0..3 {
                                mean[k] += px[k];
                            }
                        }
                    }
                }
                let vox = (ti * h + y) * w + x;
                for ch in 0..c {
                    let mut z = lift.bias[ch];
                    for k in 0..3 {
                        z += lift.weight[(ch, k)] * mean[k] * norm;
                    }
                    out.data[ch * n + vox] = z;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse lift followed by nearest-neighbor upsampling.
pub fn toy_decode(latent: &LatentVideo, spatial: usize, temporal: usize, lift: &ChannelLift) -> Result<Vec<RgbImage>> {
    if latent.c != lift.channels() {
        return Err(Error::shape(format!("{} channels for a {}-channel lift", latent.c, lift.channels())));
    }
    if spatial == 0 || temporal == 0 {
        return Err(Error::shape("factors must be positive"));
    }
    let n = latent.voxels();
    let mut frames = Vec::with_capacity(latent.t * temporal);
    for ti in 0..latent.t {
        let img = RgbImage::from_fn(latent.w * spatial, latent.h * spatial, |u, v| {
            let vox = (ti * latent.h + v / spatial) * latent.w + u / spatial;
            let mut rgb = [0.0; 3];
            for k in 0..3 {
                for ch in 0..latent.c {
                    rgb[k] += lift.pinv[(k, ch)] * (latent.data[ch * n + vox] - lift.bias[ch]);
                }
            }
            rgb
        });
        for _ in 0..temporal {
            frames.push(img.clone());
        }
    }
    Ok(frames)
}

/// What the gate maps see of the timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    #[default]
    Sinusoidal,
    RawScalar,
}

impl GateInput {
    pub fn dim(&self) -> usize {
        match self {
            GateInput::Sinusoidal => EMBED_DIM,
            GateInput::RawScalar => 1,
        }
    }

    pub fn embed(&self, t: usize) -> Vec<f64> {
        match self {
            GateInput::Sinusoidal => sinusoidal_embedding(t as f64, EMBED_DIM),
            GateInput::RawScalar => vec![t as f64],
        }
    }
}

/// `[sin(t·ω_j), cos(t·ω_j)]` with `ω_j = 10000^(−j/(dim/2))`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10000f64).ln() * j as f64 / half as f64).exp();
        out[j] = (t * freq).sin();
        out[half + j] = (t * freq).cos();
    }
    out
}

/// Channel counts of the injection inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDims {
    /// Channels of `[β, x_t]`.
    pub c_bg: usize,
    pub c_pose: usize,
    pub c_char: usize,
    pub c_model: usize,
}

impl GateDims {
    /// Coarse and noise latents of `c_latent` channels plus a one-channel
    /// mask; pose and character latents of `c_latent` channels.
    pub fn standard(c_latent: usize, c_model: usize) -> Self {
        Self {
            c_bg: 2 * c_latent + 1,
            c_pose: c_latent,
            c_char: c_latent,
            c_model,
        }
    }
}

/// Gate maps `g_p`, `g_c` (row-major `c_model × embed dim`) and pointwise
/// projections `f_b`, `f_p`, `f_c` (row-major `c_model × c_in`).
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub input: GateInput,
    pub dims: GateDims,
    pub gp_w: Vec<f64>,
    pub gp_b: Vec<f64>,
    pub gc_w: Vec<f64>,
    pub gc_b: Vec<f64>,
    pub fb: Vec<f64>,
    pub fp: Vec<f64>,
    pub fc: Vec<f64>,
}

fn normal_vec(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

impl GateParams {
    pub fn init(dims: GateDims, input: GateInput, rng: &mut impl Rng) -> Self {
        let (m, d) = (dims.c_model, input.dim());
        Self {
            input,
            dims,
            gp_w: normal_vec(m * d, GATE_INIT_STD, rng),
            gp_b: vec![0.0; m],
            gc_w: normal_vec(m * d, GATE_INIT_STD, rng),
            gc_b: vec![0.0; m],
            fb: normal_vec(m * dims.c_bg, (dims.c_bg as f64).powf(-0.5), rng),
            fp: normal_vec(m * dims.c_pose, (dims.c_pose as f64).powf(-0.5), rng),
            fc: normal_vec(m * dims.c_char, (dims.c_char as f64).powf(-0.5), rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            input: self.input,
            dims: self.dims,
            gp_w: vec![0.0; self.gp_w.len()],
            gp_b: vec![0.0; self.gp_b.len()],
            gc_w: vec![0.0; self.gc_w.len()],
            gc_b: vec![0.0; self.gc_b.len()],
            fb: vec![0.0; self.fb.len()],
            fp: vec![0.0; self.fp.len()],
            fc: vec![0.0; self.fc.len()],
        }
    }

    fn gate_preact(w: &[f64], b: &[f64], emb: &[f64]) -> Vec<f64> {
        b.iter()
            .enumerate()
            .map(|(m, bias)| bias + w[m * emb.len()..(m + 1) * emb.len()].iter().zip(emb).map(|(a, e)| a * e).sum::<f64>())
            .collect()
    }

    /// `(tanh(g_p(emb(t))), tanh(g_c(emb(t))))`, one value per model channel.
    pub fn gates(&self, t: usize) -> (Vec<f64>, Vec<f64>) {
        let emb = self.input.embed(t);
        let gp = Self::gate_preact(&self.gp_w, &self.gp_b, &emb).into_iter().map(f64::tanh).collect();
        let gc = Self::gate_preact(&self.gc_w, &self.gc_b, &emb).into_iter().map(f64::tanh).collect();
        (gp, gc)
    }

    pub fn is_finite(&self) -> bool {
        [&self.gp_w, &self.gp_b, &self.gc_w, &self.gc_b, &self.fb, &self.fp, &self.fc]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// `out[m] += Σ_k w[m, k]·input[k]` over whole channels.
fn pointwise(w: &[f64], input: &[f64], c_in: usize, c_out: usize, n: usize, scale: Option<&[f64]>, out: &mut [f64]) {
    for m in 0..c_out {
        let g = scale.map_or(1.0, |s| s[m]);
        if g == 0.0 {
            continue;
        }
        let dst = &mut out[m * n..(m + 1) * n];
        for k in 0..c_in {
            let a = g * w[m * c_in + k];
            if a == 0.0 {
                continue;
            }
            for (d, x) in dst.iter_mut().zip(&input[k * n..(k + 1) * n]) {
                *d += a * x;
            }
        }
    }
}

/// Diffusion noise schedule; `alpha_bar[t−1]` is `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Accepts `α_t ∈ (0, 1]`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::invalid("every alpha must lie in (0, 1]"));
        }
        let mut acc = 1.0;
        let alpha_bar = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self { alphas, alpha_bar })
    }

    /// `ᾱ_t` falling linearly from `1 − 1/T` at `t = 1` to `end` at `t = T`.
    pub fn linear(steps: usize, end: f64) -> Result<Self> {
        if steps < 2 || !(end > 0.0 && end < 1.0 - 1.0 / steps as f64) {
            return Err(Error::invalid("need at least 2 steps and 0 < end < 1 − 1/T"));
        }
        let start = 1.0 - 1.0 / steps as f64;
        let bars: Vec<f64> = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alphas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &b in &bars {
            alphas.push(b / prev);
            prev = b;
        }
        Ok(Self { alphas, alpha_bar: bars })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DIFFUSION_STEPS, 1e-3).expect("valid default schedule")
    }
}

/// `x_t' = f_b([β, x_t]) + tanh(g_p(e))·f_p(γ) + tanh(g_c(e))·f_c(φ)`.
pub fn gated_inject(
    x_t: &LatentVideo,
    beta: &LatentVideo,
    gamma: &LatentVideo,
    phi: &LatentVideo,
    t: usize,
    params: &GateParams,
    sched: &DiffusionSchedule,
) -> Result<LatentVideo> {
    sched.check(t)?;
    let bg = concat_channels(&[beta, x_t], Role::Background)?;
    check_inputs(&bg, gamma, phi, &params.dims)?;
    let (gp, gc) = params.gates(t);
    Ok(inject_with_gates(&bg, gamma, phi, &gp, &gc, params))
}

fn check_inputs(bg: &LatentVideo, gamma: &LatentVideo, phi: &LatentVideo, dims: &GateDims) -> Result<()> {
    check_extent(bg, gamma)?;
    check_extent(bg, phi)?;
    if bg.c != dims.c_bg || gamma.c != dims.c_pose || phi.c != dims.c_char {
        return Err(Error::shape(format!(
            "channels ({}, {}, {}) do not match gate inputs ({}, {}, {})",
            bg.c, gamma.c, phi.c, dims.c_bg, dims.c_pose, dims.c_char
        )));
    }
    Ok(())
}

fn inject_with_gates(bg: &LatentVideo, gamma: &LatentVideo, phi: &LatentVideo, gp: &[f64], gc: &[f64], p: &GateParams) -> LatentVideo {
    let d = &p.dims;
    let n = bg.voxels();
    let mut out = LatentVideo::zeros(Role::Injected, d.c_model, bg.t, bg.h, bg.w);
    pointwise(&p.fb, &bg.data, d.c_bg, d.c_model, n, None, &mut out.data);
    pointwise(&p.fp, &gamma.data, d.c_pose, d.c_model, n, Some(gp), &mut out.data);
    pointwise(&p.fc, &phi.data, d.c_char, d.c_model, n, Some(gc), &mut out.data);
    out
}

/// `√ᾱ_t·x_0 + √(1 − ᾱ_t)·noise`
pub fn forward_diffuse(x0: &LatentVideo, t: usize, sched: &DiffusionSchedule, noise: &LatentVideo) -> Result<LatentVideo> {
    sched.check(t)?;
    mix(x0, noise, sched.alpha_bar(t))
}

/// One Markov step `√α_t·x_{t−1} + √(1 − α_t)·noise`.
pub fn diffuse_step(x_prev: &LatentVideo, t: usize, sched: &DiffusionSchedule, noise: &LatentVideo) -> Result<LatentVideo> {
    sched.check(t)?;
    mix(x_prev, noise, sched.alphas[t - 1])
}

fn mix(x: &LatentVideo, noise: &LatentVideo, keep: f64) -> Result<LatentVideo> {
    if x.data.len() != noise.data.len() || !x.same_extent(noise) {
        return Err(Error::shape("noise does not match the latent"));
    }
    let (a, b) = (keep.sqrt(), (1.0 - keep).sqrt());
    let data = x.data.iter().zip(&noise.data).map(|(x, e)| a * x + b * e).collect();
    LatentVideo::from_data(Role::Noise, x.c, x.t, x.h, x.w, data)
}

/// Broadcasts a one-channel mask (`> 0.5` marks masked voxels) over `c`
/// channels.
fn broadcast_mask(mask: &LatentVideo, like: &LatentVideo) -> Result<Vec<bool>> {
    check_extent(mask, like)?;
    if mask.c != 1 {
        return Err(Error::shape(format!("mask latent has {} channels, expected 1", mask.c)));
    }
    Ok((0..like.c).flat_map(|_| mask.data.iter().map(|m| *m > 0.5)).collect())
}

/// Mask-reweighted mean squared error.
pub fn denoise_loss(predicted: &LatentVideo, truth: &LatentVideo, mask: &LatentVideo, weights: &LossWeights) -> Result<f64> {
    if predicted.data.len() != truth.data.len() || !predicted.same_extent(truth) {
        return Err(Error::shape("prediction and target differ in shape"));
    }
    let bits = broadcast_mask(mask, predicted)?;
    let sq: Vec<f64> = predicted.data.iter().zip(&truth.data).map(|(p, t)| (p - t) * (p - t)).collect();
    reweight_flat(&sq, &bits, weights)
}

fn denoise_loss_grad(predicted: &LatentVideo, truth: &LatentVideo, bits: &[bool], weights: &LossWeights) -> Vec<f64> {
    let inv = 2.0 / predicted.data.len() as f64;
    predicted
        .data
        .iter()
        .zip(&truth.data)
        .zip(bits)
        .map(|((p, t), &m)| inv * weights.weight(m) * (p - t))
        .collect()
}

type Offset = (isize, isize, isize);

fn kernel_offsets() -> impl Iterator<Item = (usize, Offset)> {
    (0..27).map(|k| (k, ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1)))
}

fn valid_range(len: usize, off: isize) -> std::ops::Range<usize> {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off.max(0)).max(lo as isize) as usize;
    lo..hi.min(len)
}

/// Visits aligned `(out_row, in_row, len)` runs of the 3×3×3 stencil at
/// offset `off` with zero padding.
fn for_runs(dims: (usize, usize, usize), off: Offset, mut f: impl FnMut(usize, usize, usize)) {
    let (t, h, w) = dims;
    let xs = valid_range(w, off.2);
    if xs.is_empty() {
        return;
    }
    for ti in valid_range(t, off.0) {
        for y in valid_range(h, off.1) {
            let o = (ti * h + y) * w + xs.start;
            let i = (((ti as isize + off.0) as usize * h) + (y as isize + off.1) as usize) * w + (xs.start as isize + off.2) as usize;
            f(o, i, xs.len());
        }
    }
}

/// Zero-padded 3×3×3 convolution; weights are `c_out × c_in × 27`.
fn conv3d(input: &[f64], c_in: usize, dims: (usize, usize, usize), w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let n = dims.0 * dims.1 * dims.2;
    let mut out = vec![0.0; c_out * n];
    out.par_chunks_mut(n).enumerate().for_each(|(o, dst)| {
        dst.iter_mut().for_each(|x| *x = b[o]);
        for i in 0..c_in {
            let src = &input[i * n..(i + 1) * n];
            for (k, off) in kernel_offsets() {
                let a = w[(o * c_in + i) * 27 + k];
                if a == 0.0 {
                    continue;
                }
                for_runs(dims, off, |po, pi, len| {
                    for (d, s) in dst[po..po + len].iter_mut().zip(&src[pi..pi + len]) {
                        *d += a * s;
                    }
                });
            }
        }
    });
    out
}

/// Returns `(∂w, ∂b, ∂input)` for [`conv3d`].
fn conv3d_backward(
    input: &[f64],
    c_in: usize,
    dims: (usize, usize, usize),
    w: &[f64],
    c_out: usize,
    d_out: &[f64],
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = dims.0 * dims.1 * dims.2;
    let d_b: Vec<f64> = (0..c_out).map(|o| d_out[o * n..(o + 1) * n].iter().sum()).collect();
    let d_w: Vec<f64> = (0..c_out * c_in)
        .into_par_iter()
        .flat_map_iter(|oi| {
            let (o, i) = (oi / c_in, oi % c_in);
            let (g, src) = (&d_out[o * n..(o + 1) * n], &input[i * n..(i + 1) * n]);
            kernel_offsets()
                .map(|(_, off)| {
                    let mut s = 0.0;
                    for_runs(dims, off, |po, pi, len| {
                        s += g[po..po + len].iter().zip(&src[pi..pi + len]).map(|(a, b)| a * b).sum::<f64>();
                    });
                    s
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut d_in = vec![0.0; if want_input { c_in * n } else { 0 }];
    if want_input {
        d_in.par_chunks_mut(n).enumerate().for_each(|(i, dst)| {
            for o in 0..c_out {
                let g = &d_out[o * n..(o + 1) * n];
                for (k, off) in kernel_offsets() {
                    let a = w[(o * c_in + i) * 27 + k];
                    if a == 0.0 {
                        continue;
                    }
                    for_runs(dims, off, |po, pi, len| {
                        for (d, s) in dst[pi..pi + len].iter_mut().zip(&g[po..po + len]) {
                            *d += a * s;
                        }
                    });
                }
            }
        });
    }
    (d_w, d_b, d_in)
}

/// `conv3d → tanh → conv3d`, mapping `c_in` to `c_out` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub c_in: usize,
    pub c_hidden: usize,
    pub c_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

struct DenoiserCache {
    hidden: Vec<f64>,
}

impl ToyDenoiser {
    pub fn init(c_in: usize, c_hidden: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            c_in,
            c_hidden,
            c_out,
            w1: normal_vec(c_hidden * c_in * 27, (c_in as f64 * 27.0).powf(-0.5), rng),
            b1: vec![0.0; c_hidden],
            w2: normal_vec(c_out * c_hidden * 27, (c_hidden as f64 * 27.0).powf(-0.5), rng),
            b2: vec![0.0; c_out],
        }
    }

    pub fn zeros(c_in: usize, c_hidden: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_hidden,
            c_out,
            w1: vec![0.0; c_hidden * c_in * 27],
            b1: vec![0.0; c_hidden],
            w2: vec![0.0; c_out * c_hidden * 27],
            b2: vec![0.0; c_out],
        }
    }

    fn forward_cached(&self, x: &LatentVideo) -> Result<(LatentVideo, DenoiserCache)> {
        if x.c != self.c_in {
            return Err(Error::shape(format!("denoiser expects {} channels, got {}", self.c_in, x.c)));
        }
        let dims = (x.t, x.h, x.w);
        let mut hidden = conv3d(&x.data, self.c_in, dims, &self.w1, &self.b1, self.c_hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let out = conv3d(&hidden, self.c_hidden, dims, &self.w2, &self.b2, self.c_out);
        let pred = LatentVideo::from_data(Role::Noise, self.c_out, x.t, x.h, x.w, out)?;
        Ok((pred, DenoiserCache { hidden }))
    }

    /// Predicted noise for the injected latent.
    pub fn forward(&self, x: &LatentVideo) -> Result<LatentVideo> {
        Ok(self.forward_cached(x)?.0)
    }

    fn backward(&self, x: &LatentVideo, cache: &DenoiserCache, d_out: &[f64]) -> (ToyDenoiser, Vec<f64>) {
        let dims = (x.t, x.h, x.w);
        let (w2, b2, mut d_hidden) = conv3d_backward(&cache.hidden, self.c_hidden, dims, &self.w2, self.c_out, d_out, true);
        for (d, h) in d_hidden.iter_mut().zip(&cache.hidden) {
            *d *= 1.0 - h * h;
        }
        let (w1, b1, d_x) = conv3d_backward(&x.data, self.c_in, dims, &self.w1, self.c_hidden, &d_hidden, true);
        (
            ToyDenoiser {
                c_in: self.c_in,
                c_hidden: self.c_hidden,
                c_out: self.c_out,
                w1,
                b1,
                w2,
                b2,
            },
            d_x,
        )
    }
}

/// Gates, projections and denoiser trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub gates: GateParams,
    pub denoiser: ToyDenoiser,
}

/// Size of a toy setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDims {
    pub c_latent: usize,
    pub c_model: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self {
            c_latent: C_LATENT,
            c_model: C_MODEL,
            t: 4,
            h: 16,
            w: 16,
        }
    }
}

impl ToyModel {
    pub fn init(dims: &ToyDims, input: GateInput, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gd = GateDims::standard(dims.c_latent, dims.c_model);
        Self {
            gates: GateParams::init(gd, input, &mut rng),
            denoiser: ToyDenoiser::init(dims.c_model, dims.c_model, dims.c_latent, &mut rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gates: self.gates.zeros_like(),
            denoiser: ToyDenoiser::zeros(self.denoiser.c_in, self.denoiser.c_hidden, self.denoiser.c_out),
        }
    }

    /// Every parameter tensor with its name and shape, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &Vec<f64>)> {
        let (g, d) = (&self.gates, &self.denoiser);
        let (m, e) = (g.dims.c_model, g.input.dim());
        vec![
            ("gate.pose.weight", vec![m, e], &g.gp_w),
            ("gate.pose.bias", vec![m], &g.gp_b),
            ("gate.char.weight", vec![m, e], &g.gc_w),
            ("gate.char.bias", vec![m], &g.gc_b),
            ("proj.background", vec![m, g.dims.c_bg], &g.fb),
            ("proj.pose", vec![m, g.dims.c_pose], &g.fp),
            ("proj.char", vec![m, g.dims.c_char], &g.fc),
            ("denoiser.conv1.weight", vec![d.c_hidden, d.c_in, 3, 3, 3], &d.w1),
            ("denoiser.conv1.bias", vec![d.c_hidden], &d.b1),
            ("denoiser.conv2.weight", vec![d.c_out, d.c_hidden, 3, 3, 3], &d.w2),
            ("denoiser.conv2.bias", vec![d.c_out], &d.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let (g, d) = (&mut self.gates, &mut self.denoiser);
        vec![
            &mut g.gp_w,
            &mut g.gp_b,
            &mut g.gc_w,
            &mut g.gc_b,
            &mut g.fb,
            &mut g.fp,
            &mut g.fc,
            &mut d.w1,
            &mut d.b1,
            &mut d.w2,
            &mut d.b2,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    fn axpy(&mut self, k: f64, other: &ToyModel) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|t| t.2.clone()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, x) in dst.iter_mut().zip(s) {
                *d += k * x;
            }
        }
    }

    /// Loss of one sample and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, s: &InpaintSample, weights: &LossWeights, sched: &DiffusionSchedule) -> Result<(f64, ToyModel)> {
        sched.check(s.t)?;
        let x_t = forward_diffuse(&s.x0, s.t, sched, &s.noise)?;
        let bg = concat_channels(&[&s.coarse, &s.mask, &x_t], Role::Background)?;
        let p = &self.gates;
        check_inputs(&bg, &s.gamma, &s.phi, &p.dims)?;
        let emb = p.input.embed(s.t);
        let gp: Vec<f64> = GateParams::gate_preact(&p.gp_w, &p.gp_b, &emb).into_iter().map(f64::tanh).collect();
        let gc: Vec<f64> = GateParams::gate_preact(&p.gc_w, &p.gc_b, &emb).into_iter().map(f64::tanh).collect();
        let injected = inject_with_gates(&bg, &s.gamma, &s.phi, &gp, &gc, p);
        let (pred, cache) = self.denoiser.forward_cached(&injected)?;
        let bits = broadcast_mask(&s.mask, &pred)?;
        let loss = denoise_loss(&pred, &s.noise, &s.mask, weights)?;
        let d_pred = denoise_loss_grad(&pred, &s.noise, &bits, weights);
        let (d_den, d_inj) = self.denoiser.backward(&injected, &cache, &d_pred);

        let mut g = self.gates.zeros_like();
        let d = &p.dims;
        let n = bg.voxels();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for m in 0..d.c_model {
            let dx = &d_inj[m * n..(m + 1) * n];
            for k in 0..d.c_bg {
                g.fb[m * d.c_bg + k] = dot(dx, bg.channel(k));
            }
            let mut d_gp = 0.0;
            for k in 0..d.c_pose {
                let c = dot(dx, s.gamma.channel(k));
                g.fp[m * d.c_pose + k] = gp[m] * c;
                d_gp += p.fp[m * d.c_pose + k] * c;
            }
            let mut d_gc = 0.0;
            for k in 0..d.c_char {
                let c = dot(dx, s.phi.channel(k));
                g.fc[m * d.c_char + k] = gc[m] * c;
                d_gc += p.fc[m * d.c_char + k] * c;
            }
            let zp = d_gp * (1.0 - gp[m] * gp[m]);
            let zc = d_gc * (1.0 - gc[m] * gc[m]);
            g.gp_b[m] = zp;
            g.gc_b[m] = zc;
            for (j, e) in emb.iter().enumerate() {
                g.gp_w[m * emb.len() + j] = zp * e;
                g.gc_w[m * emb.len() + j] = zc * e;
            }
        }
        Ok((
            loss,
            ToyModel {
                gates: g,
                denoiser: d_den,
            },
        ))
    }

    pub fn loss(&self, s: &InpaintSample, weights: &LossWeights, sched: &DiffusionSchedule) -> Result<f64> {
        let x_t = forward_diffuse(&s.x0, s.t, sched, &s.noise)?;
        let injected = gated_inject(&x_t, &concat_channels(&[&s.coarse, &s.mask], Role::Background)?, &s.gamma, &s.phi, s.t, &self.gates, sched)?;
        denoise_loss(&self.denoiser.forward(&injected)?, &s.noise, &s.mask, weights)
    }

    /// Mean loss and gradient over `samples`, reduced in sample order.
    pub fn batch_loss_and_grad(
        &self,
        samples: &[InpaintSample],
        weights: &LossWeights,
        sched: &DiffusionSchedule,
    ) -> Result<(f64, ToyModel)> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let parts: Vec<(f64, ToyModel)> = samples
            .par_iter()
            .map(|s| self.loss_and_grad(s, weights, sched))
            .collect::<Result<_>>()?;
        let k = 1.0 / samples.len() as f64;
        let mut grad = self.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += k * l;
            grad.axpy(k, g);
        }
        Ok((loss, grad))
    }
}

/// One training example: clean latent, conditioning and diffusion draw.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintSample {
    pub x0: LatentVideo,
    /// Degraded background seen by the model.
    pub coarse: LatentVideo,
    /// One channel; `1` inside the character region.
    pub mask: LatentVideo,
    pub gamma: LatentVideo,
    pub phi: LatentVideo,
    pub t: usize,
    pub noise: LatentVideo,
}

impl InpaintSample {
    /// Zeroes the pose and character latents, as guidance dropout does.
    pub fn drop_guidance(&mut self) {
        self.gamma.data.iter_mut().for_each(|x| *x = 0.0);
        self.phi.data.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Synthetic inpainting task: smooth latents with a rectangular character
/// region, a noisy coarse background that is blank inside the region, and
/// pose and character latents confined to it.
pub fn synthetic_task(n: usize, dims: &ToyDims, sched: &DiffusionSchedule, seed: u64) -> Vec<InpaintSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, t, h, w) = (dims.c_latent, dims.t, dims.h, dims.w);
    (0..n)
        .map(|_| {
            let freqs: Vec<[f64; 4]> = (0..c)
                .map(|_| [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.0..6.28), rng.random_range(0.3..1.0)])
                .collect();
            let mut x0 = LatentVideo::zeros(Role::Other, c, t, h, w);
            let mut mask = LatentVideo::zeros(Role::Mask, 1, t, h, w);
            let (mw, mh) = (rng.random_range(2..=w / 2), rng.random_range(2..=h / 2));
            let (mx, my) = (rng.random_range(0..=w - mw), rng.random_range(0..=h - mh));
            let nv = t * h * w;
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let v = (ti * h + y) * w + x;
                        for (ch, f) in freqs.iter().enumerate() {
                            x0.data[ch * nv + v] = f[3] * (f[0] * x as f64 + f[1] * y as f64 + 0.3 * ti as f64 + f[2]).sin();
                        }
                        if (mx..mx + mw).contains(&x) && (my..my + mh).contains(&y) {
                            mask.data[v] = 1.0;
                        }
                    }
                }
            }
            let mut coarse = x0.clone();
            let mut gamma = LatentVideo::zeros(Role::Pose, c, t, h, w);
            let mut phi = LatentVideo::zeros(Role::Character, c, t, h, w);
            let char_code: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            for ch in 0..c {
                for v in 0..nv {
                    let inside = mask.data[v] > 0.5;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    coarse.data[ch * nv + v] = if inside { 0.0 } else { x0.data[ch * nv + v] + 0.05 * z };
                    if inside {
                        gamma.data[ch * nv + v] = x0.data[ch * nv + v];
                        phi.data[ch * nv + v] = char_code[ch];
                    }
                }
            }
            let noise = LatentVideo::random(Role::Noise, c, t, h, w, &mut rng);
            InpaintSample {
                x0,
                coarse: coarse.with_role(Role::Background),
                mask,
                gamma,
                phi,
                t: rng.random_range(1..=sched.steps()),
                noise,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Probability of zeroing the pose and character latents of a sample.
    pub guidance_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.5,
            guidance_dropout: 0.1,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent; returns the loss before every step and the
/// final loss.
pub fn train(
    model: &mut ToyModel,
    samples: &[InpaintSample],
    weights: &LossWeights,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let batch: Vec<InpaintSample> = if cfg.guidance_dropout > 0.0 && step < cfg.steps {
            samples
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    if rng.random::<f64>() < cfg.guidance_dropout {
                        s.drop_guidance();
                    }
                    s
                })
                .collect()
        } else {
            samples.to_vec()
        };
        let (loss, grad) = model.batch_loss_and_grad(&batch, weights, sched)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: step, value: loss });
        }
        losses.push(loss);
        if step < cfg.steps {
            model.axpy(-cfg.lr, &grad);
        }
    }
    Ok(losses)
}

/// Mean pose and character gate per denoising step, from `t = T` down to 1.
pub fn gate_trace(params: &GateParams, sched: &DiffusionSchedule, steps: usize) -> Vec<(usize, f64, f64)> {
    let total = sched.steps();
    (0..steps)
        .map(|i| {
            let t = total - (i * total / steps.max(1)).min(total - 1);
            let (gp, gc) = params.gates(t);
            let mean = |g: &[f64]| g.iter().sum::<f64>() / g.len() as f64;
            (i + 1, mean(&gp), mean(&gc))
        })
        .collect()
}

pub fn write_gate_csv(rows: &[(usize, f64, f64)], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,mean_gate_pose,mean_gate_char")?;
    for (s, p, c) in rows {
        writeln!(out, "{s},{p},{c}")?;
    }
    Ok(())
}

/// Largest relative gap between analytic and central-difference gradients
/// over every parameter; gaps are measured relative to
/// `max(|analytic|, |numeric|, 1e-6)`.
pub fn gradcheck(model: &ToyModel, sample: &InpaintSample, weights: &LossWeights, sched: &DiffusionSchedule, h: f64) -> Result<f64> {
    let (_, grad) = model.loss_and_grad(sample, weights, sched)?;
    let analytic: Vec<f64> = grad.tensors().into_iter().flat_map(|t| t.2.clone()).collect();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.2.len()).collect();
    for (tensor, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = probe.tensors_mut()[tensor][j];
            probe.tensors_mut()[tensor][j] = orig + h;
            let up = probe.loss(sample, weights, sched)?;
            probe.tensors_mut()[tensor][j] = orig - h;
            let down = probe.loss(sample, weights, sched)?;
            probe.tensors_mut()[tensor][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            flat += 1;
        }
    }
    Ok(worst)
}

const MAGIC: &[u8; 4] = b"DDG1";

/// Named float32 tensor as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

pub fn write_checkpoint(tensors: &[NamedTensor], mut out: impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.name.len() as u32).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for d in &t.dims {
            out.write_all(&d.to_le_bytes())?;
        }
        for x in &t.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> std::result::Result<Vec<NamedTensor>, String> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(pos..pos + n).ok_or("truncated checkpoint")?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err("not a DDG1 checkpoint".into());
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let count = u32_at(take(4)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let rank = u32_at(take(4)?) as usize;
        let dims = (0..rank).map(|_| take(4).map(u32_at)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize)).ok_or("tensor too large")?;
        let raw = take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}

impl ToyModel {
    pub fn to_checkpoint(&self) -> Vec<NamedTensor> {
        self.tensors()
            .into_iter()
            .map(|(name, dims, data)| NamedTensor {
                name: name.into(),
                dims: dims.iter().map(|&d| d as u32).collect(),
                data: data.iter().map(|&x| x as f32).collect(),
            })
            .collect()
    }

    /// Overwrites the parameters from checkpoint tensors of matching names
    /// and shapes.
    pub fn load_checkpoint(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let layout: Vec<(String, Vec<u32>)> = self
            .tensors()
            .into_iter()
            .map(|(n, d, _)| (n.to_string(), d.iter().map(|&x| x as u32).collect()))
            .collect();
        if tensors.len() != layout.len() {
            return Err(Error::shape(format!("checkpoint has {} tensors, model has {}", tensors.len(), layout.len())));
        }
        for ((name, dims), t) in layout.iter().zip(tensors) {
            if &t.name != name || &t.dims != dims {
                return Err(Error::shape(format!("checkpoint tensor {} {:?} where {name} {dims:?} was expected", t.name, t.dims)));
            }
        }
        for (dst, t) in self.tensors_mut().into_iter().zip(tensors) {
            *dst = t.data.iter().map(|&x| x as f64).collect();
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        write_checkpoint(&self.to_checkpoint(), &mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_checkpoint(std::io::BufReader::new(file)).map_err(|m| Error::format(path, m))?;
        self.load_checkpoint(&tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> (ToyModel, ToyDims) {
        let dims = ToyDims {
            c_latent: 2,
            c_model: 3,
            t: 2,
            h: 4,
            w: 5,
        };
        let mut m = ToyModel::init(&dims, GateInput::Sinusoidal, seed);
        // Push the gates away from zero so their gradients are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        m.gates.gp_w = normal_vec(m.gates.gp_w.len(), 0.5, &mut rng);
        m.gates.gc_b = normal_vec(m.gates.gc_b.len(), 0.5, &mut rng);
        m.denoiser.b1 = normal_vec(m.denoiser.b1.len(), 0.1, &mut rng);
        (m, dims)
    }

    #[test]
    fn encode_decode_identity_factors() {
        let lift = ChannelLift::standard(C_LATENT).unwrap();
        let frames: Vec<RgbImage> = (0..3)
            .map(|i| RgbImage::from_fn(6, 4, |u, v| [u as f64 / 6.0, v as f64 / 4.0, i as f64 / 3.0]))
            .collect();
        let z = toy_encode(&frames, 1, 1, &lift).unwrap();
        assert_eq!((z.c, z.t, z.h, z.w), (C_LATENT, 3, 4, 6));
        let back = toy_decode(&z, 1, 1, &lift).unwrap();
        for (a, b) in frames.iter().zip(&back) {
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((0..3).all(|k| (p[k] - q[k]).abs() < 1e-7));
            }
        }
    }

    #[test]
    fn constant_video_round_trips() {
        let lift = ChannelLift::standard(4).unwrap();
        let frames = vec![RgbImage::filled(8, 8, [0.2, 0.4, 0.6]); 4];
        let z = toy_encode(&frames, 4, 2, &lift).unwrap();
        for ch in 0..4 {
            assert!(z.channel(ch).iter().all(|v| (v - z.channel(ch)[0]).abs() < 1e-12));
        }
        let back = toy_decode(&z, 4, 2, &lift).unwrap();
        assert_eq!(back.len(), 4);
        assert!(back.iter().flat_map(|f| &f.data).all(|p| (p[0] - 0.2).abs() < 1e-9 && (p[2] - 0.6).abs() < 1e-9));
    }

    #[test]
    fn decode_encode_is_block_mean() {
        let lift = ChannelLift::standard(C_LATENT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<RgbImage> = (0..8)
            .map(|_| RgbImage::from_fn(8, 8, |_, _| [rng.random(), rng.random(), rng.random()]))
            .collect();
        let back = toy_decode(&toy_encode(&frames, 2, 2, &lift).unwrap(), 2, 2, &lift).unwrap();
        for t in 0..8 {
            for v in 0..8 {
                for u in 0..8 {
                    let mut mean = [0.0; 3];
                    for f in &frames[t / 2 * 2..t / 2 * 2 + 2] {
                        for vv in v / 2 * 2..v / 2 * 2 + 2 {
                            for uu in u / 2 * 2..u / 2 * 2 + 2 {
                                for k in 0..3 {
                                    mean[k] += f.get(uu, vv)[k] / 8.0;
                                }
                            }
                        }
                    }
                    let got = back[t].get(u, v);
                    assert!((0..3).all(|k| (got[k] - mean[k]).abs() < 1e-6));
                }
            }
        }
        assert!(toy_encode(&frames[..3], 2, 2, &lift).is_err());
        assert!(toy_encode(&frames, 3, 1, &lift).is_err());
    }

    #[test]
    fn background_assembly_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coarse = LatentVideo::random(Role::Background, 4, 2, 3, 3, &mut rng);
        let mask = LatentVideo::random(Role::Mask, 1, 2, 3, 3, &mut rng);
        let noise = LatentVideo::random(Role::Noise, 4, 2, 3, 3, &mut rng);
        let out = assemble_background(&coarse, &mask, &noise).unwrap();
        assert_eq!(out.c, 9);
        assert_eq!(out.slice_channels(0, 4).data, coarse.data);
        assert_eq!(out.slice_channels(4, 5).data, mask.data);
        assert_eq!(out.slice_channels(5, 9).data, noise.data);
        let bad = LatentVideo::zeros(Role::Mask, 1, 2, 3, 4);
        assert!(assemble_background(&coarse, &bad, &noise).is_err());
    }

    fn inputs(dims: &ToyDims, rng: &mut ChaCha8Rng) -> (LatentVideo, LatentVideo, LatentVideo, LatentVideo) {
        let (c, t, h, w) = (dims.c_latent, dims.t, dims.h, dims.w);
        (
            LatentVideo::random(Role::Noise, c, t, h, w, rng),
            LatentVideo::random(Role::Background, c + 1, t, h, w, rng),
            LatentVideo::random(Role::Pose, c, t, h, w, rng),
            LatentVideo::random(Role::Character, c, t, h, w, rng),
        )
    }

    #[test]
    fn inject_matches_scalar_loop() {
        let (m, dims) = small_model(5);
        let sched = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, beta, gamma, phi) = inputs(&dims, &mut rng);
        let t = 17;
        let out = gated_inject(&x, &beta, &gamma, &phi, t, &m.gates, &sched).unwrap();
        let p = &m.gates;
        let emb = sinusoidal_embedding(t as f64, EMBED_DIM);
        let n = x.voxels();
        for mo in 0..dims.c_model {
            let mut zp = p.gp_b[mo];
            let mut zc = p.gc_b[mo];
            for j in 0..EMBED_DIM {
                zp += p.gp_w[mo * EMBED_DIM + j] * emb[j];
                zc += p.gc_w[mo * EMBED_DIM + j] * emb[j];
            }
            for v in 0..n {
                let mut fb = 0.0;
                for k in 0..beta.c {
                    fb += p.fb[mo * p.dims.c_bg + k] * beta.data[k * n + v];
                }
                for k in 0..x.c {
                    fb += p.fb[mo * p.dims.c_bg + beta.c + k] * x.data[k * n + v];
                }
                let mut fp = 0.0;
                let mut fc = 0.0;
                for k in 0..gamma.c {
                    fp += p.fp[mo * gamma.c + k] * gamma.data[k * n + v];
                    fc += p.fc[mo * phi.c + k] * phi.data[k * n + v];
                }
                let want = fb + zp.tanh() * fp + zc.tanh() * fc;
                assert!((out.data[mo * n + v] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_gates_and_zero_guidance_reduce_to_background() {
        let (mut m, dims) = small_model(2);
        let sched = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, beta, gamma, phi) = inputs(&dims, &mut rng);
        let zero_g = LatentVideo::zeros(Role::Pose, gamma.c, dims.t, dims.h, dims.w);
        let zero_p = LatentVideo::zeros(Role::Character, phi.c, dims.t, dims.h, dims.w);
        let bg_only = gated_inject(&x, &beta, &zero_g, &zero_p, 3, &m.gates, &sched).unwrap();
        let bg = concat_channels(&[&beta, &x], Role::Background).unwrap();
        let mut want = vec![0.0; dims.c_model * bg.voxels()];
        pointwise(&m.gates.fb, &bg.data, bg.c, dims.c_model, bg.voxels(), None, &mut want);
        assert_eq!(bg_only.data, want);
        for v in [&mut m.gates.gp_w, &mut m.gates.gp_b, &mut m.gates.gc_w, &mut m.gates.gc_b] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        let gated_off = gated_inject(&x, &beta, &gamma, &phi, 30, &m.gates, &sched).unwrap();
        assert_eq!(gated_off.data, want);
    }

    #[test]
    fn inject_is_linear_in_guidance() {
        let (m, dims) = small_model(8);
        let sched = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (x, beta, g1, phi) = inputs(&dims, &mut rng);
        let g2 = LatentVideo::random(Role::Pose, g1.c, dims.t, dims.h, dims.w, &mut rng);
        let (a, b) = (0.7, -1.9);
        let mix = LatentVideo {
            data: g1.data.iter().zip(&g2.data).map(|(p, q)| a * p + b * q).collect(),
            ..g1.clone()
        };
        let zero = LatentVideo::zeros(Role::Pose, g1.c, dims.t, dims.h, dims.w);
        let f = |g: &LatentVideo| gated_inject(&x, &beta, g, &phi, 11, &m.gates, &sched).unwrap().data;
        let (y0, y1, y2, ym) = (f(&zero), f(&g1), f(&g2), f(&mix));
        for i in 0..ym.len() {
            let want = y0[i] + a * (y1[i] - y0[i]) + b * (y2[i] - y0[i]);
            assert!((ym[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn gates_stay_inside_unit_interval() {
        let (mut m, _) = small_model(1);
        m.gates.gp_b.iter_mut().for_each(|b| *b = 30.0);
        for t in 1..=50 {
            let (gp, gc) = m.gates.gates(t);
            assert!(gp.iter().chain(&gc).all(|g| g.abs() <= 1.0));
        }
        let trace = gate_trace(&m.gates, &DiffusionSchedule::default(), 50);
        assert_eq!(trace.len(), 50);
        assert_eq!(trace[0].0, 1);
        let mut csv = Vec::new();
        write_gate_csv(&trace, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 51);
    }

    #[test]
    fn raw_scalar_gate_input() {
        assert_eq!(GateInput::RawScalar.embed(7), vec![7.0]);
        let e = sinusoidal_embedding(0.0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn schedule_and_diffusion_limits() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 50);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alphas.iter().all(|a| *a > 0.0 && *a < 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = LatentVideo::random(Role::Other, 2, 1, 3, 3, &mut rng);
        let noise = LatentVideo::random(Role::Noise, 2, 1, 3, 3, &mut rng);
        let ones = DiffusionSchedule::from_alphas(vec![1.0; 10]).unwrap();
        assert_eq!(forward_diffuse(&x0, 10, &ones, &noise).unwrap().data, x0.data);
        let tiny = DiffusionSchedule::from_alphas(vec![1e-12; 3]).unwrap();
        let far = forward_diffuse(&x0, 3, &tiny, &noise).unwrap();
        assert!(far.data.iter().zip(&noise.data).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(forward_diffuse(&x0, 0, &s, &noise).is_err());
        assert!(forward_diffuse(&x0, 51, &s, &noise).is_err());
    }

    #[test]
    fn denoise_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = LatentVideo::random(Role::Noise, 3, 2, 4, 4, &mut rng);
        let mask = LatentVideo::zeros(Role::Mask, 1, 2, 4, 4);
        let w = LossWeights::default();
        assert_eq!(denoise_loss(&a, &a, &mask, &w).unwrap(), 0.0);
        let shifted = LatentVideo {
            data: a.data.iter().map(|x| x + 1.0).collect(),
            ..a.clone()
        };
        assert!((denoise_loss(&shifted, &a, &mask, &w).unwrap() - 1.0).abs() < 1e-12);
        let b = LatentVideo::random(Role::Noise, 3, 2, 4, 4, &mut rng);
        let mut m = mask.clone();
        m.data.iter_mut().step_by(3).for_each(|x| *x = 1.0);
        let w2 = LossWeights { w_masked: 2.5, w_background: 0.5 };
        let mut oracle = 0.0;
        for i in 0..a.data.len() {
            let wt = if m.data[i % m.data.len()] > 0.5 { 2.5 } else { 0.5 };
            oracle += wt * (a.data[i] - b.data[i]).powi(2);
        }
        oracle /= a.data.len() as f64;
        assert!((denoise_loss(&a, &b, &m, &w2).unwrap() - oracle).abs() < 1e-9);
        assert!(denoise_loss(&a, &b, &LatentVideo::zeros(Role::Mask, 2, 2, 4, 4), &w).is_err());
    }

    #[test]
    fn denoiser_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (c, t, h, w) in [(3, 1, 1, 1), (4, 2, 5, 3), (2, 4, 6, 7)] {
            let x = LatentVideo::random(Role::Injected, c, t, h, w, &mut rng);
            let zero = ToyDenoiser::zeros(c, 5, 2);
            let y = zero.forward(&x).unwrap();
            assert_eq!((y.c, y.t, y.h, y.w), (2, t, h, w));
            assert!(y.data.iter().all(|v| *v == 0.0));
            let d = ToyDenoiser::init(c, 5, 2, &mut rng);
            assert_eq!(d.forward(&x).unwrap(), d.forward(&x).unwrap());
        }
        assert!(ToyDenoiser::zeros(3, 2, 2).forward(&LatentVideo::zeros(Role::Other, 2, 1, 2, 2)).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dims = (3, 4, 5);
        let n = 60;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3 * 2 * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.1, -0.2, 0.3];
        let out = conv3d(&x, 2, dims, &w, &b, 3);
        for o in 0..3 {
            for t in 0..3isize {
                for y in 0..4isize {
                    for xx in 0..5isize {
                        let mut s = b[o];
                        for i in 0..2 {
                            for k in 0..27 {
                                let (dt, dy, dx) = ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1);
                                let (tt, yy, xq) = (t + dt, y + dy, xx + dx);
                                if (0..3).contains(&tt) && (0..4).contains(&yy) && (0..5).contains(&xq) {
                                    s += w[(o * 2 + i) * 27 + k] * x[i * n + ((tt * 4 + yy) * 5 + xq) as usize];
                                }
                            }
                        }
                        let got = out[o * n + ((t * 4 + y) * 5 + xx) as usize];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, dims) = small_model(3);
        let sched = DiffusionSchedule::default();
        let s = &synthetic_task(1, &dims, &sched, 17)[0];
        let w = LossWeights { w_masked: 2.0, w_background: 1.0 };
        let err = gradcheck(&m, s, &w, &sched, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn linear_configuration_gradcheck_is_tight() {
        let (mut m, dims) = small_model(4);
        // Identity-free but linear: hidden activations stay near zero so
        // tanh acts linearly, and gates are off.
        for v in [&mut m.gates.gp_w, &mut m.gates.gp_b, &mut m.gates.gc_w, &mut m.gates.gc_b] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        m.denoiser.w1.iter_mut().for_each(|x| *x *= 1e-4);
        m.denoiser.b1.iter_mut().for_each(|x| *x = 0.0);
        let sched = DiffusionSchedule::default();
        let s = &synthetic_task(1, &dims, &sched, 5)[0];
        let err = gradcheck(&m, s, &LossWeights::default(), &sched, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn saturated_gate_has_vanishing_gradient() {
        let (mut m, dims) = small_model(6);
        m.gates.gp_w.iter_mut().for_each(|x| *x = 0.0);
        m.gates.gp_b.iter_mut().for_each(|x| *x = 10.0);
        let sched = DiffusionSchedule::default();
        let s = &synthetic_task(1, &dims, &sched, 8)[0];
        let w = LossWeights::default();
        let (_, g) = m.loss_and_grad(s, &w, &sched).unwrap();
        let h = 1e-5;
        for j in 0..m.gates.gp_b.len() {
            let mut p = m.clone();
            p.gates.gp_b[j] += h;
            let up = p.loss(s, &w, &sched).unwrap();
            p.gates.gp_b[j] -= 2.0 * h;
            let down = p.loss(s, &w, &sched).unwrap();
            let numeric = (up - down) / (2.0 * h);
            assert!(g.gates.gp_b[j].abs() < 1e-6);
            assert!((g.gates.gp_b[j] - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn short_training_reduces_loss() {
        let (mut m, dims) = small_model(11);
        let sched = DiffusionSchedule::default();
        let samples = synthetic_task(8, &dims, &sched, 2);
        let cfg = TrainConfig {
            steps: 20,
            ..TrainConfig::default()
        };
        let losses = train(&mut m, &samples, &LossWeights::default(), &sched, &cfg).unwrap();
        assert_eq!(losses.len(), 21);
        assert!(losses[20] < losses[0]);
    }

    #[test]
    fn dropout_zeroes_guidance() {
        let dims = ToyDims::default();
        let mut s = synthetic_task(1, &dims, &DiffusionSchedule::default(), 1).remove(0);
        assert!(s.gamma.data.iter().any(|x| *x != 0.0));
        s.drop_guidance();
        assert!(s.gamma.data.iter().chain(&s.phi.data).all(|x| *x == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, dims) = small_model(13);
        let mut bytes = Vec::new();
        write_checkpoint(&m.to_checkpoint(), &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"DDG1");
        let tensors = read_checkpoint(bytes.as_slice()).unwrap();
        let mut other = ToyModel::init(&dims, GateInput::Sinusoidal, 99);
        other.load_checkpoint(&tensors).unwrap();
        for ((_, _, a), (_, _, b)) in m.tensors().into_iter().zip(other.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| (*x as f32) as f64 == *y));
        }
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_checkpoint(&b"DDG2\0\0\0\0"[..]).is_err());
        let mut wrong = ToyModel::init(&ToyDims { c_model: 4, ..dims }, GateInput::Sinusoidal, 0);
        assert!(wrong.load_checkpoint(&tensors).is_err());
    }
}

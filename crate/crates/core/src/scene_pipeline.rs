//! Background completion, spiral and custom-trajectory warp-and-inpaint, and
//! coarse video rendering.

use std::path::Path;

use log::{info, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{spiral_trajectory, standardize_trajectory, CameraPose, Intrinsics, Trajectory};
use crate::error::{Error, Result};
use crate::gaussian_field::{
    init_from_rgbd, optimize, primitives_from_view, prune, GaussianField, OptimizeConfig, DEFAULT_PRUNE_THRESHOLD,
};
use crate::inpaint_bridge::{
    estimate_depth, inpaint, Backend, FallbackConfig, InpaintJob, ServiceEndpoint, Services, ViewContext,
};
use crate::raster::{HoleMask, Mask, RgbImage};
use crate::rgbd_warp::{align_depth, apply_alignment, fit_depth_scale, forward_warp, RgbdImage};
use crate::splat_render::{render_video, RenderOutput};

/// Weight of the rotation angle (radians) against translation distance when
/// picking the nearest view.
pub const ROTATION_DISTANCE_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpiralConfig {
    pub r: f64,
    pub n_views: usize,
    pub look_point: [f64; 3],
    pub up: [f64; 3],
}

impl Default for SpiralConfig {
    fn default() -> Self {
        Self {
            r: 0.5,
            n_views: 9,
            look_point: [0.0, 0.0, 3.0],
            up: [0.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub backend: Backend,
    pub endpoint: ServiceEndpoint,
    pub fallback_on_error: bool,
    pub fallback: FallbackConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Fallback,
            endpoint: ServiceEndpoint::default(),
            fallback_on_error: false,
            fallback: FallbackConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn build(&self) -> Result<Services> {
        match self.backend {
            Backend::Fallback => Ok(Services::fallback(&self.fallback)),
            Backend::External => Services::external(
                &self.endpoint.clone().with_env(),
                self.fallback_on_error,
                &self.fallback,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub spiral: SpiralConfig,
    /// Reference camera; defaults to `Intrinsics::default_for` the image.
    pub intrinsics: Option<Intrinsics>,
    /// Defaults to the reference camera alone.
    pub custom_traj: Option<Trajectory>,
    pub keyframe_every: usize,
    pub hole_threshold: f64,
    pub optimize: OptimizeConfig,
    pub stride: usize,
    pub prune_threshold: f64,
    pub services: ServiceConfig,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            spiral: SpiralConfig::default(),
            intrinsics: None,
            custom_traj: None,
            keyframe_every: 8,
            hole_threshold: 0.02,
            optimize: OptimizeConfig::default(),
            stride: 1,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            services: ServiceConfig::default(),
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hole_threshold) {
            return Err(Error::invalid(format!("hole_threshold {} outside [0, 1]", self.hole_threshold)));
        }
        if self.spiral.n_views < 2 {
            return Err(Error::invalid("spiral.n_views must be at least 2"));
        }
        if self.stride == 0 || self.keyframe_every == 0 {
            return Err(Error::invalid("stride and keyframe_every must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return Err(Error::invalid("prune_threshold outside [0, 1]"));
        }
        if let Some(k) = &self.intrinsics {
            k.validate()?;
        }
        if let Some(t) = &self.custom_traj {
            if t.is_empty() {
                return Err(Error::invalid("custom_traj has no poses"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }

    fn intrinsics_for(&self, image: &RgbImage) -> Result<Intrinsics> {
        let k = self.intrinsics.unwrap_or_else(|| Intrinsics::default_for(image.width, image.height));
        if k.width != image.width || k.height != image.height {
            return Err(Error::shape(format!(
                "intrinsics are {}x{} but the reference is {}x{}",
                k.width, k.height, image.width, image.height
            )));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Spiral,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineEvent {
    Initialized { primitives: usize, inpainted: bool },
    ViewAdded { phase: Phase, hole_fraction: f64, added: usize },
    ViewSkipped { phase: Phase, hole_fraction: f64, reason: String },
    Optimized { phase: Phase, initial_loss: f64, final_loss: f64, pruned: usize },
}

#[derive(Debug, Clone)]
pub struct SceneState {
    pub views: Vec<RgbdImage>,
    pub field: GaussianField,
    pub prompt: String,
    pub events: Vec<PipelineEvent>,
}

fn pose_distance(a: &CameraPose, b: &CameraPose) -> f64 {
    (a.position() - b.position()).norm() + ROTATION_DISTANCE_WEIGHT * a.rotation_angle_to(b)
}

impl SceneState {
    /// Index of the view closest to `pose`; the first wins ties.
    pub fn nearest_view(&self, pose: &CameraPose) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, v) in self.views.iter().enumerate() {
            let d = pose_distance(&v.pose, pose);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

/// Completes the character region, estimates depth and seeds the field from
/// a single view at the identity pose.
pub fn initialize(
    reference: &RgbImage,
    character_mask: &HoleMask,
    cfg: &ReconstructionConfig,
    services: &Services,
) -> Result<SceneState> {
    cfg.validate()?;
    let intrinsics = cfg.intrinsics_for(reference)?;
    let view_ctx = ViewContext {
        pose: CameraPose::identity(),
        intrinsics,
    };
    let prompt = services.captioner.caption(reference)?;
    let inpainted = character_mask.any();
    let background = if inpainted {
        let job = InpaintJob::new(reference.clone(), character_mask.clone(), prompt.clone())?;
        inpaint(services.inpainter.as_ref(), &job, &view_ctx)?
    } else {
        reference.clone()
    };
    let depth = estimate_depth(services.depth.as_ref(), &background, &view_ctx)?;
    let view = RgbdImage::new(background, depth, view_ctx.pose, intrinsics)?;
    let field = init_from_rgbd(std::slice::from_ref(&view), cfg.stride)?;
    info!("initialized field with {} primitives", field.len());
    Ok(SceneState {
        views: vec![view],
        events: vec![PipelineEvent::Initialized {
            primitives: field.len(),
            inpainted,
        }],
        field,
        prompt,
    })
}

/// Warps the nearest view to `target`, inpaints and re-estimates depth when
/// enough pixels are missing, and appends the new view and its hole-pixel
/// primitives. Returns whether a view was added.
pub fn warp_and_inpaint_step(
    state: &mut SceneState,
    target: &CameraPose,
    phase: Phase,
    cfg: &ReconstructionConfig,
    services: &Services,
) -> Result<bool> {
    let src = &state.views[state.nearest_view(target)];
    let intrinsics = src.intrinsics;
    let warp = forward_warp(src, target);
    let hole_fraction = warp.holes.fraction();
    let skip = |state: &mut SceneState, reason: String| {
        state.events.push(PipelineEvent::ViewSkipped {
            phase,
            hole_fraction,
            reason,
        });
        Ok(false)
    };
    if hole_fraction <= cfg.hole_threshold {
        return skip(state, format!("hole fraction {hole_fraction:.4} within threshold"));
    }
    let view_ctx = ViewContext {
        pose: *target,
        intrinsics,
    };
    let job = InpaintJob::new(warp.color, warp.holes.clone(), state.prompt.clone())?;
    let color = inpaint(services.inpainter.as_ref(), &job, &view_ctx)?;
    let estimated = estimate_depth(services.depth.as_ref(), &color, &view_ctx)?;
    let overlap: Mask = warp.holes.complement();
    let depth = match align_depth(&estimated, &warp.depth, &overlap) {
        Ok(d) => d,
        Err(Error::DegenerateFit(msg)) => match fit_depth_scale(&estimated, &warp.depth, &overlap) {
            Ok(s) => {
                warn!("offset-free depth alignment ({msg}), scale {s}");
                apply_alignment(&estimated, s, 0.0)
            }
            Err(e) => {
                warn!("view skipped: {e}");
                return skip(state, e.to_string());
            }
        },
        Err(e @ Error::InsufficientOverlap { .. }) => {
            warn!("view skipped: {e}");
            return skip(state, e.to_string());
        }
        Err(e) => return Err(e),
    };
    let view = RgbdImage::new(color, depth, *target, intrinsics)?;
    let fresh = primitives_from_view(&view, Some(&warp.holes), &state.views, cfg.stride);
    let added = fresh.len();
    state.field.primitives.extend(fresh);
    state.views.push(view);
    state.events.push(PipelineEvent::ViewAdded {
        phase,
        hole_fraction,
        added,
    });
    info!("{phase:?} view {}: {:.1}% holes, {added} new primitives", state.views.len() - 1, 100.0 * hole_fraction);
    Ok(true)
}

fn optimize_phase(state: &mut SceneState, phase: Phase, cfg: &ReconstructionConfig) -> Result<()> {
    let (field, report) = optimize(&state.field, &state.views, &cfg.optimize)?;
    let before = field.len();
    state.field = prune(&field, cfg.prune_threshold);
    let initial_loss = report.losses.first().copied().unwrap_or(report.final_loss);
    info!(
        "{phase:?} optimization: loss {initial_loss:.5} -> {:.5}, pruned {}",
        report.final_loss,
        before - state.field.len()
    );
    state.events.push(PipelineEvent::Optimized {
        phase,
        initial_loss,
        final_loss: report.final_loss,
        pruned: before - state.field.len(),
    });
    Ok(())
}

/// Custom trajectory rebased onto its first camera, or the reference camera
/// alone.
pub fn custom_trajectory(cfg: &ReconstructionConfig, intrinsics: Intrinsics) -> Trajectory {
    match &cfg.custom_traj {
        Some(t) => standardize_trajectory(t),
        None => Trajectory::single(CameraPose::identity(), intrinsics),
    }
}

/// Full pass: initialize, spiral expansion, optimize, custom-trajectory
/// expansion on every `keyframe_every`-th pose, optimize again when the
/// custom pass added views.
pub fn reconstruct(
    reference: &RgbImage,
    character_mask: &HoleMask,
    cfg: &ReconstructionConfig,
    services: &Services,
) -> Result<SceneState> {
    let mut state = initialize(reference, character_mask, cfg, services)?;
    let intrinsics = state.views[0].intrinsics;
    let s = &cfg.spiral;
    let spiral = spiral_trajectory(
        s.r,
        s.n_views,
        &Vector3::from(s.look_point),
        &Vector3::from(s.up),
        intrinsics,
    )?;
    info!("spiral pass over {} poses", spiral.len());
    for pose in &spiral.poses {
        warp_and_inpaint_step(&mut state, pose, Phase::Spiral, cfg, services)?;
    }
    optimize_phase(&mut state, Phase::Spiral, cfg)?;

    let custom = custom_trajectory(cfg, intrinsics);
    info!("custom pass over {} keyframes", custom.len().div_ceil(cfg.keyframe_every));
    let mut added = false;
    for pose in custom.poses.iter().step_by(cfg.keyframe_every) {
        added |= warp_and_inpaint_step(&mut state, pose, Phase::Custom, cfg, services)?;
    }
    if added {
        optimize_phase(&mut state, Phase::Custom, cfg)?;
    }
    Ok(state)
}

/// Frames along the standardized custom trajectory, with per-frame alpha.
pub fn render_coarse_video(state: &SceneState, custom: &Trajectory) -> Result<Vec<RenderOutput>> {
    if custom.is_empty() {
        return Err(Error::invalid("trajectory has no poses"));
    }
    Ok(render_video(&state.field, &standardize_trajectory(custom)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rgbd_warp::DepthMap;

    fn checker(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |u, v| {
            let on = ((u / 4) + (v / 4)) % 2 == 0;
            if on {
                [0.9, 0.6, 0.2]
            } else {
                [0.1, 0.3, 0.7]
            }
        })
    }

    fn cfg() -> ReconstructionConfig {
        ReconstructionConfig {
            optimize: OptimizeConfig {
                iters: 2,
                ..Default::default()
            },
            spiral: SpiralConfig {
                r: 0.2,
                n_views: 3,
                look_point: [0.0, 0.0, 3.0],
                up: [0.0, 1.0, 0.0],
            },
            services: ServiceConfig {
                fallback: FallbackConfig {
                    d_min: 3.0,
                    d_max: 3.0,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        assert!(ReconstructionConfig::from_json(r#"{"stride": 2}"#).is_ok());
        assert!(ReconstructionConfig::from_json(r#"{"strid": 2}"#).is_err());
        assert!(ReconstructionConfig::from_json(r#"{"hole_threshold": 1.5}"#).is_err());
        let round = serde_json::to_string(&cfg()).unwrap();
        assert_eq!(ReconstructionConfig::from_json(&round).unwrap(), cfg());
    }

    #[test]
    fn initialize_structure() {
        let c = cfg();
        let services = c.services.build().unwrap();
        let img = checker(16, 12);
        let state = initialize(&img, &HoleMask::new(16, 12), &c, &services).unwrap();
        assert_eq!(state.views.len(), 1);
        assert_eq!(state.views[0].color, img);
        assert_eq!(state.field.len(), 16 * 12);
        for p in &state.field.primitives {
            assert!((p.center.z - 3.0).abs() < 1e-12);
        }
        assert_eq!(state.prompt, "anime background, empty scene");
    }

    #[test]
    fn identical_pose_is_skipped_and_threshold_one_skips_all() {
        let mut c = cfg();
        let services = c.services.build().unwrap();
        let img = checker(16, 12);
        let mut state = initialize(&img, &HoleMask::new(16, 12), &c, &services).unwrap();
        assert!(!warp_and_inpaint_step(&mut state, &CameraPose::identity(), Phase::Spiral, &c, &services).unwrap());
        c.hole_threshold = 1.0;
        let k = state.field.len();
        let moved = CameraPose::new(Default::default(), Vector3::new(0.8, 0.0, 0.0));
        assert!(!warp_and_inpaint_step(&mut state, &moved, Phase::Spiral, &c, &services).unwrap());
        assert_eq!(state.field.len(), k);
    }

    #[test]
    fn lateral_move_adds_band_only() {
        let c = cfg();
        let services = c.services.build().unwrap();
        let img = checker(16, 12);
        let mut state = initialize(&img, &HoleMask::new(16, 12), &c, &services).unwrap();
        let k = state.field.len();
        let target = CameraPose::new(Default::default(), Vector3::new(-0.75, 0.0, 0.0));
        let holes = forward_warp(&state.views[0], &target).holes;
        assert!(warp_and_inpaint_step(&mut state, &target, Phase::Spiral, &c, &services).unwrap());
        assert_eq!(state.views[1].pose, target);
        assert_eq!(state.field.len() - k, holes.count());
        for v in 0..12 {
            for u in 0..16 {
                assert_eq!(holes.get(u, v), u >= 12, "({u},{v})");
            }
        }
    }

    #[test]
    fn degenerate_spiral_smoke() {
        let mut c = cfg();
        c.spiral.n_views = 2;
        let services = c.services.build().unwrap();
        let img = checker(16, 16);
        let state = reconstruct(&img, &HoleMask::new(16, 16), &c, &services).unwrap();
        assert!(!state.field.is_empty());
        let first_custom = state.events.iter().position(|e| {
            matches!(e, PipelineEvent::ViewAdded { phase: Phase::Custom, .. } | PipelineEvent::ViewSkipped { phase: Phase::Custom, .. })
        });
        let last_spiral = state.events.iter().rposition(|e| {
            matches!(e, PipelineEvent::Optimized { phase: Phase::Spiral, .. })
        });
        assert!(last_spiral.unwrap() < first_custom.unwrap());
    }

    #[test]
    fn character_region_is_inpainted() {
        let c = cfg();
        let services = c.services.build().unwrap();
        let img = RgbImage::filled(12, 12, [0.4, 0.5, 0.6]);
        let mut with_char = img.clone();
        let mut mask = HoleMask::new(12, 12);
        for v in 4..8 {
            for u in 4..8 {
                mask.set(u, v, true);
                with_char.set(u, v, [1.0, 0.0, 0.0]);
            }
        }
        let state = initialize(&with_char, &mask, &c, &services).unwrap();
        for (a, b) in state.views[0].color.data.iter().zip(&img.data) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        assert!(matches!(state.events[0], PipelineEvent::Initialized { inpainted: true, .. }));
    }

    #[test]
    fn depth_fit_falls_back_to_scale_on_flat_maps() {
        let a = DepthMap::constant(8, 8, 2.0);
        let b = DepthMap::constant(8, 8, 3.0);
        let m = Mask::filled(8, 8, true);
        assert!(matches!(align_depth(&a, &b, &m), Err(Error::DegenerateFit(_))));
        assert!((fit_depth_scale(&a, &b, &m).unwrap() - 1.5).abs() < 1e-12);
    }
}

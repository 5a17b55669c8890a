mod common;

use common::*;
use dreamscene::camera::{spiral_trajectory, standardize_trajectory, CameraPose, Trajectory};
use dreamscene::gaussian_field::{init_from_rgbd, OptimizeConfig};
use dreamscene::inpaint_bridge::ViewContext;
use dreamscene::raster::HoleMask;
use dreamscene::rgbd_warp::RgbdImage;
use dreamscene::scene_pipeline::{reconstruct, render_coarse_video, PipelineEvent, Phase, ReconstructionConfig, SpiralConfig};
use dreamscene::splat_render::render_video;
use nalgebra::Vector3;

const LOOK: [f64; 3] = [0.0, 0.0, 3.5];

fn reference_view(size: usize) -> (RgbdImage, ViewContext) {
    let k = intrinsics(size);
    let ctx = ViewContext {
        pose: CameraPose::identity(),
        intrinsics: k,
    };
    let gt = ground_truth(&reference_field(), &ctx);
    let view = RgbdImage::new(gt.color.clone(), gt_depth(&gt), ctx.pose, k).unwrap();
    (view, ctx)
}

fn spiral(n: usize, size: usize) -> Trajectory {
    spiral_trajectory(0.5, n, &Vector3::from(LOOK), &Vector3::y(), intrinsics(size)).unwrap()
}

#[test]
fn alpha_coverage_varies_smoothly_along_the_spiral() {
    // A single-view field has open borders, so coverage does change.
    let (view, _) = reference_view(64);
    let field = init_from_rgbd(&[view], 1).unwrap();
    let frames = render_video(&field, &spiral(30, 64));
    let coverage: Vec<f64> = frames
        .iter()
        .map(|f| f.alpha.data.iter().sum::<f64>() / f.alpha.data.len() as f64)
        .collect();
    let spread = coverage.iter().cloned().fold(f64::MIN, f64::max) - coverage.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread > 0.0);
    let worst = coverage.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    assert!(worst < 0.1, "max inter-frame coverage delta {worst}");
}

#[test]
fn custom_pass_over_spiral_keyframes_adds_almost_nothing() {
    let size = 64;
    let (view, _) = reference_view(size);
    let services = ground_truth_services(&reference_field());
    let traj = spiral(5, size);
    let cfg = ReconstructionConfig {
        spiral: SpiralConfig {
            r: 0.5,
            n_views: 5,
            look_point: LOOK,
            up: [0.0, 1.0, 0.0],
        },
        intrinsics: Some(intrinsics(size)),
        custom_traj: Some(traj),
        keyframe_every: 1,
        optimize: OptimizeConfig {
            iters: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    let state = reconstruct(&view.color, &HoleMask::new(size, size), &cfg, &services).unwrap();
    let mut spiral_total = 0;
    let mut custom_added = 0;
    let mut custom_seen = 0;
    for e in &state.events {
        match e {
            PipelineEvent::Initialized { primitives, .. } => spiral_total += primitives,
            PipelineEvent::ViewAdded { phase: Phase::Spiral, added, .. } => spiral_total += added,
            PipelineEvent::ViewAdded { phase: Phase::Custom, added, .. } => {
                custom_seen += 1;
                custom_added += added
            }
            PipelineEvent::ViewSkipped { phase: Phase::Custom, .. } => custom_seen += 1,
            _ => {}
        }
    }
    assert!(custom_seen > 0);
    assert!(
        (custom_added as f64) < 0.01 * spiral_total as f64,
        "{custom_added} new primitives over {spiral_total}"
    );
}

#[test]
fn coarse_video_starts_at_the_reference_camera() {
    let (view, ctx) = reference_view(48);
    let services = ground_truth_services(&reference_field());
    let cfg = ReconstructionConfig {
        spiral: SpiralConfig {
            r: 0.3,
            n_views: 3,
            look_point: LOOK,
            up: [0.0, 1.0, 0.0],
        },
        optimize: OptimizeConfig {
            iters: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let state = reconstruct(&view.color, &HoleMask::new(48, 48), &cfg, &services).unwrap();
    // Shift the whole path; standardization moves frame 0 back to the reference.
    let mut traj = spiral(4, 48);
    let offset = CameraPose::new(nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.1, 0.0), Vector3::new(0.2, 0.0, 0.0));
    traj.poses = traj.poses.iter().map(|p| p.compose(&offset)).collect();
    let frames = render_coarse_video(&state, &traj).unwrap();
    assert_eq!(frames.len(), 4);
    let direct = dreamscene::splat_render::render(&state.field, &ctx.pose, &ctx.intrinsics);
    assert_eq!(frames[0], direct);
    assert_eq!(standardize_trajectory(&traj).poses[0], CameraPose::identity());
    assert!(render_coarse_video(&state, &Trajectory { poses: vec![], intrinsics: ctx.intrinsics }).is_err());
}

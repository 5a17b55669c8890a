//! Command-line front end for the `dreamscene` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::camera::{standardize_trajectory, Trajectory};
use crate::degrade::{degrade_video, DegradeParams, LossWeights};
use crate::error::Error;
use crate::gated_latent::{
    gate_trace, synthetic_task, train, write_gate_csv, DiffusionSchedule, GateInput, ToyDims, ToyModel, TrainConfig,
};
use crate::gaussian_field::{load_ply, save_ply};
use crate::inpaint_bridge::ServiceEndpoint;
use crate::metrics::{compare_dirs, report};
use crate::pose_mask::{load_pose_video, mask_video, rasterize_video, MaskMode, MaskOptions, PoseStyle, DEFAULT_CONF_MIN};
use crate::raster::{frame_name, list_pngs, HoleMask, RgbImage};
use crate::scene_pipeline::{reconstruct, ReconstructionConfig};
use crate::splat_render::{render_video, write_frames};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Settings shared by every subcommand, read from `--global`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub seed: u64,
    pub log_level: String,
    /// Replaces the endpoint of the reconstruction config when set.
    pub endpoint: Option<ServiceEndpoint>,
    pub fallback_on_error: Option<bool>,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            log_level: "info".into(),
            endpoint: None,
            fallback_on_error: None,
        }
    }
}

impl GlobalConfig {
    pub fn from_json(text: &str) -> crate::Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        parse_level(&cfg.log_level)?;
        if let Some(e) = &cfg.endpoint {
            e.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }
}

fn parse_level(s: &str) -> crate::Result<log::LevelFilter> {
    s.parse()
        .map_err(|_| Error::invalid(format!("unknown log level {s:?}")))
}

#[derive(Debug, Parser)]
#[command(name = "dreamscene", version, about = "Camera-aware scene reconstruction and pose-aware inpainting tools")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0, global = true)]
    threads: usize,
    /// JSON file with seed, log level and service settings.
    #[arg(long, global = true)]
    global: Option<PathBuf>,
    /// Overrides the log level of the global config.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a Gaussian scene from a reference image.
    Reconstruct(ReconstructArgs),
    /// Render a scene along a trajectory to PNG frames.
    Render(RenderArgs),
    /// Turn a pose video into inpainting masks.
    Maskgen(MaskgenArgs),
    /// Apply seeded training degradations to a frame sequence.
    Degrade(DegradeArgs),
    /// Emit per-step gate values of the toy injection model.
    GateDemo(GateDemoArgs),
    /// Compare PNG frames with PSNR, SSIM and L1.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reference: PathBuf,
    /// Nonzero pixels mark the character to remove.
    #[arg(long)]
    char_mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Custom trajectory; replaces the one in the config.
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    traj_scale: f64,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write alpha_XXXXXX.png.
    #[arg(long)]
    alpha: bool,
    #[arg(long, default_value_t = 1.0)]
    traj_scale: f64,
}

#[derive(Debug, Args)]
struct MaskgenArgs {
    /// JSON lines, one pose frame per line.
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    out: PathBuf,
    /// Fill the keypoint bounding box instead of dilated limbs.
    #[arg(long)]
    bbox: bool,
    /// Pixels; defaults to a value proportional to the image size.
    #[arg(long)]
    dilation: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_CONF_MIN)]
    conf_min: f64,
    /// Skip the one-frame temporal union.
    #[arg(long)]
    no_temporal: bool,
    /// Also write rasterized skeleton frames here.
    #[arg(long)]
    pose_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Repeat each input frame this many times before degrading.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
}

#[derive(Debug, Args)]
struct GateDemoArgs {
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    plot: PathBuf,
    /// Gradient steps on the synthetic task before tracing.
    #[arg(long, default_value_t = 0)]
    train_steps: usize,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Feed the raw timestep to the gates instead of the sinusoidal embedding.
    #[arg(long)]
    raw_scalar: bool,
    /// Write the parameters as a checkpoint.
    #[arg(long)]
    save: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Directory of PNG frames or a single PNG.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Input loading and validation errors count as usage errors.
fn usage<T>(r: crate::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

fn check(cond: bool, msg: impl Into<String>) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(Failure::Usage(msg.into()))
    }
}

fn check_scale(s: f64) -> Outcome {
    check(s.is_finite() && s > 0.0, format!("--traj-scale must be positive, got {s}"))
}

/// Refuses an output directory path that is an existing file.
fn check_out_dir(dir: &Path) -> Outcome {
    check(!dir.is_file(), format!("{} exists and is not a directory", dir.display()))
}

fn check_out_file(path: &Path) -> Outcome {
    check(!path.is_dir(), format!("{} is a directory", path.display()))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let global = match &cli.global {
        Some(p) => match GlobalConfig::load(p) {
            Ok(g) => g,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
        },
        None => GlobalConfig::default(),
    };
    let level = match parse_level(cli.log_level.as_deref().unwrap_or(&global.log_level)) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .try_init();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_RUNTIME;
        }
    };
    let outcome = pool.install(|| match &cli.command {
        Command::Reconstruct(a) => cmd_reconstruct(a, &global),
        Command::Render(a) => cmd_render(a),
        Command::Maskgen(a) => cmd_maskgen(a),
        Command::Degrade(a) => cmd_degrade(a, &global),
        Command::GateDemo(a) => cmd_gate_demo(a, &global),
        Command::Metrics(a) => cmd_metrics(a),
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn cmd_reconstruct(a: &ReconstructArgs, global: &GlobalConfig) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => usage(ReconstructionConfig::load(p))?,
        None => ReconstructionConfig::default(),
    };
    check_scale(a.traj_scale)?;
    check_out_file(&a.out)?;
    if let Some(e) = &global.endpoint {
        cfg.services.endpoint = e.clone();
    }
    if let Some(f) = global.fallback_on_error {
        cfg.services.fallback_on_error = f;
    }
    if let Some(p) = &a.traj {
        cfg.custom_traj = Some(usage(Trajectory::load(p))?);
    }
    if let Some(t) = cfg.custom_traj.take() {
        cfg.custom_traj = Some(t.scaled(a.traj_scale));
    }
    usage(cfg.validate())?;
    let reference = usage(RgbImage::load_png(&a.reference))?;
    let mask = match &a.char_mask {
        Some(p) => usage(HoleMask::load_png(p))?,
        None => HoleMask::new(reference.width, reference.height),
    };
    check(
        mask.width == reference.width && mask.height == reference.height,
        format!(
            "mask is {}x{} but the reference is {}x{}",
            mask.width, mask.height, reference.width, reference.height
        ),
    )?;
    if let Some(t) = &cfg.custom_traj {
        check(
            t.intrinsics.width == reference.width && t.intrinsics.height == reference.height,
            "trajectory intrinsics do not match the reference size",
        )?;
    }
    let services = usage(cfg.services.build())?;
    info!("seed {}", a.seed.unwrap_or(global.seed));
    let state = reconstruct(&reference, &mask, &cfg, &services)?;
    for e in &state.events {
        info!("{e:?}");
    }
    save_ply(&state.field, &a.out)?;
    info!("wrote {} primitives to {}", state.field.len(), a.out.display());
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Outcome {
    check_scale(a.traj_scale)?;
    check_out_dir(&a.out)?;
    let traj = usage(Trajectory::load(&a.traj))?.scaled(a.traj_scale);
    check(!traj.is_empty(), "trajectory has no poses")?;
    let field = usage(load_ply(&a.scene))?;
    let frames = render_video(&field, &standardize_trajectory(&traj));
    write_frames(&frames, &a.out, a.alpha)?;
    info!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn cmd_maskgen(a: &MaskgenArgs) -> Outcome {
    check(a.width > 0 && a.height > 0, "--width and --height must be positive")?;
    check((0.0..=1.0).contains(&a.conf_min), "--conf-min must lie in [0, 1]")?;
    if let Some(d) = a.dilation {
        check(d.is_finite() && d >= 0.0, "--dilation must be non-negative")?;
    }
    check_out_dir(&a.out)?;
    if let Some(p) = &a.pose_out {
        check_out_dir(p)?;
    }
    let pv = usage(load_pose_video(&a.pose))?;
    check(!pv.is_empty(), "pose file has no frames")?;
    let opts = MaskOptions {
        conf_min: a.conf_min,
        dilation: a.dilation,
        mode: if a.bbox { MaskMode::BBox } else { MaskMode::Disks },
        temporal: !a.no_temporal,
    };
    let masks = mask_video(&pv, a.width, a.height, &opts);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, m) in masks.iter().enumerate() {
        m.save_png_1bit(a.out.join(frame_name("mask", i)))?;
    }
    if let Some(dir) = &a.pose_out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, img) in rasterize_video(&pv, a.width, a.height, PoseStyle::All, a.conf_min)
            .iter()
            .enumerate()
        {
            img.save_png(dir.join(frame_name("pose", i)))?;
        }
    }
    info!("wrote {} masks to {}", masks.len(), a.out.display());
    Ok(())
}

fn load_frames(input: &Path) -> crate::Result<Vec<RgbImage>> {
    let paths = if input.is_dir() {
        list_pngs(input)?
    } else {
        vec![input.to_path_buf()]
    };
    if paths.is_empty() {
        return Err(Error::invalid(format!("no PNG frames in {}", input.display())));
    }
    let frames = paths.iter().map(RgbImage::load_png).collect::<crate::Result<Vec<_>>>()?;
    if frames.iter().any(|f| !f.same_shape(&frames[0])) {
        return Err(Error::shape("frames differ in size"));
    }
    Ok(frames)
}

fn cmd_degrade(a: &DegradeArgs, global: &GlobalConfig) -> Outcome {
    check(a.repeat > 0, "--repeat must be at least 1")?;
    check_out_dir(&a.out)?;
    check(a.out != a.input, "--out must differ from --in")?;
    let mut params = match &a.params {
        Some(p) => {
            let text = usage(std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))?;
            usage(serde_json::from_str::<DegradeParams>(&text).map_err(|e| Error::format(p, e.to_string())))?
        }
        None => DegradeParams {
            seed: global.seed,
            ..Default::default()
        },
    };
    if let Some(s) = a.seed {
        params.seed = s;
    }
    usage(params.validate())?;
    let frames: Vec<RgbImage> = usage(load_frames(&a.input))?
        .into_iter()
        .flat_map(|f| std::iter::repeat_n(f, a.repeat))
        .collect();
    let out = degrade_video(&frames, &params)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, f) in out.iter().enumerate() {
        f.save_png(a.out.join(frame_name("frame", i)))?;
    }
    info!("wrote {} frames to {}", out.len(), a.out.display());
    Ok(())
}

fn cmd_gate_demo(a: &GateDemoArgs, global: &GlobalConfig) -> Outcome {
    let sched = DiffusionSchedule::default();
    check(
        (1..=sched.steps()).contains(&a.steps),
        format!("--steps must lie in 1..={}", sched.steps()),
    )?;
    check(a.lr.is_finite() && a.lr > 0.0, "--lr must be positive")?;
    check(a.train_steps == 0 || a.samples > 0, "--samples must be positive when training")?;
    check_out_file(&a.plot)?;
    if let Some(p) = &a.save {
        check_out_file(p)?;
    }
    let seed = a.seed.unwrap_or(global.seed);
    let input = if a.raw_scalar {
        GateInput::RawScalar
    } else {
        GateInput::Sinusoidal
    };
    let dims = ToyDims::default();
    let mut model = ToyModel::init(&dims, input, seed);
    if a.train_steps > 0 {
        let samples = synthetic_task(a.samples, &dims, &sched, seed);
        let cfg = TrainConfig {
            steps: a.train_steps,
            lr: a.lr,
            seed,
            ..Default::default()
        };
        let losses = train(&mut model, &samples, &LossWeights::default(), &sched, &cfg)?;
        info!(
            "loss {:.6} -> {:.6}",
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    let rows = gate_trace(&model.gates, &sched, a.steps);
    let file = File::create(&a.plot).map_err(|e| Error::io(&a.plot, e))?;
    let mut w = BufWriter::new(file);
    write_gate_csv(&rows, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&a.plot, e))?;
    if let Some(p) = &a.save {
        model.save(p)?;
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Outcome {
    check_out_file(&a.out)?;
    let rep = if a.reference.is_dir() {
        check(a.test.is_dir(), "--ref is a directory but --test is not")?;
        usage(compare_dirs(&a.reference, &a.test))?
    } else {
        let pair = (usage(RgbImage::load_png(&a.reference))?, usage(RgbImage::load_png(&a.test))?);
        usage(report(&[pair]))?
    };
    let json = serde_json::to_string_pretty(&rep).map_err(Error::from)?;
    std::fs::write(&a.out, json + "\n").map_err(|e| Error::io(&a.out, e))?;
    info!(
        "psnr {:.4} ssim {:.4} l1 {:.5}",
        rep.aggregate.psnr, rep.aggregate.ssim, rep.aggregate.l1
    );
    Ok(())
}

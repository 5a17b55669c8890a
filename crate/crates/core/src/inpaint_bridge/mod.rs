//! Clients for the inpainting, depth and captioning services, with offline
//! fallbacks.

mod fallback;
mod http;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::raster::{HoleMask, RgbImage};
use crate::rgbd_warp::DepthMap;

pub use fallback::{push_pull_fill, GradientDepth, PushPullInpainter, StaticCaption};
pub use http::{HttpClient, ServiceEndpoint, ENDPOINT_ENV};

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintJob {
    pub image: RgbImage,
    /// `true` marks pixels to fill.
    pub mask: HoleMask,
    pub prompt: String,
}

impl InpaintJob {
    pub fn new(image: RgbImage, mask: HoleMask, prompt: impl Into<String>) -> Result<Self> {
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::shape(format!(
                "image is {}x{} but mask is {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        Ok(Self {
            image,
            mask,
            prompt: prompt.into(),
        })
    }
}

/// Camera the image was taken from. Remote services ignore it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewContext {
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

pub trait Inpainter: Send + Sync {
    /// May repaint any pixel; callers go through [`inpaint`].
    fn fill(&self, job: &InpaintJob, view: &ViewContext) -> Result<RgbImage>;
}

pub trait DepthEstimator: Send + Sync {
    fn estimate(&self, image: &RgbImage, view: &ViewContext) -> Result<DepthMap>;
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &RgbImage) -> Result<String>;
}

/// Runs `backend` and composites its output under the original image, so
/// pixels outside the mask are returned bit-exactly.
pub fn inpaint(backend: &dyn Inpainter, job: &InpaintJob, view: &ViewContext) -> Result<RgbImage> {
    if !job.mask.any() {
        return Ok(job.image.clone());
    }
    let filled = backend.fill(job, view)?;
    if !filled.same_shape(&job.image) {
        return Err(Error::Protocol(format!(
            "inpainter returned {}x{} for a {}x{} job",
            filled.width, filled.height, job.image.width, job.image.height
        )));
    }
    let mut out = job.image.clone();
    for (i, &hole) in job.mask.bits.iter().enumerate() {
        if hole {
            out.data[i] = filled.data[i];
        }
    }
    Ok(out)
}

pub fn estimate_depth(backend: &dyn DepthEstimator, image: &RgbImage, view: &ViewContext) -> Result<DepthMap> {
    let depth = backend.estimate(image, view)?;
    if depth.width != image.width || depth.height != image.height {
        return Err(Error::Protocol(format!(
            "depth service returned {}x{} for a {}x{} image",
            depth.width, depth.height, image.width, image.height
        )));
    }
    Ok(depth)
}

/// Tries `primary` and answers with `fallback` when it fails.
pub struct OrFallback<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: Inpainter, F: Inpainter> Inpainter for OrFallback<P, F> {
    fn fill(&self, job: &InpaintJob, view: &ViewContext) -> Result<RgbImage> {
        self.primary.fill(job, view).or_else(|e| {
            warn!("inpaint service failed, using fallback: {e}");
            self.fallback.fill(job, view)
        })
    }
}

impl<P: DepthEstimator, F: DepthEstimator> DepthEstimator for OrFallback<P, F> {
    fn estimate(&self, image: &RgbImage, view: &ViewContext) -> Result<DepthMap> {
        self.primary.estimate(image, view).or_else(|e| {
            warn!("depth service failed, using fallback: {e}");
            self.fallback.estimate(image, view)
        })
    }
}

impl<P: Captioner, F: Captioner> Captioner for OrFallback<P, F> {
    fn caption(&self, image: &RgbImage) -> Result<String> {
        self.primary.caption(image).or_else(|e| {
            warn!("caption service failed, using fallback: {e}");
            self.fallback.caption(image)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FallbackConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub prompt: String,
}

impl Default for FallbackConfig {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 5.0,
            prompt: "anime background, empty scene".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    External,
    #[default]
    Fallback,
}

/// The three services used by the scene pipeline.
pub struct Services {
    pub inpainter: Box<dyn Inpainter>,
    pub depth: Box<dyn DepthEstimator>,
    pub captioner: Box<dyn Captioner>,
}

impl Services {
    pub fn fallback(cfg: &FallbackConfig) -> Self {
        Self {
            inpainter: Box::new(PushPullInpainter),
            depth: Box::new(GradientDepth::new(cfg.d_min, cfg.d_max)),
            captioner: Box::new(StaticCaption(cfg.prompt.clone())),
        }
    }

    pub fn external(endpoint: &ServiceEndpoint, fallback_on_error: bool, cfg: &FallbackConfig) -> Result<Self> {
        let client = HttpClient::new(endpoint.clone())?;
        if !fallback_on_error {
            return Ok(Self {
                inpainter: Box::new(client.clone()),
                depth: Box::new(client.clone()),
                captioner: Box::new(client),
            });
        }
        Ok(Self {
            inpainter: Box::new(OrFallback {
                primary: client.clone(),
                fallback: PushPullInpainter,
            }),
            depth: Box::new(OrFallback {
                primary: client.clone(),
                fallback: GradientDepth::new(cfg.d_min, cfg.d_max),
            }),
            captioner: Box::new(OrFallback {
                primary: client,
                fallback: StaticCaption(cfg.prompt.clone()),
            }),
        })
    }
}

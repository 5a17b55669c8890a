//! JSON-over-HTTP client; images travel as base64 PNG.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::debug;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Captioner, DepthEstimator, InpaintJob, Inpainter, ViewContext};
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::rgbd_warp::DepthMap;

/// Overrides [`ServiceEndpoint::base_url`] when set.
pub const ENDPOINT_ENV: &str = "DREAMSCENE_ENDPOINT";

const MAX_BODY_BYTES: u64 = 512 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceEndpoint {
    pub base_url: String,
    /// Per-attempt timeout in seconds.
    pub timeout: f64,
    pub retries: u32,
}

impl Default for ServiceEndpoint {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080".into(),
            timeout: 60.0,
            retries: 2,
        }
    }
}

impl ServiceEndpoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout > 0.0) || !self.timeout.is_finite() {
            return Err(Error::invalid(format!("timeout must be positive, got {}", self.timeout)));
        }
        if self.base_url.is_empty() {
            return Err(Error::invalid("empty service base_url"));
        }
        Ok(())
    }

    /// Applies the environment override, if any.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        self
    }
}

#[derive(Clone)]
pub struct HttpClient {
    endpoint: ServiceEndpoint,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient").field("endpoint", &self.endpoint).finish()
    }
}

impl HttpClient {
    pub fn new(endpoint: ServiceEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self { endpoint, agent })
    }

    pub fn endpoint(&self) -> &ServiceEndpoint {
        &self.endpoint
    }

    /// Posts `body` to `route`. Transport failures are retried; any reply
    /// other than 200 with a JSON body is a protocol error.
    fn post(&self, route: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{route}", self.endpoint.base_url.trim_end_matches('/'));
        let payload = body.to_string();
        let attempts = self.endpoint.retries as usize + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            debug!("POST {url} (attempt {attempt}/{attempts})");
            let resp = self
                .agent
                .post(&url)
                .header("Content-Type", "application/json")
                .send(payload.as_str());
            let mut resp = match resp {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = match resp.body_mut().with_config().limit(MAX_BODY_BYTES).read_to_string() {
                Ok(t) => t,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            if status != 200 {
                return Err(Error::Protocol(format!("{url} answered HTTP {status}")));
            }
            return serde_json::from_str(&text)
                .map_err(|e| Error::Protocol(format!("{url} returned invalid JSON: {e}")));
        }
        Err(Error::ServiceUnavailable {
            attempts,
            message: format!("{url}: {last}"),
        })
    }
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a str> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Protocol(format!("response has no string field {key:?}")))
}

fn decode_b64(s: &str) -> Result<Vec<u8>> {
    B64.decode(s)
        .map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))
}

impl Inpainter for HttpClient {
    fn fill(&self, job: &InpaintJob, _: &ViewContext) -> Result<RgbImage> {
        let body = json!({
            "image": B64.encode(job.image.to_png_bytes()?),
            "mask": B64.encode(job.mask.to_png_bytes()?),
            "prompt": job.prompt,
        });
        let reply = self.post("inpaint", &body)?;
        RgbImage::from_png_bytes(&decode_b64(field(&reply, "image")?)?)
            .map_err(|e| Error::Protocol(format!("inpaint image does not decode: {e}")))
    }
}

impl DepthEstimator for HttpClient {
    fn estimate(&self, image: &RgbImage, _: &ViewContext) -> Result<DepthMap> {
        let reply = self.post("depth", &json!({ "image": B64.encode(image.to_png_bytes()?) }))?;
        DepthMap::from_bytes(&decode_b64(field(&reply, "depth")?)?)
            .map_err(|e| Error::Protocol(format!("depth blob does not decode: {e}")))
    }
}

impl Captioner for HttpClient {
    fn caption(&self, image: &RgbImage) -> Result<String> {
        let reply = self.post("caption", &json!({ "image": B64.encode(image.to_png_bytes()?) }))?;
        Ok(field(&reply, "caption")?.to_string())
    }
}

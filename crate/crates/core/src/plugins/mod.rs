//! Client contracts for external capability providers (foreground
//! segmenter, image/text embedders, class-posterior classifier) with
//! deterministic built-in stubs.
//!
//! Payloads: segmenter PPM in / PGM out; embedders PPM or UTF-8 text in /
//! rank-1 `LTR1` out; classifier PPM in / rank-1 `LTR1` probabilities out.

mod stubs;
pub mod transport;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BlendMask, Image, MaskProvenance};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use stubs::{gray_8x8, StubClassifier, StubImageEmbedder, StubSegmenter, StubTextEmbedder};
pub use transport::Transport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginKind {
    Segmenter,
    ImageEmbedder,
    TextEmbedder,
    Classifier,
}

impl PluginKind {
    /// Environment variable holding the endpoint address for this kind.
    pub fn env_var(self) -> &'static str {
        match self {
            PluginKind::Segmenter => "RETOUCH_SEGMENTER",
            PluginKind::ImageEmbedder => "RETOUCH_IMAGE_EMBEDDER",
            PluginKind::TextEmbedder => "RETOUCH_TEXT_EMBEDDER",
            PluginKind::Classifier => "RETOUCH_CLASSIFIER",
        }
    }
}

pub const TIMEOUT_ENV: &str = "RETOUCH_PLUGIN_TIMEOUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginEndpoint {
    pub kind: PluginKind,
    pub transport: Transport,
    pub timeout_secs: f64,
    /// Expected output length for embedders/classifiers, when known.
    pub declared_dim: Option<usize>,
}

impl PluginEndpoint {
    pub fn new(kind: PluginKind, transport: Transport, timeout_secs: f64) -> Result<Self> {
        if !(timeout_secs > 0.0 && timeout_secs.is_finite()) {
            return Err(Error::validation("timeout", "must be positive"));
        }
        Ok(Self {
            kind,
            transport,
            timeout_secs,
            declared_dim: None,
        })
    }

    /// Endpoint from the environment, `None` when the variable is unset.
    pub fn from_env(kind: PluginKind) -> Result<Option<Self>> {
        let Ok(spec) = std::env::var(kind.env_var()) else {
            return Ok(None);
        };
        let timeout = match std::env::var(TIMEOUT_ENV) {
            Ok(t) => t
                .parse::<f64>()
                .map_err(|_| Error::validation(TIMEOUT_ENV, "not a number"))?,
            Err(_) => 30.0,
        };
        Self::new(kind, Transport::parse(&spec)?, timeout).map(Some)
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    fn call(&self, payload: &[u8], suffix: &str) -> Result<Vec<u8>> {
        transport::exchange(&self.transport, payload, suffix, self.timeout())
    }

    fn protocol(&self, reason: impl Into<String>) -> Error {
        Error::Protocol {
            endpoint: self.transport.describe(),
            reason: reason.into(),
        }
    }

    fn vector(&self, bytes: &[u8]) -> Result<Vec<f64>> {
        let t = Tensor::<f64>::from_container_bytes(bytes).map_err(|e| self.protocol(e.to_string()))?;
        if t.shape().len() != 1 {
            return Err(self.protocol(format!("expected rank-1 vector, got {:?}", t.shape())));
        }
        if let Some(d) = self.declared_dim {
            if t.len() != d {
                return Err(Error::Plugin {
                    endpoint: self.transport.describe(),
                    reason: format!("dimension {} does not match declared {d}", t.len()),
                });
            }
        }
        Ok(t.into_data())
    }
}

pub trait Segmenter<T: Scalar>: Send + Sync {
    /// Binary foreground mask at image resolution.
    fn segment(&self, image: &Image<T>) -> Result<BlendMask<T>>;
}

pub trait ImageEmbedder<T: Scalar>: Send + Sync {
    /// Unit-norm embedding.
    fn embed_image(&self, image: &Image<T>) -> Result<Vec<f64>>;
}

pub trait TextEmbedder: Send + Sync {
    /// Unit-norm embedding.
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub trait Classifier<T: Scalar>: Send + Sync {
    /// Class posterior `p(y | x)`.
    fn classify(&self, image: &Image<T>) -> Result<Vec<f64>>;
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Remote provider reached through a [`PluginEndpoint`].
#[derive(Debug, Clone)]
pub struct Remote {
    pub endpoint: PluginEndpoint,
}

impl Remote {
    pub fn new(endpoint: PluginEndpoint) -> Self {
        Self { endpoint }
    }
}

impl<T: Scalar> Segmenter<T> for Remote {
    fn segment(&self, image: &Image<T>) -> Result<BlendMask<T>> {
        let bytes = self.endpoint.call(&image.to_ppm_bytes(), ".ppm")?;
        let mask = BlendMask::<T>::from_pgm_bytes(&bytes, MaskProvenance::Segmenter)
            .map_err(|e| self.endpoint.protocol(e.to_string()))?;
        if mask.dims() != (image.height(), image.width()) {
            return Err(self.endpoint.protocol("mask size differs from image size"));
        }
        // providers may antialias; snap to binary
        let bits = mask.to_bools();
        BlendMask::from_bools(mask.height(), mask.width(), &bits, MaskProvenance::Segmenter)
    }
}

impl<T: Scalar> ImageEmbedder<T> for Remote {
    fn embed_image(&self, image: &Image<T>) -> Result<Vec<f64>> {
        let bytes = self.endpoint.call(&image.to_ppm_bytes(), ".ppm")?;
        let mut v = self.endpoint.vector(&bytes)?;
        l2_normalize(&mut v);
        Ok(v)
    }
}

impl TextEmbedder for Remote {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let bytes = self.endpoint.call(text.as_bytes(), ".txt")?;
        let mut v = self.endpoint.vector(&bytes)?;
        l2_normalize(&mut v);
        Ok(v)
    }
}

impl<T: Scalar> Classifier<T> for Remote {
    fn classify(&self, image: &Image<T>) -> Result<Vec<f64>> {
        let bytes = self.endpoint.call(&image.to_ppm_bytes(), ".ppm")?;
        let p = self.endpoint.vector(&bytes)?;
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-4 {
            return Err(self.endpoint.protocol("posterior is not a probability vector"));
        }
        Ok(p.into_iter().map(|x| x / sum).collect())
    }
}

/// Cosine similarity of two vectors (0 when either is zero).
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

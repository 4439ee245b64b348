//! Denoiser abstraction, text conditions, and the built-in toy backend.

mod codec;
pub mod external;
mod toy;

use serde::{Deserialize, Serialize};

use crate::attention::{OverrideBundle, TapSink};
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::{LatentTensor, Tensor};

pub use codec::{LatentCodec, ToyCodec};
pub use toy::{make_toy_backend, ToyBackend, ToyBackendSpec};

pub const BOS: &str = "<bos>";
pub const DEFAULT_SPECIAL_TOKEN: &str = "<*>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub index: usize,
    pub kind: AttnKind,
    /// Spatial grid (rows, cols) of the layer's query tokens.
    pub resolution: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendIdentity {
    Vanilla,
    Personalized,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionVariant {
    Personalized,
    TokenRemoved,
    Neutral,
    Empty,
}

/// Tokenized prompt with its embedding (one row per token, `<bos>` first).
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition<T> {
    pub tokens: Vec<String>,
    pub embedding: Tensor<T>,
    pub variant: ConditionVariant,
}

impl<T: Scalar> TextCondition<T> {
    pub fn encode<D: Denoiser<T> + ?Sized>(
        backend: &D,
        words: &[String],
        variant: ConditionVariant,
    ) -> Result<Self> {
        let mut tokens = Vec::with_capacity(words.len() + 1);
        tokens.push(BOS.to_string());
        tokens.extend(words.iter().cloned());
        let embedding = backend.embed_tokens(&tokens)?;
        Ok(Self {
            tokens,
            embedding,
            variant,
        })
    }

    pub fn empty<D: Denoiser<T> + ?Sized>(backend: &D) -> Result<Self> {
        Self::encode(backend, &[], ConditionVariant::Empty)
    }

    pub fn position_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }
}

/// Conditional noise predictor exposing per-layer attention taps.
///
/// `forward` must honour `overrides` verbatim (replacement Q/K/V or φ per
/// layer) and, when `taps` is given, push the effective variables of every
/// attention layer in catalog order.
pub trait Denoiser<T: Scalar>: Send + Sync {
    fn identity(&self) -> BackendIdentity;

    fn catalog(&self) -> &[LayerDesc];

    /// `(C, H_lat, W_lat)`.
    fn latent_shape(&self) -> [usize; 3];

    fn text_dim(&self) -> usize;

    fn embed_tokens(&self, tokens: &[String]) -> Result<Tensor<T>>;

    fn forward(
        &self,
        z: &LatentTensor<T>,
        cond: &TextCondition<T>,
        overrides: Option<&OverrideBundle<T>>,
        taps: Option<&mut TapSink<T>>,
    ) -> Result<Tensor<T>>;
}

/// Noise prediction with classifier-free guidance
/// `ε = ε_uncond + w (ε_cond − ε_uncond)`. Overrides and taps apply to the
/// conditional pass only; `w = 1` runs the conditional pass alone.
pub fn denoise<T: Scalar, D: Denoiser<T> + ?Sized>(
    backend: &D,
    z: &LatentTensor<T>,
    cond: &TextCondition<T>,
    overrides: Option<&OverrideBundle<T>>,
    taps: Option<&mut TapSink<T>>,
    guidance_scale: f64,
) -> Result<Tensor<T>> {
    if cond.embedding.shape().len() != 2 || cond.embedding.shape()[1] != backend.text_dim() {
        return Err(Error::Condition(format!(
            "embedding shape {:?} does not match text dim {}",
            cond.embedding.shape(),
            backend.text_dim()
        )));
    }
    if let Some(o) = overrides {
        o.validate_against(backend.catalog())?;
    }
    let eps_cond = backend.forward(z, cond, overrides, taps)?;
    if guidance_scale == 1.0 {
        return Ok(eps_cond);
    }
    let uncond = TextCondition::empty(backend)?;
    let eps_uncond = backend.forward(z, &uncond, None, None)?;
    let w = cast::<T>(guidance_scale);
    eps_uncond.zip_map(&eps_cond, |u, c| u + w * (c - u))
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_string).collect()
}

/// The three conditions used by the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions<T> {
    /// `y_p`: the prompt with the special token.
    pub personalized: TextCondition<T>,
    /// `y_p⁻`: special token removed, or replaced by the class word.
    pub token_removed: TextCondition<T>,
    /// `y_r`: "a photo of <special>".
    pub neutral: TextCondition<T>,
}

pub fn derive_conditions<T: Scalar, D: Denoiser<T> + ?Sized>(
    backend: &D,
    prompt: &str,
    special_token: &str,
    class_word: Option<&str>,
) -> Result<Conditions<T>> {
    let words = tokenize(prompt);
    let hits = words.iter().filter(|w| *w == special_token).count();
    if hits != 1 {
        return Err(Error::Condition(format!(
            "prompt must contain `{special_token}` exactly once, found {hits}"
        )));
    }
    let removed: Vec<String> = words
        .iter()
        .filter_map(|w| {
            if w == special_token {
                class_word.map(str::to_string)
            } else {
                Some(w.clone())
            }
        })
        .collect();
    let neutral: Vec<String> = ["a", "photo", "of", special_token]
        .iter()
        .map(|s| s.to_string())
        .collect();
    Ok(Conditions {
        personalized: TextCondition::encode(backend, &words, ConditionVariant::Personalized)?,
        token_removed: TextCondition::encode(backend, &removed, ConditionVariant::TokenRemoved)?,
        neutral: TextCondition::encode(backend, &neutral, ConditionVariant::Neutral)?,
    })
}

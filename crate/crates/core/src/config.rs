//! Run configuration: defaults, JSON loading, and invariant checks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Prompt difficulty preset; selects the number of vanilla layout steps when
/// `lambda1` is not given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Normal,
    Challenging,
}

impl Profile {
    pub fn default_lambda1(self) -> usize {
        match self {
            Profile::Normal => 5,
            Profile::Challenging => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of sampling iterations.
    #[serde(rename = "T")]
    pub steps: usize,
    /// Vanilla-denoiser iterations at the start of layout generation.
    pub lambda1: usize,
    /// The last `lambda2` retouch iterations take reference K/V instead of layout Q/K/V.
    pub lambda2: usize,
    /// First sampling iteration (1-based) with mask blending.
    pub blend_start: usize,
    pub blend_enabled: bool,
    pub ca_threshold: f64,
    pub volume_threshold: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub latent_shape: [usize; 3],
    pub image_size: [usize; 2],
    pub beta_start: f64,
    pub beta_end: f64,
    pub profile: Profile,
    /// Layers receiving swapped attention variables; `None` means every layer.
    pub swap_layers: Option<Vec<usize>>,
    /// Cross-attention layers averaged into the cross-attention mask; `None` means all.
    pub mask_layers: Option<Vec<usize>>,
    /// Whether layout-source iterations also replace the target self-attention query.
    pub override_self_query: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lambda1: 5,
            lambda2: 10,
            blend_start: 31,
            blend_enabled: true,
            ca_threshold: 0.35,
            volume_threshold: 16,
            guidance_scale: 1.0,
            seed: 0,
            latent_shape: [4, 8, 8],
            image_size: [64, 64],
            beta_start: 1e-4,
            beta_end: 2e-2,
            profile: Profile::Normal,
            swap_layers: None,
            mask_layers: None,
            override_self_query: true,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "T",
    "lambda1",
    "lambda2",
    "blend_start",
    "blend_enabled",
    "ca_threshold",
    "volume_threshold",
    "guidance_scale",
    "seed",
    "latent_shape",
    "image_size",
    "beta_start",
    "beta_end",
    "profile",
    "swap_layers",
    "mask_layers",
    "override_self_query",
];

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.steps;
        if t == 0 {
            return Err(Error::validation("T", "must be at least 1"));
        }
        if self.lambda1 > t {
            return Err(Error::validation("lambda1", format!("{} exceeds T={t}", self.lambda1)));
        }
        if self.lambda2 > t {
            return Err(Error::validation("lambda2", format!("{} exceeds T={t}", self.lambda2)));
        }
        if self.blend_start == 0 || self.blend_start > t {
            return Err(Error::validation(
                "blend_start",
                format!("{} outside [1, T={t}]", self.blend_start),
            ));
        }
        if !(self.ca_threshold > 0.0 && self.ca_threshold < 1.0) {
            return Err(Error::validation("ca_threshold", "must lie in (0, 1)"));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::validation("guidance_scale", "must be finite and >= 0"));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::validation(
                "beta_start",
                "need 0 < beta_start <= beta_end < 1",
            ));
        }
        if self.latent_shape.contains(&0) {
            return Err(Error::validation("latent_shape", "dimensions must be positive"));
        }
        let [_, lh, lw] = self.latent_shape;
        let [ih, iw] = self.image_size;
        if ih == 0 || iw == 0 || ih % lh != 0 || iw % lw != 0 {
            return Err(Error::validation(
                "image_size",
                format!("{ih}x{iw} must be a positive multiple of the latent grid {lh}x{lw}"),
            ));
        }
        Ok(())
    }

    /// Parses a JSON document. Unknown keys are returned as warnings and
    /// otherwise ignored; absent keys take their defaults.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        if text.trim().is_empty() {
            return Ok((Self::default(), Vec::new()));
        }
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::validation("config", format!("not valid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(Error::validation("config", "top level must be an object"));
        };
        Self::from_map(map)
    }

    fn from_map(mut map: Map<String, Value>) -> Result<(Self, Vec<String>)> {
        let mut warnings = Vec::new();
        let unknown: Vec<String> = map
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        for key in unknown {
            map.remove(&key);
            warnings.push(format!("unknown config key `{key}` ignored"));
        }
        let explicit_lambda1 = map.contains_key("lambda1");
        let mut cfg: PipelineConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::validation("config", e.to_string()))?;
        if !explicit_lambda1 {
            cfg.lambda1 = cfg.profile.default_lambda1();
        }
        cfg.validate()?;
        Ok((cfg, warnings))
    }

    /// Applies key/value overrides on top of `self`, with the same
    /// precedence rules as a file (explicit keys win).
    pub fn merged_with(&self, overrides: Map<String, Value>) -> Result<(Self, Vec<String>)> {
        let Value::Object(mut base) = serde_json::to_value(self).expect("config serializes")
        else {
            unreachable!()
        };
        // A profile override should re-derive lambda1 unless lambda1 is also overridden.
        if overrides.contains_key("profile") && !overrides.contains_key("lambda1") {
            base.remove("lambda1");
        }
        for (k, v) in overrides {
            base.insert(k, v);
        }
        Self::from_map(base)
    }

    /// Sampling iteration `s` (1-based, generation order) to timestep index.
    pub fn timestep_of(&self, s: usize) -> usize {
        self.steps + 1 - s
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (cfg, warnings) = PipelineConfig::parse(&text)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(cfg)
}

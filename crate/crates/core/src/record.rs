//! Run records: a serializable summary of one pipeline run plus the
//! in-memory artifacts it refers to.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::Branch;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::image::{BlendMask, Image};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub sha256: String,
    /// Path relative to the run directory; set once persisted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutModel {
    Vanilla,
    Personalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutStep {
    pub s: usize,
    pub timestep: usize,
    pub model: LayoutModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetouchStep {
    pub s: usize,
    pub timestep: usize,
    pub branch: Branch,
    pub blend: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub latents: BTreeMap<String, ArtifactRef>,
    pub masks: BTreeMap<String, ArtifactRef>,
    pub images: BTreeMap<String, ArtifactRef>,
    pub timings_ms: BTreeMap<String, f64>,
    pub layout_steps: Vec<LayoutStep>,
    pub retouch_steps: Vec<RetouchStep>,
}

impl RunRecord {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            prompt: None,
            latents: BTreeMap::new(),
            masks: BTreeMap::new(),
            images: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
            layout_steps: Vec::new(),
            retouch_steps: Vec::new(),
        }
    }

    /// Every artifact hash, keyed `kind/name`; independent of timings and paths.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        let groups = [("latents", &self.latents), ("masks", &self.masks), ("images", &self.images)];
        groups
            .iter()
            .flat_map(|(kind, m)| m.iter().map(move |(k, v)| (format!("{kind}/{k}"), v.sha256.clone())))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("run record: {e}")))
    }
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Intermediates held in memory until written.
#[derive(Debug, Clone)]
pub struct RunArtifacts<T> {
    pub latents: BTreeMap<String, Tensor<T>>,
    pub masks: BTreeMap<String, BlendMask<T>>,
    pub images: BTreeMap<String, Image<T>>,
}

impl<T> Default for RunArtifacts<T> {
    fn default() -> Self {
        Self {
            latents: BTreeMap::new(),
            masks: BTreeMap::new(),
            images: BTreeMap::new(),
        }
    }
}

/// Record plus artifacts of a run (or stage).
#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub record: RunRecord,
    pub artifacts: RunArtifacts<T>,
}

impl<T: Scalar> RunOutput<T> {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            record: RunRecord::new(config),
            artifacts: RunArtifacts::default(),
        }
    }

    pub fn add_latent(&mut self, name: &str, t: &Tensor<T>) {
        self.record.latents.insert(
            name.into(),
            ArtifactRef {
                sha256: t.content_hash(),
                path: None,
            },
        );
        self.artifacts.latents.insert(name.into(), t.clone());
    }

    pub fn add_mask(&mut self, name: &str, m: &BlendMask<T>) {
        self.record.masks.insert(
            name.into(),
            ArtifactRef {
                sha256: sha(&m.to_pgm_bytes()),
                path: None,
            },
        );
        self.artifacts.masks.insert(name.into(), m.clone());
    }

    pub fn add_image(&mut self, name: &str, img: &Image<T>) {
        self.record.images.insert(
            name.into(),
            ArtifactRef {
                sha256: sha(&img.to_ppm_bytes()),
                path: None,
            },
        );
        self.artifacts.images.insert(name.into(), img.clone());
    }

    /// Folds another stage's record and artifacts into this one.
    pub fn absorb(&mut self, other: RunOutput<T>) {
        let RunOutput { record, artifacts } = other;
        self.record.latents.extend(record.latents);
        self.record.masks.extend(record.masks);
        self.record.images.extend(record.images);
        self.record.timings_ms.extend(record.timings_ms);
        if !record.layout_steps.is_empty() {
            self.record.layout_steps = record.layout_steps;
        }
        if !record.retouch_steps.is_empty() {
            self.record.retouch_steps = record.retouch_steps;
        }
        self.artifacts.latents.extend(artifacts.latents);
        self.artifacts.masks.extend(artifacts.masks);
        self.artifacts.images.extend(artifacts.images);
    }

    /// Writes `latents/*.ltr`, `masks/*.pgm`, `images/*.ppm` and
    /// `record.json` under `dir`, filling in relative paths.
    pub fn persist(&mut self, dir: impl AsRef<Path>) -> Result<RunRecord> {
        let dir = dir.as_ref();
        for sub in ["latents", "masks", "images"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (name, t) in &self.artifacts.latents {
            let rel = format!("latents/{name}.ltr");
            crate::tensor::save_tensor(t, dir.join(&rel))?;
            if let Some(r) = self.record.latents.get_mut(name) {
                r.path = Some(rel);
            }
        }
        for (name, m) in &self.artifacts.masks {
            let rel = format!("masks/{name}.pgm");
            m.save_pgm(dir.join(&rel))?;
            if let Some(r) = self.record.masks.get_mut(name) {
                r.path = Some(rel);
            }
        }
        for (name, img) in &self.artifacts.images {
            let rel = format!("images/{name}.ppm");
            img.save_ppm(dir.join(&rel))?;
            if let Some(r) = self.record.images.get_mut(name) {
                r.path = Some(rel);
            }
        }
        let path = dir.join("record.json");
        fs::write(&path, self.record.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(self.record.clone())
    }
}

//! Out-of-process denoisers.
//!
//! A provider is a command invoked as `<command> <verb> <request-dir>`.
//! The request directory holds `request.json` plus any referenced `LTR1`
//! tensor files; the provider writes `response.json` (and its own tensor
//! files) into the same directory and exits 0.
//!
//! | verb       | request                                   | response                               |
//! |------------|-------------------------------------------|----------------------------------------|
//! | `describe` | `{}`                                      | [`Description`]                        |
//! | `embed`    | `{"tokens": [...]}`                       | `{"embedding": file}`                  |
//! | `forward`  | [`ForwardRequest`]                        | [`ForwardResponse`]                    |
//!
//! [`serve`] implements the provider side on top of any [`Denoiser`].

use std::path::Path;
use std::time::Duration;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{AttnKind, BackendIdentity, Denoiser, LayerDesc, TextCondition};
use crate::attention::{LayerOverride, LayerTap, OverrideBundle, PhiOverride, TapSink};
use crate::error::{Error, Result};
use crate::image::{BlendMask, MaskProvenance};
use crate::plugins::transport::run_subprocess;
use crate::scalar::Scalar;
use crate::tensor::{load_tensor, save_tensor, LatentTensor, Tensor};

pub const REQUEST_FILE: &str = "request.json";
pub const RESPONSE_FILE: &str = "response.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub latent_shape: [usize; 3],
    pub text_dim: usize,
    pub layers: Vec<LayerDesc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedRequest {
    tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedResponse {
    embedding: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OverrideFiles {
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<String>,
    /// With `phi_mask`: blend the live output with `phi` under this mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_mask: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardRequest {
    pub timestep: usize,
    pub tokens: Vec<String>,
    pub latent: String,
    pub condition: String,
    pub taps: bool,
    #[serde(default)]
    pub overrides: Vec<OverrideFiles>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TapFiles {
    pub layer: usize,
    pub kind: AttnKind,
    pub q: String,
    pub k: String,
    pub v: String,
    pub probs: String,
    pub phi: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardResponse {
    pub eps: String,
    #[serde(default)]
    pub taps: Vec<TapFiles>,
}

fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn put<T: Scalar>(dir: &Path, name: String, t: &Tensor<T>) -> Result<String> {
    save_tensor(t, dir.join(&name))?;
    Ok(name)
}

fn get<T: Scalar>(dir: &Path, name: &str) -> Result<Tensor<T>> {
    if name.contains('/') || name.contains("..") {
        return Err(Error::Format(format!("file reference `{name}` escapes the request directory")));
    }
    load_tensor(dir.join(name))
}

/// Client side of the provider protocol.
pub struct ExternalDenoiser {
    command: Vec<String>,
    timeout: Duration,
    description: Description,
}

impl ExternalDenoiser {
    /// Spawns `describe` once and caches the layer catalog.
    pub fn connect(command: Vec<String>, timeout: Duration) -> Result<Self> {
        let mut this = Self {
            command,
            timeout,
            description: Description {
                latent_shape: [0; 3],
                text_dim: 0,
                layers: Vec::new(),
            },
        };
        let dir = this.request_dir()?;
        write_json(&dir.path().join(REQUEST_FILE), &serde_json::json!({}))?;
        this.description = this.call("describe", dir.path())?;
        for (i, l) in this.description.layers.iter().enumerate() {
            if l.index != i {
                return Err(this.protocol("layer catalog must be indexed 0..n in order"));
            }
        }
        Ok(this)
    }

    fn endpoint(&self) -> String {
        self.command.join(" ")
    }

    fn protocol(&self, reason: impl Into<String>) -> Error {
        Error::Protocol {
            endpoint: self.endpoint(),
            reason: reason.into(),
        }
    }

    fn request_dir(&self) -> Result<tempfile::TempDir> {
        tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))
    }

    fn call<V: DeserializeOwned>(&self, verb: &str, dir: &Path) -> Result<V> {
        run_subprocess(&self.command, &[verb.to_string(), dir.display().to_string()], self.timeout)?;
        read_json(&dir.join(RESPONSE_FILE)).map_err(|e| self.protocol(e.to_string()))
    }
}

impl<T: Scalar> Denoiser<T> for ExternalDenoiser {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::External
    }

    fn catalog(&self) -> &[LayerDesc] {
        &self.description.layers
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.description.latent_shape
    }

    fn text_dim(&self) -> usize {
        self.description.text_dim
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Tensor<T>> {
        let dir = self.request_dir()?;
        write_json(
            &dir.path().join(REQUEST_FILE),
            &EmbedRequest {
                tokens: tokens.to_vec(),
            },
        )?;
        let resp: EmbedResponse = self.call("embed", dir.path())?;
        let t: Tensor<T> = get(dir.path(), &resp.embedding).map_err(|e| self.protocol(e.to_string()))?;
        if t.shape() != [tokens.len(), self.description.text_dim] {
            return Err(self.protocol(format!("embedding has shape {:?}", t.shape())));
        }
        Ok(t)
    }

    fn forward(
        &self,
        z: &LatentTensor<T>,
        cond: &TextCondition<T>,
        overrides: Option<&OverrideBundle<T>>,
        taps: Option<&mut TapSink<T>>,
    ) -> Result<Tensor<T>> {
        let dir = self.request_dir()?;
        let d = dir.path();
        let mut files = Vec::new();
        for (&layer, o) in overrides.map(|b| &b.layers).into_iter().flatten() {
            let mut f = OverrideFiles {
                layer,
                ..Default::default()
            };
            let tag = |v: &str| format!("override_{layer}_{v}.ltr");
            if let Some(q) = &o.q {
                f.q = Some(put(d, tag("q"), q)?);
            }
            if let Some(k) = &o.k {
                f.k = Some(put(d, tag("k"), k)?);
            }
            if let Some(v) = &o.v {
                f.v = Some(put(d, tag("v"), v)?);
            }
            match &o.phi {
                Some(PhiOverride::Replace(p)) => f.phi = Some(put(d, tag("phi"), p)?),
                Some(PhiOverride::Blend { other, mask }) => {
                    f.phi = Some(put(d, tag("phi"), other)?);
                    f.phi_mask = Some(put(d, tag("mask"), mask.data())?);
                }
                None => {}
            }
            files.push(f);
        }
        let req = ForwardRequest {
            timestep: z.timestep,
            tokens: cond.tokens.clone(),
            latent: put(d, "latent.ltr".into(), &z.data)?,
            condition: put(d, "condition.ltr".into(), &cond.embedding)?,
            taps: taps.is_some(),
            overrides: files,
        };
        write_json(&d.join(REQUEST_FILE), &req)?;
        let resp: ForwardResponse = self.call("forward", d)?;
        let wrap = |e: Error| self.protocol(e.to_string());
        let eps: Tensor<T> = get(d, &resp.eps).map_err(wrap)?;
        if eps.shape() != z.data.shape() {
            return Err(self.protocol(format!("eps has shape {:?}", eps.shape())));
        }
        if let Some(sink) = taps {
            for t in &resp.taps {
                sink.push(LayerTap {
                    layer: t.layer,
                    kind: t.kind,
                    q: get(d, &t.q).map_err(wrap)?,
                    k: get(d, &t.k).map_err(wrap)?,
                    v: get(d, &t.v).map_err(wrap)?,
                    probs: get(d, &t.probs).map_err(wrap)?,
                    phi: get(d, &t.phi).map_err(wrap)?,
                });
            }
        }
        Ok(eps)
    }
}

/// Provider side: answers one request in `dir` using `backend`.
pub fn serve<T: Scalar>(backend: &dyn Denoiser<T>, verb: &str, dir: &Path) -> Result<()> {
    let out = dir.join(RESPONSE_FILE);
    match verb {
        "describe" => write_json(
            &out,
            &Description {
                latent_shape: backend.latent_shape(),
                text_dim: backend.text_dim(),
                layers: backend.catalog().to_vec(),
            },
        ),
        "embed" => {
            let req: EmbedRequest = read_json(&dir.join(REQUEST_FILE))?;
            let emb = backend.embed_tokens(&req.tokens)?;
            let embedding = put(dir, "embedding.ltr".into(), &emb)?;
            write_json(&out, &EmbedResponse { embedding })
        }
        "forward" => {
            let req: ForwardRequest = read_json(&dir.join(REQUEST_FILE))?;
            let z = LatentTensor::new(get(dir, &req.latent)?, req.timestep)?;
            let cond = TextCondition {
                tokens: req.tokens.clone(),
                embedding: get(dir, &req.condition)?,
                variant: super::ConditionVariant::Personalized,
            };
            let mut bundle = OverrideBundle::new();
            for f in &req.overrides {
                let load = |n: &Option<String>| n.as_deref().map(|n| get::<T>(dir, n)).transpose();
                let phi = match (load(&f.phi)?, load(&f.phi_mask)?) {
                    (Some(p), None) => Some(PhiOverride::Replace(p)),
                    (Some(other), Some(m)) => Some(PhiOverride::Blend {
                        other,
                        mask: BlendMask::new(m, MaskProvenance::Composite)?,
                    }),
                    (None, Some(_)) => return Err(Error::Format("phi_mask without phi".into())),
                    (None, None) => None,
                };
                bundle.layers.insert(
                    f.layer,
                    LayerOverride {
                        q: load(&f.q)?,
                        k: load(&f.k)?,
                        v: load(&f.v)?,
                        phi,
                    },
                );
            }
            let mut sink = TapSink::new();
            let overrides = (!bundle.layers.is_empty()).then_some(&bundle);
            let eps = backend.forward(&z, &cond, overrides, req.taps.then_some(&mut sink))?;
            let mut taps = Vec::with_capacity(sink.len());
            for t in &sink {
                let tag = |v: &str| format!("tap_{}_{v}.ltr", t.layer);
                taps.push(TapFiles {
                    layer: t.layer,
                    kind: t.kind,
                    q: put(dir, tag("q"), &t.q)?,
                    k: put(dir, tag("k"), &t.k)?,
                    v: put(dir, tag("v"), &t.v)?,
                    probs: put(dir, tag("probs"), &t.probs)?,
                    phi: put(dir, tag("phi"), &t.phi)?,
                });
            }
            let eps = put(dir, "eps.ltr".into(), &eps)?;
            write_json(&out, &ForwardResponse { eps, taps })
        }
        other => Err(Error::validation("verb", format!("unknown provider verb `{other}`"))),
    }
}

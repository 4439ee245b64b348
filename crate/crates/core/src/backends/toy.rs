//! Seeded toy attention denoiser: a small pre-norm transformer over the
//! latent grid with one self- and one cross-attention layer per block.
//!
//! The personalized variant shares every weight with the vanilla one and
//! adds a rank-1 update to the cross-attention key/value projections along
//! the special-token embedding direction.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{AttnKind, BackendIdentity, Denoiser, LayerDesc, TextCondition, DEFAULT_SPECIAL_TOKEN};
use crate::attention::{LayerOverride, LayerTap, OverrideBundle, PhiOverride, TapSink};
use crate::error::{Error, Result};
use crate::maskops::blend_latents;
use crate::ops::{matmul, matmul_bt, rms_norm_rows, softmax_rows};
use crate::scalar::{cast, Scalar};
use crate::seeds::{derive_seed, rng_for};
use crate::tensor::{LatentTensor, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackendSpec {
    pub seed: u64,
    pub n_blocks: usize,
    pub latent_shape: [usize; 3],
    pub d_model: usize,
    pub d_text: usize,
    /// Strength of the rank-1 personalization update; 0 disables it.
    pub personalization_delta: f64,
    pub special_token: String,
}

impl Default for ToyBackendSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_blocks: 2,
            latent_shape: [4, 8, 8],
            d_model: 32,
            d_text: 16,
            personalization_delta: 1.0,
            special_token: DEFAULT_SPECIAL_TOKEN.to_string(),
        }
    }
}

impl ToyBackendSpec {
    fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::validation("n_blocks", "must be positive"));
        }
        if self.latent_shape.contains(&0) {
            return Err(Error::validation("latent_shape", "dimensions must be positive"));
        }
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return Err(Error::validation("d_model", "must be a positive even number"));
        }
        if self.d_text == 0 {
            return Err(Error::validation("d_text", "must be positive"));
        }
        if !self.personalization_delta.is_finite() {
            return Err(Error::validation("personalization_delta", "must be finite"));
        }
        Ok(())
    }
}

struct Block<T> {
    self_q: Vec<T>,
    self_k: Vec<T>,
    self_v: Vec<T>,
    self_o: Vec<T>,
    cross_q: Vec<T>,
    cross_k: Vec<T>,
    cross_v: Vec<T>,
    cross_o: Vec<T>,
    mlp_in: Vec<T>,
    mlp_out: Vec<T>,
    /// Rank-1 personalization directions for cross K and V (length d_model).
    delta_k: Vec<T>,
    delta_v: Vec<T>,
}

struct Weights<T> {
    w_in: Vec<T>,
    pos: Vec<T>,
    w_out: Vec<T>,
    blocks: Vec<Block<T>>,
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            cast(x * std)
        })
        .collect()
}

impl<T: Scalar> Weights<T> {
    fn generate(spec: &ToyBackendSpec) -> Self {
        let mut rng = rng_for(spec.seed, "toy-backend/weights");
        let [c, h, w] = spec.latent_shape;
        let (d, dt) = (spec.d_model, spec.d_text);
        let n = h * w;
        let inv = |fan: usize| 1.0 / (fan as f64).sqrt();
        let w_in = normal(&mut rng, c * d, 1.0);
        let pos = normal(&mut rng, n * d, 0.5);
        let w_out = normal(&mut rng, d * c, 0.5 * inv(d));
        let blocks = (0..spec.n_blocks)
            .map(|_| Block {
                self_q: normal(&mut rng, d * d, inv(d)),
                self_k: normal(&mut rng, d * d, inv(d)),
                self_v: normal(&mut rng, d * d, inv(d)),
                self_o: normal(&mut rng, d * d, 0.5 * inv(d)),
                cross_q: normal(&mut rng, d * d, inv(d)),
                cross_k: normal(&mut rng, dt * d, inv(dt)),
                cross_v: normal(&mut rng, dt * d, inv(dt)),
                cross_o: normal(&mut rng, d * d, 0.5 * inv(d)),
                mlp_in: normal(&mut rng, d * 2 * d, inv(d)),
                mlp_out: normal(&mut rng, 2 * d * d, 0.5 * inv(2 * d)),
                delta_k: normal(&mut rng, d, inv(dt)),
                delta_v: normal(&mut rng, d, inv(dt)),
            })
            .collect();
        Self {
            w_in,
            pos,
            w_out,
            blocks,
        }
    }

    fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |xs: &[T]| {
            let mut buf = Vec::with_capacity(xs.len() * 8);
            for &x in xs {
                x.write_le(&mut buf);
            }
            hasher.update(&buf);
        };
        feed(&self.w_in);
        feed(&self.pos);
        feed(&self.w_out);
        for b in &self.blocks {
            for m in [
                &b.self_q, &b.self_k, &b.self_v, &b.self_o, &b.cross_q, &b.cross_k, &b.cross_v,
                &b.cross_o, &b.mlp_in, &b.mlp_out, &b.delta_k, &b.delta_v,
            ] {
                feed(m);
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Seeded toy denoiser. Cloning is cheap; weights are shared.
#[derive(Clone)]
pub struct ToyBackend<T> {
    spec: ToyBackendSpec,
    identity: BackendIdentity,
    weights: Arc<Weights<T>>,
    catalog: Vec<LayerDesc>,
    special_unit: Vec<T>,
}

impl<T: Scalar> std::fmt::Debug for ToyBackend<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackend")
            .field("identity", &self.identity)
            .field("spec", &self.spec)
            .finish()
    }
}

pub fn make_toy_backend<T: Scalar>(spec: ToyBackendSpec, identity: BackendIdentity) -> Result<ToyBackend<T>> {
    spec.validate()?;
    if identity == BackendIdentity::External {
        return Err(Error::validation("identity", "toy backends are vanilla or personalized"));
    }
    let weights = Arc::new(Weights::generate(&spec));
    let [_, h, w] = spec.latent_shape;
    let catalog = (0..spec.n_blocks)
        .flat_map(|b| {
            [
                LayerDesc { index: 2 * b, kind: AttnKind::SelfAttn, resolution: (h, w) },
                LayerDesc { index: 2 * b + 1, kind: AttnKind::Cross, resolution: (h, w) },
            ]
        })
        .collect();
    let special = token_vector::<f64>(&spec, &spec.special_token);
    let norm = special.iter().map(|x| x * x).sum::<f64>().sqrt();
    let special_unit = special.iter().map(|x| cast(x / norm)).collect();
    Ok(ToyBackend {
        spec,
        identity,
        weights,
        catalog,
        special_unit,
    })
}

fn token_vector<T: Scalar>(spec: &ToyBackendSpec, token: &str) -> Vec<T> {
    let mut rng = if token == spec.special_token {
        rng_for(spec.seed, "toy-backend/special-token")
    } else {
        rng_for(derive_seed(spec.seed, "toy-backend/token"), token)
    };
    normal(&mut rng, spec.d_text, 1.0)
}

fn timestep_embedding<T: Scalar>(t: usize, d: usize) -> Vec<T> {
    let half = d / 2;
    (0..d)
        .map(|k| {
            let freq = (-(1000f64).ln() * (k % half) as f64 / half as f64).exp();
            let x = t as f64 * freq;
            cast(if k < half { x.sin() } else { x.cos() })
        })
        .collect()
}

impl<T: Scalar> ToyBackend<T> {
    pub fn spec(&self) -> &ToyBackendSpec {
        &self.spec
    }

    /// Same weights under the other identity.
    pub fn with_identity(&self, identity: BackendIdentity) -> Result<Self> {
        if identity == BackendIdentity::External {
            return Err(Error::validation("identity", "toy backends are vanilla or personalized"));
        }
        Ok(Self {
            identity,
            ..self.clone()
        })
    }

    pub fn weights_hash(&self) -> String {
        self.weights.hash()
    }

    fn personalized(&self) -> bool {
        self.identity == BackendIdentity::Personalized && self.spec.personalization_delta != 0.0
    }

    fn check_override(
        layer: usize,
        o: &LayerOverride<T>,
        n: usize,
        d: usize,
        live_kv_rows: usize,
    ) -> Result<()> {
        let bad = |what: &str, shape: &[usize]| Error::Layer {
            layer,
            reason: format!("override {what} has shape {shape:?}"),
        };
        if let Some(q) = &o.q {
            if q.shape() != [n, d] {
                return Err(bad("Q", q.shape()));
            }
        }
        let k_rows = o.k.as_ref().map(|k| k.shape()[0]).unwrap_or(live_kv_rows);
        let v_rows = o.v.as_ref().map(|v| v.shape()[0]).unwrap_or(live_kv_rows);
        for (what, t) in [("K", &o.k), ("V", &o.v)] {
            if let Some(t) = t {
                if t.shape().len() != 2 || t.shape()[1] != d {
                    return Err(bad(what, t.shape()));
                }
            }
        }
        if k_rows != v_rows {
            return Err(Error::Layer {
                layer,
                reason: format!("effective K has {k_rows} rows but V has {v_rows}"),
            });
        }
        match &o.phi {
            Some(PhiOverride::Replace(p)) if p.shape() != [n, d] => Err(bad("phi", p.shape())),
            Some(PhiOverride::Blend { other, .. }) if other.shape() != [n, d] => {
                Err(bad("phi blend source", other.shape()))
            }
            _ => Ok(()),
        }
    }

    /// One attention layer; returns φ and pushes its tap.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        desc: &LayerDesc,
        q_live: Vec<T>,
        k_live: Vec<T>,
        v_live: Vec<T>,
        w_o: &[T],
        n: usize,
        over: Option<&LayerOverride<T>>,
        taps: &mut Option<&mut TapSink<T>>,
    ) -> Result<Vec<T>> {
        let d = self.spec.d_model;
        let live_rows = k_live.len() / d;
        if let Some(o) = over {
            Self::check_override(desc.index, o, n, d, live_rows)?;
        }
        let pick = |live: Vec<T>, o: Option<&Tensor<T>>| o.map(|t| t.data().to_vec()).unwrap_or(live);
        let q = pick(q_live, over.and_then(|o| o.q.as_ref()));
        let k = pick(k_live, over.and_then(|o| o.k.as_ref()));
        let v = pick(v_live, over.and_then(|o| o.v.as_ref()));
        let m = k.len() / d;
        let mut probs = matmul_bt(&q, &k, n, d, m);
        let scale = cast::<T>(1.0 / (d as f64).sqrt());
        for p in &mut probs {
            *p *= scale;
        }
        softmax_rows(&mut probs, m);
        let attended = matmul(&probs, &v, n, m, d);
        let mut phi = matmul(&attended, w_o, n, d, d);
        match over.and_then(|o| o.phi.as_ref()) {
            Some(PhiOverride::Replace(p)) => phi = p.data().to_vec(),
            Some(PhiOverride::Blend { other, mask }) => {
                let live = Tensor::new(&[n, d], phi)?;
                phi = blend_latents(&live, other, mask, desc.resolution)?.into_data();
            }
            None => {}
        }
        if let Some(sink) = taps.as_deref_mut() {
            sink.push(LayerTap {
                layer: desc.index,
                kind: desc.kind,
                q: Tensor::new(&[n, d], q)?,
                k: Tensor::new(&[m, d], k)?,
                v: Tensor::new(&[m, d], v)?,
                probs: Tensor::new(&[n, m], probs)?,
                phi: Tensor::new(&[n, d], phi.clone())?,
            });
        }
        Ok(phi)
    }
}

impl<T: Scalar> Denoiser<T> for ToyBackend<T> {
    fn identity(&self) -> BackendIdentity {
        self.identity
    }

    fn catalog(&self) -> &[LayerDesc] {
        &self.catalog
    }

    fn latent_shape(&self) -> [usize; 3] {
        self.spec.latent_shape
    }

    fn text_dim(&self) -> usize {
        self.spec.d_text
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Tensor<T>> {
        let dt = self.spec.d_text;
        let data: Vec<T> = tokens
            .iter()
            .flat_map(|t| token_vector::<T>(&self.spec, t))
            .collect();
        Tensor::new(&[tokens.len(), dt], data)
    }

    fn forward(
        &self,
        z: &LatentTensor<T>,
        cond: &TextCondition<T>,
        overrides: Option<&OverrideBundle<T>>,
        mut taps: Option<&mut TapSink<T>>,
    ) -> Result<Tensor<T>> {
        z.data.ensure_shape(&self.spec.latent_shape)?;
        let [c, h, w] = self.spec.latent_shape;
        let (n, d, dt) = (h * w, self.spec.d_model, self.spec.d_text);
        let text = cond.embedding.data();
        if cond.embedding.shape() != [cond.tokens.len(), dt] {
            return Err(Error::Condition("embedding rows must match tokens".into()));
        }
        let m_text = cond.tokens.len();
        if let Some(o) = overrides {
            o.validate_against(&self.catalog)?;
        }
        let wts = &self.weights;

        // tokens: (N, C) from channel-first latent
        let zd = z.data.data();
        let z_tok: Vec<T> = (0..n * c).map(|i| zd[(i % c) * n + i / c]).collect();
        let mut x = matmul(&z_tok, &wts.w_in, n, c, d);
        let temb = timestep_embedding::<T>(z.timestep, d);
        for (i, xv) in x.iter_mut().enumerate() {
            *xv += wts.pos[i] + temb[i % d];
        }

        // projection of each text row onto the special-token direction
        let special_proj: Vec<T> = text
            .chunks_exact(dt)
            .map(|row| row.iter().zip(&self.special_unit).map(|(&a, &b)| a * b).sum())
            .collect();
        let alpha = cast::<T>(self.spec.personalization_delta);

        for (b, blk) in wts.blocks.iter().enumerate() {
            let self_desc = &self.catalog[2 * b];
            let cross_desc = &self.catalog[2 * b + 1];

            let hn = rms_norm_rows(&x, d);
            let phi = self.attention(
                self_desc,
                matmul(&hn, &blk.self_q, n, d, d),
                matmul(&hn, &blk.self_k, n, d, d),
                matmul(&hn, &blk.self_v, n, d, d),
                &blk.self_o,
                n,
                overrides.and_then(|o| o.get(self_desc.index)),
                &mut taps,
            )?;
            for (xv, p) in x.iter_mut().zip(phi) {
                *xv += p;
            }

            let hn = rms_norm_rows(&x, d);
            let mut k = matmul(text, &blk.cross_k, m_text, dt, d);
            let mut v = matmul(text, &blk.cross_v, m_text, dt, d);
            if self.personalized() {
                for (j, &sp) in special_proj.iter().enumerate() {
                    for col in 0..d {
                        k[j * d + col] += alpha * sp * blk.delta_k[col];
                        v[j * d + col] += alpha * sp * blk.delta_v[col];
                    }
                }
            }
            let phi = self.attention(
                cross_desc,
                matmul(&hn, &blk.cross_q, n, d, d),
                k,
                v,
                &blk.cross_o,
                n,
                overrides.and_then(|o| o.get(cross_desc.index)),
                &mut taps,
            )?;
            for (xv, p) in x.iter_mut().zip(phi) {
                *xv += p;
            }

            let hn = rms_norm_rows(&x, d);
            let mut hidden = matmul(&hn, &blk.mlp_in, n, d, 2 * d);
            for hv in &mut hidden {
                *hv = hv.tanh();
            }
            let out = matmul(&hidden, &blk.mlp_out, n, 2 * d, d);
            for (xv, o) in x.iter_mut().zip(out) {
                *xv += o;
            }
        }

        let hn = rms_norm_rows(&x, d);
        let eps_tok = matmul(&hn, &wts.w_out, n, d, c);
        let eps: Vec<T> = (0..c * n).map(|i| eps_tok[(i % n) * c + i / n]).collect();
        Tensor::new(&[c, h, w], eps)
    }
}

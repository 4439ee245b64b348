//! Hyperparameter sweep over the layout switch step `lambda1`, one table
//! row of identity, fidelity and diversity metrics per value.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use crate::backends::{Denoiser, LatentCodec};
use crate::config::PipelineConfig;
use crate::error::{Error, Result, StageExt};
use crate::evalkit;
use crate::pipeline::{generate, GenerateOutput, PromptSpec};
use crate::plugins::{Classifier, ImageEmbedder, Segmenter, TextEmbedder};
use crate::scalar::Scalar;

/// The three models a `generate` run needs.
pub struct Models<T> {
    pub vanilla: Box<dyn Denoiser<T>>,
    pub personalized: Box<dyn Denoiser<T>>,
    pub codec: Box<dyn LatentCodec<T>>,
}

/// Segmenter plus the metric providers.
pub struct Instruments<'a, T> {
    pub segmenter: &'a dyn Segmenter<T>,
    pub image_embedder: &'a dyn ImageEmbedder<T>,
    pub text_embedder: &'a dyn TextEmbedder,
    pub classifier: &'a dyn Classifier<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda1: usize,
    pub runs: usize,
    pub identity: f64,
    pub fidelity: f64,
    /// Needs at least two runs with a detected subject.
    pub sigma2_avg: Option<f64>,
    /// Needs at least two runs.
    pub inception_score: Option<f64>,
}

pub const TABLE_HEADER: &str = "lambda1\truns\tidentity\tfidelity\tsigma2_avg\tinception_score";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

/// Tab-separated table with a header line.
pub fn table_tsv(rows: &[SweepRow]) -> String {
    let mut tsv = format!("{TABLE_HEADER}\n");
    for r in rows {
        tsv.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{}\t{}\n",
            r.lambda1,
            r.runs,
            r.identity,
            r.fidelity,
            fmt_opt(r.sigma2_avg),
            fmt_opt(r.inception_score)
        ));
    }
    tsv
}

/// One config per value, each validated against `base`.
pub fn sweep_configs(base: &PipelineConfig, values: &[usize]) -> Result<Vec<PipelineConfig>> {
    if values.is_empty() {
        return Err(Error::validation("lambda1 values", "empty"));
    }
    values
        .iter()
        .map(|&v| base.merged_with(Map::from_iter([("lambda1".to_string(), json!(v))])).map(|(c, _)| c))
        .collect()
}

/// Runs `samples` seeded generations (`base.seed`, `base.seed + 1`, ...)
/// for every lambda1 value and scores them. `on_run` sees every output
/// before scoring, e.g. to persist it.
pub fn sweep_lambda1<T: Scalar>(
    base: &PipelineConfig,
    values: &[usize],
    samples: usize,
    prompt: &PromptSpec,
    make_models: &mut dyn FnMut(&PipelineConfig) -> Result<Models<T>>,
    instruments: &Instruments<'_, T>,
    on_run: &mut dyn FnMut(&PipelineConfig, &mut GenerateOutput<T>) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    if samples == 0 {
        return Err(Error::validation("samples", "must be at least 1"));
    }
    let cfgs = sweep_configs(base, values)?;
    let mut rows = Vec::with_capacity(cfgs.len());
    for cfg in &cfgs {
        let mut targets = Vec::with_capacity(samples);
        let mut references = Vec::with_capacity(samples);
        for k in 0..samples {
            let mut c = cfg.clone();
            c.seed = base.seed.wrapping_add(k as u64);
            let m = make_models(&c)?;
            let mut out = generate(
                prompt,
                None,
                &*m.vanilla,
                &*m.personalized,
                &*m.codec,
                instruments.segmenter,
                &c,
            )?;
            on_run(&c, &mut out)?;
            let reference = out
                .run
                .artifacts
                .images
                .get("reference")
                .cloned()
                .ok_or_else(|| Error::Empty("reference image".into()))?;
            references.push(reference);
            targets.push(out.target);
        }
        let identity = evalkit::identity_score(&targets, &references, instruments.image_embedder)
            .stage("identity score")?;
        let fidelity =
            evalkit::fidelity_score(&targets, &prompt.prompt, instruments.image_embedder, instruments.text_embedder)
                .stage("fidelity score")?;
        let (sigma2_avg, inception_score) = if samples >= 2 {
            let masks = targets
                .iter()
                .map(|t| instruments.segmenter.segment(t))
                .collect::<Result<Vec<_>>>()?;
            let found: Vec<_> = masks.into_iter().filter(|m| m.count_foreground() > 0).collect();
            let sigma2 = if found.len() >= 2 {
                Some(
                    evalkit::center_point_stats(&found, evalkit::DEFAULT_DENSITY_SIGMA, evalkit::DEFAULT_DENSITY_RES)?
                        .sigma2_avg,
                )
            } else {
                None
            };
            (sigma2, Some(evalkit::inception_score(&targets, instruments.classifier)?))
        } else {
            (None, None)
        };
        rows.push(SweepRow {
            lambda1: cfg.lambda1,
            runs: samples,
            identity,
            fidelity,
            sigma2_avg,
            inception_score,
        });
    }
    Ok(rows)
}

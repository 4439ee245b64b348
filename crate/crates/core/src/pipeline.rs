//! Two-stage orchestration: step-blended layout generation, then retouch
//! with multi-source attention swapping and adaptive mask blending.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attach_blend, blend_gate, plan_overrides, AttentionTrace, Branch, OverrideBundle, PathRole, SwapPolicy,
    TapSink,
};
use crate::backends::{
    denoise, derive_conditions, make_toy_backend, AttnKind, BackendIdentity, Conditions, Denoiser, LatentCodec,
    TextCondition, ToyBackend, ToyBackendSpec, ToyCodec,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result, StageExt};
use crate::image::{BlendMask, Image};
use crate::maskops::{compose_adaptive_mask, cross_attention_mask, CompositeMask};
use crate::plugins::Segmenter;
use crate::record::{LayoutModel, LayoutStep, RetouchStep, RunOutput};
use crate::sampler::{ddim_invert, ddim_sample, ddim_step, make_schedule, NoiseSchedule};
use crate::scalar::{cast, Scalar};
use crate::seeds::{derive_seed, rng_for, CODEC, NOISE, REFERENCE, WEIGHTS};
use crate::tensor::{LatentTensor, Tensor};

/// Prompt with its personalization token and optional class word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt: String,
    pub special_token: String,
    pub class_word: Option<String>,
}

impl PromptSpec {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            special_token: crate::backends::DEFAULT_SPECIAL_TOKEN.into(),
            class_word: None,
        }
    }

    pub fn with_class_word(mut self, word: impl Into<String>) -> Self {
        self.class_word = Some(word.into());
        self
    }

    pub fn conditions<T: Scalar, D: Denoiser<T> + ?Sized>(&self, backend: &D) -> Result<Conditions<T>> {
        derive_conditions(backend, &self.prompt, &self.special_token, self.class_word.as_deref())
    }
}

/// Toy vanilla/personalized pair and codec, seeded from `cfg.seed`.
pub struct ToyStack<T> {
    pub vanilla: ToyBackend<T>,
    pub personalized: ToyBackend<T>,
    pub codec: ToyCodec<T>,
}

impl<T: Scalar> ToyStack<T> {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let spec = ToyBackendSpec {
            seed: derive_seed(cfg.seed, WEIGHTS),
            latent_shape: cfg.latent_shape,
            ..ToyBackendSpec::default()
        };
        Self::with_spec(spec, cfg)
    }

    pub fn with_spec(spec: ToyBackendSpec, cfg: &PipelineConfig) -> Result<Self> {
        let personalized = make_toy_backend(spec, BackendIdentity::Personalized)?;
        let vanilla = personalized.with_identity(BackendIdentity::Vanilla)?;
        let [ih, iw] = cfg.image_size;
        let codec = ToyCodec::new(derive_seed(cfg.seed, CODEC), cfg.latent_shape, (ih, iw))?;
        Ok(Self {
            vanilla,
            personalized,
            codec,
        })
    }
}

pub fn schedule_for<T: Scalar>(cfg: &PipelineConfig) -> Result<NoiseSchedule<T>> {
    make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
}

/// Standard-normal starting latent drawn from the `noise` sub-seed.
pub fn initial_noise<T: Scalar>(cfg: &PipelineConfig) -> LatentTensor<T> {
    noise_from(cfg, NOISE)
}

fn noise_from<T: Scalar>(cfg: &PipelineConfig, stream: &str) -> LatentTensor<T> {
    let mut rng = rng_for(cfg.seed, stream);
    let data = Tensor::from_fn(&cfg.latent_shape, |_| {
        let x: f64 = rng.sample(StandardNormal);
        cast(x)
    });
    LatentTensor {
        data,
        timestep: cfg.steps,
    }
}

fn check_shapes<T: Scalar>(
    cfg: &PipelineConfig,
    backends: &[&dyn Denoiser<T>],
    codec: &dyn LatentCodec<T>,
) -> Result<()> {
    for b in backends {
        if b.latent_shape() != cfg.latent_shape {
            return Err(Error::Backend(format!(
                "backend latent shape {:?} differs from configured {:?}",
                b.latent_shape(),
                cfg.latent_shape
            )));
        }
    }
    if codec.latent_shape() != cfg.latent_shape {
        return Err(Error::Backend("codec latent shape differs from configuration".into()));
    }
    let [ih, iw] = cfg.image_size;
    if codec.image_size() != (ih, iw) {
        return Err(Error::Backend("codec image size differs from configuration".into()));
    }
    Ok(())
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Which model runs at layout iteration `s` (1-based).
pub fn layout_model(cfg: &PipelineConfig, s: usize) -> LayoutModel {
    if s <= cfg.lambda1 {
        LayoutModel::Vanilla
    } else {
        LayoutModel::Personalized
    }
}

pub struct LayoutOutput<T> {
    pub image: Image<T>,
    pub latent: LatentTensor<T>,
    pub run: RunOutput<T>,
}

/// Stage 1: the first `lambda1` iterations use the vanilla model with
/// `y_p⁻`, the remaining ones the personalized model with `y_p`.
pub fn generate_layout<T: Scalar>(
    vanilla: &dyn Denoiser<T>,
    personalized: &dyn Denoiser<T>,
    codec: &dyn LatentCodec<T>,
    prompt: &PromptSpec,
    cfg: &PipelineConfig,
) -> Result<LayoutOutput<T>> {
    cfg.validate()?;
    check_shapes(cfg, &[vanilla, personalized], codec).stage("layout")?;
    let start = Instant::now();
    let schedule = schedule_for::<T>(cfg)?;
    let vanilla_cond = prompt.conditions(vanilla).stage("layout")?.token_removed;
    let personal_cond = prompt.conditions(personalized).stage("layout")?.personalized;

    let mut run = RunOutput::new(cfg.clone());
    run.record.prompt = Some(prompt.prompt.clone());
    let mut z = initial_noise::<T>(cfg);
    run.add_latent("layout_zT", &z.data);
    for s in 1..=cfg.steps {
        let model = layout_model(cfg, s);
        let (backend, cond) = match model {
            LayoutModel::Vanilla => (vanilla, &vanilla_cond),
            LayoutModel::Personalized => (personalized, &personal_cond),
        };
        run.record.layout_steps.push(LayoutStep {
            s,
            timestep: z.timestep,
            model,
        });
        let eps = denoise(backend, &z, cond, None, None, cfg.guidance_scale).stage("layout")?;
        z = ddim_step(&z, &eps, &schedule).stage("layout")?;
    }
    let image = codec.decode(&z).stage("layout")?;
    run.add_latent("layout_z0", &z.data);
    run.add_image("layout", &image);
    run.record.timings_ms.insert("layout".into(), elapsed_ms(start));
    Ok(LayoutOutput { image, latent: z, run })
}

/// Where the target path's swapped variables come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapSource {
    /// Layout and reference paths.
    #[default]
    MultiSource,
    /// The target path's own un-overridden pass at the same step; a
    /// diagnostic that must reproduce plain re-sampling.
    TargetSelf,
}

#[derive(Debug, Clone, Default)]
pub struct RetouchOptions {
    pub swap_source: SwapSource,
}

pub struct RetouchOutput<T> {
    pub image: Image<T>,
    pub latent: LatentTensor<T>,
    pub layout_trace: AttentionTrace<T>,
    pub reference_trace: AttentionTrace<T>,
    pub target_trace: AttentionTrace<T>,
    pub mask: Option<CompositeMask<T>>,
    pub run: RunOutput<T>,
}

pub fn swap_policy<T: Scalar>(cfg: &PipelineConfig, backend: &dyn Denoiser<T>) -> Result<SwapPolicy> {
    let layers = cfg
        .swap_layers
        .clone()
        .unwrap_or_else(|| backend.catalog().iter().map(|d| d.index).collect());
    let mut policy = SwapPolicy::new(cfg.steps, cfg.lambda2, layers, cfg.blend_start, backend.catalog())?;
    policy.blend_enabled = cfg.blend_enabled;
    policy.override_self_query = cfg.override_self_query;
    Ok(policy)
}

pub fn mask_layers<T: Scalar>(cfg: &PipelineConfig, backend: &dyn Denoiser<T>) -> Vec<usize> {
    cfg.mask_layers.clone().unwrap_or_else(|| {
        backend
            .catalog()
            .iter()
            .filter(|d| d.kind == AttnKind::Cross)
            .map(|d| d.index)
            .collect()
    })
}

fn subject_tokens<T: Scalar>(cond: &TextCondition<T>, special: &str) -> Result<Vec<usize>> {
    cond.position_of(special)
        .map(|i| vec![i])
        .ok_or_else(|| Error::Condition(format!("`{special}` missing from the target condition")))
}

/// Cross-attention mask from the layout path over iterations `1..=upto`.
pub fn layout_cross_mask<T: Scalar>(
    trace: &AttentionTrace<T>,
    cfg: &PipelineConfig,
    backend: &dyn Denoiser<T>,
    tokens: &[usize],
    upto: usize,
) -> Result<BlendMask<T>> {
    let steps: Vec<usize> = (1..=upto).collect();
    cross_attention_mask(trace, tokens, &mask_layers(cfg, backend), &steps, cfg.ca_threshold)
}

/// Stage 2: invert layout and reference images, then denoise the
/// reference, layout and target paths in lock-step with attention swapping
/// and, inside the blend window, adaptive mask blending.
#[allow(clippy::too_many_arguments)]
pub fn retouch<T: Scalar>(
    layout_image: &Image<T>,
    reference_image: &Image<T>,
    personalized: &dyn Denoiser<T>,
    codec: &dyn LatentCodec<T>,
    prompt: &PromptSpec,
    segmenter_mask: Option<&BlendMask<T>>,
    cfg: &PipelineConfig,
    options: &RetouchOptions,
) -> Result<RetouchOutput<T>> {
    cfg.validate()?;
    check_shapes(cfg, &[personalized], codec).stage("retouch")?;
    let policy = swap_policy(cfg, personalized).stage("retouch")?;
    if policy.blend_enabled && segmenter_mask.is_none() {
        return Err(Error::Empty("segmenter mask required when blending is enabled".into()).in_stage("retouch"));
    }
    if let Some(m) = segmenter_mask {
        let [ih, iw] = cfg.image_size;
        if m.dims() != (ih, iw) {
            return Err(Error::shape(&[ih, iw], &[m.height(), m.width()]).in_stage("retouch"));
        }
    }
    let schedule = schedule_for::<T>(cfg)?;
    let conds = prompt.conditions(personalized).stage("retouch")?;
    let (y_p, y_r) = (&conds.personalized, &conds.neutral);
    let tokens = subject_tokens(y_p, &prompt.special_token)?;
    let catalog = personalized.catalog();
    let w = cfg.guidance_scale;

    let mut run = RunOutput::new(cfg.clone());
    run.record.prompt = Some(prompt.prompt.clone());
    let start = Instant::now();
    let empty = TextCondition::empty(personalized)?;
    let z_r0 = codec.encode(reference_image).stage("encode reference")?;
    let z_o0 = codec.encode(layout_image).stage("encode layout")?;
    let mut z_r = ddim_invert(&z_r0, personalized, &empty, &schedule).stage("invert reference")?;
    let mut z_o = ddim_invert(&z_o0, personalized, &empty, &schedule).stage("invert layout")?;
    let mut z_t = z_o.clone();
    run.add_latent("reference_zT", &z_r.data);
    run.add_latent("layout_inverted_zT", &z_o.data);
    run.add_latent("target_zT", &z_t.data);
    run.record.timings_ms.insert("inversion".into(), elapsed_ms(start));

    let start = Instant::now();
    let mut ref_trace = AttentionTrace::new(PathRole::Reference);
    let mut lay_trace = AttentionTrace::new(PathRole::Layout);
    let mut tgt_trace = AttentionTrace::new(PathRole::Target);
    let mut composite: Option<CompositeMask<T>> = None;

    for s in 1..=cfg.steps {
        let mut taps = TapSink::new();
        let eps_r = denoise(personalized, &z_r, y_r, None, Some(&mut taps), w).stage("reference path")?;
        ref_trace.record(s, taps)?;

        let mut taps = TapSink::new();
        let eps_o = denoise(personalized, &z_o, y_p, None, Some(&mut taps), w).stage("layout path")?;
        lay_trace.record(s, taps)?;

        let (branch, mut bundle): (Branch, OverrideBundle<T>) = match options.swap_source {
            SwapSource::MultiSource => plan_overrides(&policy, catalog, s, &lay_trace, &ref_trace)?,
            SwapSource::TargetSelf => {
                let mut taps = TapSink::new();
                denoise(personalized, &z_t, y_r, None, Some(&mut taps), w).stage("target capture")?;
                let mut own = AttentionTrace::new(PathRole::Target);
                own.record(s, taps)?;
                plan_overrides(&policy, catalog, s, &own, &own)?
            }
        };
        let blend = blend_gate(&policy, s);
        if blend {
            if composite.is_none() {
                let mc = layout_cross_mask(&lay_trace, cfg, personalized, &tokens, s).stage("cross-attention mask")?;
                let msam = segmenter_mask.expect("checked above");
                let c = compose_adaptive_mask(&mc, msam, cfg.volume_threshold).stage("mask composition")?;
                run.add_mask("cross_attn", &mc);
                run.add_mask("segmenter", msam);
                run.add_mask("union", &c.union);
                run.add_mask("composite", &c.blend);
                composite = Some(c);
            }
            let m = &composite.as_ref().expect("just set").blend;
            attach_blend(&mut bundle, &policy, catalog, s, &lay_trace, m)?;
        }
        let mut taps = TapSink::new();
        let eps_t = denoise(personalized, &z_t, y_r, Some(&bundle), Some(&mut taps), w).stage("target path")?;
        tgt_trace.record(s, taps)?;
        run.record.retouch_steps.push(RetouchStep {
            s,
            timestep: z_t.timestep,
            branch,
            blend,
        });

        z_r = ddim_step(&z_r, &eps_r, &schedule)?;
        z_o = ddim_step(&z_o, &eps_o, &schedule)?;
        z_t = ddim_step(&z_t, &eps_t, &schedule)?;
    }
    if composite.is_none() {
        if let Some(m) = segmenter_mask {
            run.add_mask("segmenter", m);
        }
    }
    let image = codec.decode(&z_t).stage("decode target")?;
    run.add_latent("target_z0", &z_t.data);
    run.add_image("target", &image);
    run.record.timings_ms.insert("retouch".into(), elapsed_ms(start));
    Ok(RetouchOutput {
        image,
        latent: z_t,
        layout_trace: lay_trace,
        reference_trace: ref_trace,
        target_trace: tgt_trace,
        mask: composite,
        run,
    })
}

/// Default reference when none is supplied: the personalized model's
/// rendering of "a photo of <special>" from the `reference` sub-seed.
pub fn synthesize_reference<T: Scalar>(
    personalized: &dyn Denoiser<T>,
    codec: &dyn LatentCodec<T>,
    prompt: &PromptSpec,
    cfg: &PipelineConfig,
) -> Result<Image<T>> {
    let schedule = schedule_for::<T>(cfg)?;
    let cond = prompt.conditions(personalized)?.neutral;
    let z = ddim_sample(&noise_from::<T>(cfg, REFERENCE), personalized, &cond, &schedule, cfg.guidance_scale)?;
    codec.decode(&z)
}

pub struct GenerateOutput<T> {
    pub layout: Image<T>,
    pub target: Image<T>,
    pub run: RunOutput<T>,
}

/// Layout generation, segmentation of the layout image, then retouch.
#[allow(clippy::too_many_arguments)]
pub fn generate<T: Scalar>(
    prompt: &PromptSpec,
    reference: Option<&Image<T>>,
    vanilla: &dyn Denoiser<T>,
    personalized: &dyn Denoiser<T>,
    codec: &dyn LatentCodec<T>,
    segmenter: &dyn Segmenter<T>,
    cfg: &PipelineConfig,
) -> Result<GenerateOutput<T>> {
    cfg.validate()?;
    let layout = generate_layout(vanilla, personalized, codec, prompt, cfg)?;
    let reference = match reference {
        Some(r) => r.clone(),
        None => synthesize_reference(personalized, codec, prompt, cfg).stage("reference synthesis")?,
    };
    let msam = segmenter.segment(&layout.image).stage("segmentation")?;
    let out = retouch(
        &layout.image,
        &reference,
        personalized,
        codec,
        prompt,
        Some(&msam),
        cfg,
        &RetouchOptions::default(),
    )?;
    let mut run = layout.run;
    run.add_image("reference", &reference);
    if !out.run.record.masks.contains_key("segmenter") {
        run.add_mask("segmenter", &msam);
    }
    run.absorb(out.run);
    Ok(GenerateOutput {
        layout: layout.image,
        target: out.image,
        run,
    })
}

/// Intermediates of the adaptive mask for one layout image.
pub struct MaskDebug<T> {
    pub cross_attn: BlendMask<T>,
    pub segmenter: BlendMask<T>,
    pub union: BlendMask<T>,
    pub composite: BlendMask<T>,
    pub layout_trace: AttentionTrace<T>,
}

/// Recomputes the masks retouch would use for `layout_image`: inverts it,
/// re-denoises the layout path with `y_p` for iterations `1..=blend_start`,
/// and composes with the segmenter's mask.
pub fn mask_debug<T: Scalar>(
    layout_image: &Image<T>,
    personalized: &dyn Denoiser<T>,
    codec: &dyn LatentCodec<T>,
    segmenter: &dyn Segmenter<T>,
    prompt: &PromptSpec,
    cfg: &PipelineConfig,
) -> Result<MaskDebug<T>> {
    cfg.validate()?;
    check_shapes(cfg, &[personalized], codec)?;
    let schedule = schedule_for::<T>(cfg)?;
    let conds = prompt.conditions(personalized)?;
    let tokens = subject_tokens(&conds.personalized, &prompt.special_token)?;
    let empty = TextCondition::empty(personalized)?;
    let z0 = codec.encode(layout_image)?;
    let mut z = ddim_invert(&z0, personalized, &empty, &schedule)?;
    let mut trace = AttentionTrace::new(PathRole::Layout);
    for s in 1..=cfg.blend_start {
        let mut taps = TapSink::new();
        let eps = denoise(personalized, &z, &conds.personalized, None, Some(&mut taps), cfg.guidance_scale)?;
        trace.record(s, taps)?;
        z = ddim_step(&z, &eps, &schedule)?;
    }
    let cross = layout_cross_mask(&trace, cfg, personalized, &tokens, cfg.blend_start)?;
    let seg = segmenter.segment(layout_image).stage("segmentation")?;
    let c = compose_adaptive_mask(&cross, &seg, cfg.volume_threshold)?;
    Ok(MaskDebug {
        cross_attn: cross,
        segmenter: seg,
        union: c.union,
        composite: c.blend,
        layout_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub s: usize,
    pub timestep: usize,
    pub layout_model: LayoutModel,
    pub retouch_branch: Branch,
    pub blend: bool,
}

/// Per-iteration schedule implied by a configuration, without computing anything.
pub fn plan_schedule(cfg: &PipelineConfig) -> Result<Vec<PlannedStep>> {
    cfg.validate()?;
    let (t, l2) = (cfg.steps, cfg.lambda2);
    Ok((1..=t)
        .map(|s| PlannedStep {
            s,
            timestep: cfg.timestep_of(s),
            layout_model: layout_model(cfg, s),
            retouch_branch: if s + l2 <= t { Branch::LayoutSource } else { Branch::ReferenceSource },
            blend: cfg.blend_enabled && s >= cfg.blend_start,
        })
        .collect())
}

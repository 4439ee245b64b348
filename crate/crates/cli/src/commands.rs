use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

use retouch_core::backends::external::{serve, ExternalDenoiser};
use retouch_core::backends::{BackendIdentity, Denoiser};
use retouch_core::evalkit::{self, CenterStats};
use retouch_core::image::Image;
use retouch_core::pipeline::{self, PromptSpec, RetouchOptions, ToyStack};
use retouch_core::plugins::{
    Classifier, ImageEmbedder, PluginEndpoint, PluginKind, Remote, Segmenter, StubClassifier, StubImageEmbedder,
    StubSegmenter, StubTextEmbedder, TextEmbedder, TIMEOUT_ENV,
};
use retouch_core::record::RunOutput;
use retouch_core::seeds::{derive_seed, fnv1a64, STUBS};
use retouch_core::sweep::{self, Instruments};
use retouch_core::{load_config, BlendMask, Error, MaskProvenance, PipelineConfig};

use crate::{Command, Identity, ProfileArg, PromptArgs, RunArgs};

type Img = Image<f32>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Layout { prompt, run } => layout(&prompt, &run),
        Command::Retouch {
            layout,
            reference,
            mask,
            prompt,
            run,
        } => retouch(&layout, &reference, mask.as_deref(), &prompt, &run),
        Command::Generate { reference, prompt, run } => generate(reference.as_deref(), &prompt, &run),
        Command::MaskDebug { layout, prompt, run } => mask_debug(&layout, &prompt, &run),
        Command::EvalCenters {
            images,
            masks,
            sigma,
            res,
            run,
        } => eval_centers(&images, &masks, sigma, res, &run),
        Command::EvalDiversity { images, classes, run } => eval_diversity(&images, classes, &run),
        Command::EvalIdentity {
            generated,
            references,
            prompt,
            export,
            run,
        } => eval_identity(&generated, &references, prompt.as_deref(), export.as_deref(), &run),
        Command::SweepLambda1 {
            values,
            samples,
            classes,
            prompt,
            run,
        } => sweep_lambda1(&values, samples, classes, &prompt, &run),
        Command::ServeToy {
            verb,
            dir,
            seed,
            identity,
        } => serve_toy(&verb, &dir, seed, identity),
    }
}

fn resolve_config(run: &RunArgs) -> Result<PipelineConfig> {
    let base = if run.config == "default" {
        PipelineConfig::default()
    } else {
        load_config(&run.config).context("loading config")?
    };
    let mut over = Map::new();
    let mut put = |k: &str, v: Value| {
        over.insert(k.to_string(), v);
    };
    if let Some(v) = run.seed {
        put("seed", json!(v));
    }
    if let Some(v) = run.steps {
        put("T", json!(v));
    }
    if let Some(v) = run.lambda1 {
        put("lambda1", json!(v));
    }
    if let Some(v) = run.lambda2 {
        put("lambda2", json!(v));
    }
    if let Some(v) = run.blend_start {
        put("blend_start", json!(v));
    }
    if run.no_blend {
        put("blend_enabled", json!(false));
    }
    if let Some(v) = run.ca_threshold {
        put("ca_threshold", json!(v));
    }
    if let Some(v) = run.volume_threshold {
        put("volume_threshold", json!(v));
    }
    if let Some(v) = run.guidance_scale {
        put("guidance_scale", json!(v));
    }
    if let Some(p) = run.profile {
        let name = match p {
            ProfileArg::Normal => "normal",
            ProfileArg::Challenging => "challenging",
        };
        put("profile", json!(name));
    }
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::validation("--set", format!("`{kv}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        put(k.trim(), value);
    }
    let (cfg, warnings) = base.merged_with(over)?;
    for w in warnings {
        log::warn!("{w}");
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Stable per-invocation directory name unless `--run-id` is given.
fn run_dir(run: &RunArgs, name: &str, cfg: &PipelineConfig, extra: &impl Serialize) -> PathBuf {
    let id = run.run_id.clone().unwrap_or_else(|| {
        let key = serde_json::to_string(&(name, cfg, extra)).expect("serializable");
        format!("{name}-s{}-{:08x}", cfg.seed, fnv1a64(key.as_bytes()) as u32)
    });
    run.out.join(id)
}

/// Prints the resolved config and step plan; returns true when the caller should stop.
fn dry_run(run: &RunArgs, cfg: &PipelineConfig) -> Result<bool> {
    if !run.dry_run {
        return Ok(false);
    }
    let plan = pipeline::plan_schedule(cfg)?;
    let doc = json!({ "config": cfg, "schedule": plan });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(true)
}

fn prompt_spec(p: &PromptArgs) -> PromptSpec {
    PromptSpec {
        prompt: p.prompt.clone(),
        special_token: p.special_token.clone(),
        class_word: p.class_word.clone(),
    }
}

type Models = sweep::Models<f32>;

fn plugin_timeout() -> Result<Duration> {
    let secs = match std::env::var(TIMEOUT_ENV) {
        Ok(t) => t
            .parse::<f64>()
            .ok()
            .filter(|s| *s > 0.0)
            .ok_or_else(|| Error::validation(TIMEOUT_ENV, "must be a positive number"))?,
        Err(_) => 30.0,
    };
    Ok(Duration::from_secs_f64(secs))
}

fn external(cmd: &str) -> Result<Box<dyn Denoiser<f32>>> {
    let command: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
    if command.is_empty() {
        bail!(Error::validation("--denoiser", "empty command"));
    }
    Ok(Box::new(ExternalDenoiser::connect(command, plugin_timeout()?)?))
}

fn models(run: &RunArgs, cfg: &PipelineConfig) -> Result<Models> {
    let toy = ToyStack::<f32>::from_config(cfg)?;
    let personalized: Box<dyn Denoiser<f32>> = match &run.denoiser {
        Some(cmd) => external(cmd).context("connecting personalized denoiser")?,
        None => Box::new(toy.personalized),
    };
    let vanilla: Box<dyn Denoiser<f32>> = match &run.vanilla_denoiser {
        Some(cmd) => external(cmd).context("connecting vanilla denoiser")?,
        None if run.denoiser.is_some() => {
            bail!(Error::validation("--vanilla-denoiser", "required alongside --denoiser"))
        }
        None => Box::new(toy.vanilla),
    };
    Ok(Models {
        vanilla,
        personalized,
        codec: Box::new(toy.codec),
    })
}

fn segmenter() -> Result<Box<dyn Segmenter<f32>>> {
    Ok(match PluginEndpoint::from_env(PluginKind::Segmenter)? {
        Some(ep) => Box::new(Remote::new(ep)),
        None => Box::new(StubSegmenter),
    })
}

fn image_embedder() -> Result<Box<dyn ImageEmbedder<f32>>> {
    Ok(match PluginEndpoint::from_env(PluginKind::ImageEmbedder)? {
        Some(ep) => Box::new(Remote::new(ep)),
        None => Box::new(StubImageEmbedder),
    })
}

fn text_embedder() -> Result<Box<dyn TextEmbedder>> {
    Ok(match PluginEndpoint::from_env(PluginKind::TextEmbedder)? {
        Some(ep) => Box::new(Remote::new(ep)),
        None => Box::new(StubTextEmbedder),
    })
}

fn classifier(cfg: &PipelineConfig, classes: usize) -> Result<Box<dyn Classifier<f32>>> {
    Ok(match PluginEndpoint::from_env(PluginKind::Classifier)? {
        Some(ep) => Box::new(Remote::new(ep)),
        None => {
            if classes < 2 {
                bail!(Error::validation("--classes", "need at least 2"));
            }
            Box::new(StubClassifier::new(derive_seed(cfg.seed, STUBS), classes))
        }
    })
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<Img>> {
    paths
        .iter()
        .map(|p| Img::load_ppm(p).with_context(|| format!("reading image {}", p.display())))
        .collect()
}

fn persist(mut out: RunOutput<f32>, dir: &Path) -> Result<()> {
    out.persist(dir)?;
    println!("{}", dir.join("record.json").display());
    Ok(())
}

fn write_stats(dir: &Path, doc: &Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("stats.json");
    fs::write(&path, serde_json::to_string_pretty(doc)?).map_err(|e| Error::io(&path, e))?;
    println!("{}", serde_json::to_string_pretty(doc)?);
    Ok(())
}

fn layout(p: &PromptArgs, run: &RunArgs) -> Result<()> {
    let cfg = resolve_config(run)?;
    if dry_run(run, &cfg)? {
        return Ok(());
    }
    let m = models(run, &cfg)?;
    let out = pipeline::generate_layout(&*m.vanilla, &*m.personalized, &*m.codec, &prompt_spec(p), &cfg)?;
    persist(out.run, &run_dir(run, "layout", &cfg, &p.prompt))
}

fn retouch(layout: &Path, reference: &Path, mask: Option<&Path>, p: &PromptArgs, run: &RunArgs) -> Result<()> {
    let cfg = resolve_config(run)?;
    if dry_run(run, &cfg)? {
        return Ok(());
    }
    let m = models(run, &cfg)?;
    let layout_img = Img::load_ppm(layout).context("reading layout image")?;
    let reference_img = Img::load_ppm(reference).context("reading reference image")?;
    let msam = match mask {
        Some(path) => BlendMask::<f32>::load_pgm(path, MaskProvenance::Segmenter).context("reading mask")?,
        None => segmenter()?.segment(&layout_img).context("segmentation")?,
    };
    let out = pipeline::retouch(
        &layout_img,
        &reference_img,
        &*m.personalized,
        &*m.codec,
        &prompt_spec(p),
        Some(&msam),
        &cfg,
        &RetouchOptions::default(),
    )?;
    let mut rec = out.run;
    rec.add_image("layout", &layout_img);
    rec.add_image("reference", &reference_img);
    let key = (&p.prompt, layout, reference, mask);
    persist(rec, &run_dir(run, "retouch", &cfg, &key))
}

fn generate_one(
    m: &Models,
    seg: &dyn Segmenter<f32>,
    reference: Option<&Img>,
    p: &PromptArgs,
    cfg: &PipelineConfig,
) -> Result<pipeline::GenerateOutput<f32>> {
    Ok(pipeline::generate(
        &prompt_spec(p),
        reference,
        &*m.vanilla,
        &*m.personalized,
        &*m.codec,
        seg,
        cfg,
    )?)
}

fn generate(reference: Option<&Path>, p: &PromptArgs, run: &RunArgs) -> Result<()> {
    let cfg = resolve_config(run)?;
    if dry_run(run, &cfg)? {
        return Ok(());
    }
    let m = models(run, &cfg)?;
    let reference = reference
        .map(|r| Img::load_ppm(r).context("reading reference image"))
        .transpose()?;
    let out = generate_one(&m, &*segmenter()?, reference.as_ref(), p, &cfg)?;
    persist(out.run, &run_dir(run, "generate", &cfg, &p.prompt))
}

fn mask_debug(layout: &Path, p: &PromptArgs, run: &RunArgs) -> Result<()> {
    let cfg = resolve_config(run)?;
    if dry_run(run, &cfg)? {
        return Ok(());
    }
    let m = models(run, &cfg)?;
    let img = Img::load_ppm(layout).context("reading layout image")?;
    let dbg = pipeline::mask_debug(&img, &*m.personalized, &*m.codec, &*segmenter()?, &prompt_spec(p), &cfg)?;
    let mut out = RunOutput::new(cfg.clone());
    out.record.prompt = Some(p.prompt.clone());
    out.add_image("layout", &img);
    out.add_mask("cross_attn", &dbg.cross_attn);
    out.add_mask("segmenter", &dbg.segmenter);
    out.add_mask("union", &dbg.union);
    out.add_mask("composite", &dbg.composite);
    persist(out, &run_dir(run, "mask-debug", &cfg, &(&p.prompt, layout)))
}

fn centers_doc(stats: &CenterStats) -> Value {
    json!({
        "centers": stats.centers,
        "sigma2_avg": stats.sigma2_avg,
        "sigma2_definition": "mean of the population variances of x and y",
        "density_sigma": stats.density_sigma,
        "density_res": stats.density_res,
        "density_map": "density.pgm",
    })
}

fn eval_centers(images: &[PathBuf], masks: &[PathBuf], sigma: f64, res: usize, run: &RunArgs) -> Result<()> {
    let cfg = resolve_config(run)?;
    if dry_run(run, &cfg)? {
        return Ok(());
    }
    if images.is_empty() && masks.is_empty() {
        bail!(Error::validation("--images/--masks", "give at least one input"));
    }
    let mut all: Vec<BlendMask<f32>> = Vec::new();
    if !images.is_empty() {
        let seg = segmenter()?;
        for img in load_images(images)? {
            all.push(seg.segment(&img).context("segmentation")?);
        }
    }
    for p in masks {
        all.push(BlendMask::load_pgm(p, MaskProvenance::Segmenter).with_context(|| format!("reading {}", p.display()))?);
    }
    let stats = evalkit::center_point_stats(&all, sigma, res)?;
    let dir = run_dir(run, "eval-centers", &cfg, &(images, masks, sigma, res));
    write_stats(&dir, &centers_doc(&stats))?;
    stats.density_mask().save_pgm(dir.join("density.pgm"))?;
    Ok(())
}

fn eval_diversity(images: &[PathBuf], classes: usize, run: &RunArgs) -> Result<()> {
    let cfg = resolve_config(run)?;
    if dry_run(run, &cfg)? {
        return Ok(());
    }
    let imgs = load_images(images)?;
    let is = evalkit::inception_score(&imgs, &*classifier(&cfg, classes)?)?;
    let doc = json!({ "inception_score": is, "images": imgs.len(), "splits": 1 });
    write_stats(&run_dir(run, "eval-diversity", &cfg, &(images, classes)), &doc)
}

fn eval_identity(
    generated: &[PathBuf],
    references: &[PathBuf],
    prompt: Option<&str>,
    export: Option<&Path>,
    run: &RunArgs,
) -> Result<()> {
    let cfg = resolve_config(run)?;
    if dry_run(run, &cfg)? {
        return Ok(());
    }
    let gen = load_images(generated)?;
    let refs = load_images(references)?;
    let emb = image_embedder()?;
    let g = evalkit::embed_all(&gen, &*emb)?;
    let r = evalkit::embed_all(&refs, &*emb)?;
    let identity = evalkit::mean_cross_cosine(&g, &r)?;
    let fidelity = match prompt {
        Some(text) => {
            let t = text_embedder()?.embed_text(text)?;
            Some(evalkit::mean_cross_cosine(&g, &[t])?)
        }
        None => None,
    };
    if let Some(path) = export {
        let all: Vec<Vec<f64>> = g.iter().chain(&r).cloned().collect();
        evalkit::export_embeddings(&all, path)?;
    }
    let doc = json!({
        "identity": identity,
        "fidelity": fidelity,
        "generated": gen.len(),
        "references": refs.len(),
    });
    write_stats(&run_dir(run, "eval-identity", &cfg, &(generated, references, prompt)), &doc)
}

fn sweep_lambda1(values: &[usize], samples: usize, classes: usize, p: &PromptArgs, run: &RunArgs) -> Result<()> {
    let base = resolve_config(run)?;
    if run.dry_run {
        for cfg in &sweep::sweep_configs(&base, values)? {
            dry_run(run, cfg)?;
        }
        return Ok(());
    }
    let dir = run_dir(run, "sweep-lambda1", &base, &(values, samples, &p.prompt));
    let seg = segmenter()?;
    let img_emb = image_embedder()?;
    let txt_emb = text_embedder()?;
    let cls = classifier(&base, classes)?;
    let instruments = Instruments {
        segmenter: &*seg,
        image_embedder: &*img_emb,
        text_embedder: &*txt_emb,
        classifier: &*cls,
    };
    let mut make_models = |c: &PipelineConfig| {
        models(run, c).map_err(|e| match e.downcast::<Error>() {
            Ok(e) => e,
            Err(e) => Error::Backend(format!("{e:#}")),
        })
    };
    let mut on_run = |c: &PipelineConfig, out: &mut pipeline::GenerateOutput<f32>| {
        let sub = dir.join(format!("lambda1-{}", c.lambda1)).join(format!("seed-{}", c.seed));
        out.run.persist(&sub).map(|_| ())
    };
    let rows = sweep::sweep_lambda1(
        &base,
        values,
        samples,
        &prompt_spec(p),
        &mut make_models,
        &instruments,
        &mut on_run,
    )?;
    let tsv = sweep::table_tsv(&rows);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tsv_path = dir.join("table.tsv");
    fs::write(&tsv_path, &tsv).map_err(|e| Error::io(&tsv_path, e))?;
    let json_path = dir.join("table.json");
    fs::write(&json_path, serde_json::to_string_pretty(&rows)?).map_err(|e| Error::io(&json_path, e))?;
    print!("{tsv}");
    Ok(())
}

fn serve_toy(verb: &str, dir: &Path, seed: u64, identity: Identity) -> Result<()> {
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let stack = ToyStack::<f32>::from_config(&cfg)?;
    let backend = match identity {
        Identity::Vanilla => stack.personalized.with_identity(BackendIdentity::Vanilla)?,
        Identity::Personalized => stack.personalized,
    };
    serve(&backend, verb, dir)?;
    Ok(())
}

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Two-stage personalized image generation with attention swapping and
/// adaptive mask blending, runnable end to end on seeded toy models.
#[derive(Debug, Parser)]
#[command(name = "retouch", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stage 1 only: step-blended layout generation.
    Layout {
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stage 2 only: retouch a layout image against a reference image.
    Retouch {
        /// Layout image (PPM).
        #[arg(long)]
        layout: PathBuf,
        /// Reference image of the subject (PPM).
        #[arg(long)]
        reference: PathBuf,
        /// Precomputed foreground mask for the layout image (PGM); the
        /// configured segmenter is used when absent.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Layout generation, segmentation and retouch in one run.
    Generate {
        /// Reference image (PPM); synthesized by the personalized model when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the cross-attention, segmenter, union and final blend masks for a layout image.
    MaskDebug {
        #[arg(long)]
        layout: PathBuf,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Subject centre-point distribution and its averaged variance.
    EvalCenters {
        /// Images to segment (PPM).
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        /// Ready-made subject masks (PGM), used as is.
        #[arg(long, num_args = 1..)]
        masks: Vec<PathBuf>,
        #[arg(long, default_value_t = retouch_core::evalkit::DEFAULT_DENSITY_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = retouch_core::evalkit::DEFAULT_DENSITY_RES)]
        res: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Inception score of an image set.
    EvalDiversity {
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        /// Class count of the built-in classifier.
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Identity similarity to references and, with a prompt, prompt fidelity.
    EvalIdentity {
        #[arg(long, num_args = 1.., required = true)]
        generated: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        references: Vec<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        /// Also write all image embeddings as an LTR1 matrix.
        #[arg(long)]
        export: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run `generate` for several lambda1 values and tabulate metrics.
    SweepLambda1 {
        /// Comma-separated lambda1 values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Seeds per value (`seed`, `seed + 1`, ...); centre variance and
        /// inception score need at least 2.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Answer one external-denoiser request with a toy backend.
    #[command(hide = true)]
    ServeToy {
        verb: String,
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Identity::Personalized)]
        identity: Identity,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Identity {
    Vanilla,
    Personalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Normal,
    Challenging,
}

#[derive(Debug, Clone, Args)]
pub struct PromptArgs {
    #[arg(long, default_value = "a photo of <*>")]
    pub prompt: String,
    #[arg(long, default_value = retouch_core::backends::DEFAULT_SPECIAL_TOKEN)]
    pub special_token: String,
    /// Word replacing the special token in the vanilla prompt.
    #[arg(long)]
    pub class_word: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON config file, or `default`.
    #[arg(long, default_value = "default")]
    pub config: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "steps")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<usize>,
    #[arg(long)]
    pub lambda2: Option<usize>,
    #[arg(long)]
    pub blend_start: Option<usize>,
    #[arg(long)]
    pub no_blend: bool,
    #[arg(long)]
    pub ca_threshold: Option<f64>,
    #[arg(long)]
    pub volume_threshold: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Any other config key as KEY=JSON, e.g. `--set swap_layers=[0,2]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output root; each run writes to `<out>/<run-id>/`.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Print the resolved config and step schedule, then exit.
    #[arg(long)]
    pub dry_run: bool,
    /// External personalized denoiser command (toy backend when absent).
    #[arg(long)]
    pub denoiser: Option<String>,
    /// External vanilla denoiser command.
    #[arg(long)]
    pub vanilla_denoiser: Option<String>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<retouch_core::Error>() {
            return if e.is_plugin() {
                3
            } else if e.is_validation() {
                1
            } else {
                2
            };
        }
    }
    2
}

/// Context messages down to the first library error, whose own message
/// already spells out its nested causes.
fn describe(err: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in err.chain() {
        parts.push(cause.to_string());
        if cause.downcast_ref::<retouch_core::Error>().is_some() {
            break;
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

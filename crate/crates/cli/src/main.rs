mod commands;
mod dataset;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use disentlab::config::PipelineConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Disentangled representation transfer pipeline.
///
/// Any configuration key can be overridden with `--section.key VALUE`
/// (for example `--train.steps 1000` or `--eval.trees.rounds=50`).
#[derive(Debug, Parser)]
#[command(name = "disentlab", version)]
pub struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum YesNo {
    Yes,
    No,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic source (or a labeled synthetic target) dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Use this factor's value as the class label.
        #[arg(long)]
        label: Option<String>,
    },
    /// Turn labeled PNG images or precomputed feature tensors into a dataset.
    Ingest {
        /// Directory of PNG files named by the manifest ids.
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        images: Option<PathBuf>,
        /// DTNS feature tensor whose rows the manifest's tensor_row points at.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Manifest CSV with at least `id`, `tensor_row` and `class_label`.
        #[arg(long)]
        labels: PathBuf,
        /// Directory of binary mask PNGs named like the images.
        #[arg(long, requires = "images")]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the VAE ensemble on the source dataset.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune every ensemble member on the target's training rows.
    Finetune {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Disentanglement metrics of a model or ensemble on a factor-annotated dataset.
    EvalDisent {
        #[arg(long, conflicts_with_all = ["ensemble", "raw"])]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with = "raw")]
        ensemble: Option<PathBuf>,
        /// Score the dataset features themselves (explicitness only).
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Downstream classification accuracy over the ensemble.
    EvalDownstream {
        #[arg(long, required_unless_present = "no_vae")]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        /// Whether the ensemble was finetuned on the target (recorded in the report).
        #[arg(long, value_enum, default_value = "no")]
        finetuned: YesNo,
        /// Classify the raw target features instead of latent codes.
        #[arg(long, conflicts_with = "ensemble")]
        no_vae: bool,
        /// Factor-annotated dataset used to label dimensions for grouped importance.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate handcrafted mask features with labeled latent dimensions.
    Correlate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dataset with the images and masks, matched to `--data` by id; defaults to `--data`.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Dataset whose factors label the dimensions; defaults to `--data`.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hold out one class and rank the dimensions separating it from its predicted class.
    Openset {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        holdout: String,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export two latent dimensions as a delimited table (and optionally an SVG).
    Scatter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Two dimension indices or factor labels, comma separated.
        #[arg(long)]
        dims: String,
        #[arg(long)]
        source: Option<PathBuf>,
        /// Factor used to color points when the data has no class labels.
        #[arg(long)]
        color_by: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Render report JSON files as markdown tables.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Why a run failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<disentlab::Error> for Failure {
    fn from(e: disentlab::Error) -> Self {
        use disentlab::Error as E;
        match &e {
            E::Diverged { .. } => Failure::Runtime(e.to_string()),
            E::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

/// Splits `--section.key VALUE` / `--section.key=VALUE` overrides from the
/// arguments clap understands.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Failure> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Failure::Validation(format!("override `--{k}` needs a value")))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = PipelineConfig::load(cli.config.as_deref(), &overrides)
        .map_err(Failure::from)
        .and_then(|config| commands::run(cli.command, &config));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

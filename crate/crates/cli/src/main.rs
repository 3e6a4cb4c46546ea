//! `opclass` — deterministic batch front end for the classification
//! pipeline.
//!
//! Subcommands mirror the pipeline stages: `synth` builds a planted-source
//! corpus, then `train-hmms`, `features`, `train`, and `evaluate` run the
//! staged pipeline against a work directory. `grid` sweeps hyperparameter
//! lists from the config file. Exit codes: 0 success, 2 configuration
//! error, 3 data error, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use opclass_core::error::{Error, ErrorCategory};
use opclass_core::nn::{LossKind, OptimizerKind};
use opclass_core::pipeline::{
    self, ClassifierKind, FeaturizerKind, PipelineConfig,
};
use opclass_core::synth::{self, SynthSpec};

#[derive(Parser)]
#[command(name = "opclass", version, about = "Opcode-sequence malware family classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from planted Markov sources.
    Synth(SynthOpts),
    /// Train one HMM per family on the training split.
    TrainHmms(CommonOpts),
    /// Extract, scale, and persist feature vectors for both splits.
    Features(CommonOpts),
    /// Train the configured classifier on the persisted features.
    Train(CommonOpts),
    /// Predict the test split and write the evaluation report.
    Evaluate(CommonOpts),
    /// Run the hyperparameter grid from the config file.
    Grid(CommonOpts),
}

#[derive(Args)]
struct SynthOpts {
    /// Output directory for the corpus.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    k_families: usize,
    #[arg(long, default_value_t = 40)]
    vocab_size: usize,
    #[arg(long, default_value_t = 6)]
    states: usize,
    #[arg(long, default_value_t = 200)]
    samples_per_family: usize,
    #[arg(long, default_value_t = 300)]
    sample_length: usize,
    #[arg(long, default_value_t = 0.9)]
    separation: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct CommonOpts {
    /// JSON pipeline config; individual flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hidden-state count N.
    #[arg(long)]
    n: Option<usize>,
    /// Truncation length L.
    #[arg(long)]
    l: Option<usize>,
    /// cnn | rf | svm
    #[arg(long)]
    classifier: Option<String>,
    /// hmm | raw
    #[arg(long)]
    featurizer: Option<String>,
    /// sgd_momentum | adam | nadam | rmsprop
    #[arg(long)]
    optimizer: Option<String>,
    /// categorical_crossentropy | kullback_leibler_divergence | poisson
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    image_side: Option<usize>,
    #[arg(long)]
    min_family_size: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Export the first k training images as PGM files.
    #[arg(long)]
    export_images: Option<usize>,
}

fn resolve_config(opts: &CommonOpts) -> Result<PipelineConfig, Error> {
    let mut cfg = match &opts.config {
        Some(path) => PipelineConfig::from_file(path).map_err(|e| {
            Error::InvalidInput(format!("config {}: {e}", path.display()))
        })?,
        None => {
            let missing = |what: &str| {
                Error::InvalidInput(format!("--{what} is required when --config is absent"))
            };
            PipelineConfig::new(
                opts.manifest.clone().ok_or_else(|| missing("manifest"))?,
                opts.data_root.clone().ok_or_else(|| missing("data-root"))?,
                opts.work_dir.clone().ok_or_else(|| missing("work-dir"))?,
            )
        }
    };
    if let Some(v) = &opts.manifest {
        cfg.manifest = v.clone();
    }
    if let Some(v) = &opts.data_root {
        cfg.data_root = v.clone();
    }
    if let Some(v) = &opts.work_dir {
        cfg.work_dir = v.clone();
    }
    if let Some(v) = opts.seed {
        cfg.seed = v;
    }
    if let Some(v) = opts.n {
        cfg.n = v;
    }
    if let Some(v) = opts.l {
        cfg.l = v;
    }
    if let Some(v) = &opts.classifier {
        cfg.classifier = ClassifierKind::parse(v)?;
    }
    if let Some(v) = &opts.featurizer {
        cfg.featurizer = FeaturizerKind::parse(v)?;
    }
    if let Some(v) = &opts.optimizer {
        cfg.optimizer = OptimizerKind::parse(v)?;
    }
    if let Some(v) = &opts.loss {
        cfg.loss = LossKind::parse(v)?;
    }
    if let Some(v) = opts.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = opts.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = opts.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = opts.image_side {
        cfg.image_side = v;
    }
    if let Some(v) = opts.min_family_size {
        cfg.min_family_size = v;
    }
    if let Some(v) = opts.train_fraction {
        cfg.train_fraction = v;
    }
    if let Some(v) = opts.export_images {
        cfg.export_images = v;
    }
    if cfg.n == 0 || cfg.l == 0 {
        return Err(Error::InvalidInput(format!(
            "n and l must be >= 1, got n={} l={}",
            cfg.n, cfg.l
        )));
    }
    if !cfg.manifest.exists() {
        return Err(Error::MissingSample(format!(
            "manifest {} does not exist",
            cfg.manifest.display()
        )));
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth(opts) => {
            let spec = SynthSpec {
                k_families: opts.k_families,
                vocab_size: opts.vocab_size,
                states_per_source: opts.states,
                samples_per_family: opts.samples_per_family,
                sample_length: opts.sample_length,
                separation: opts.separation,
                seed: opts.seed,
            };
            let out = synth::generate(&spec, &opts.out)?;
            println!(
                "wrote {} families x {} samples to {}",
                spec.k_families,
                spec.samples_per_family,
                out.data_root.display()
            );
            println!("manifest: {}", out.manifest_path.display());
        }
        Command::TrainHmms(opts) => {
            let cfg = resolve_config(&opts)?;
            pipeline::stage_train_hmms(&cfg)?;
            println!("trained family models in {}", cfg.work_dir.display());
        }
        Command::Features(opts) => {
            let cfg = resolve_config(&opts)?;
            pipeline::stage_features(&cfg)?;
            println!("wrote scaled features to {}", cfg.work_dir.display());
        }
        Command::Train(opts) => {
            let cfg = resolve_config(&opts)?;
            pipeline::stage_train_classifier(&cfg)?;
            println!(
                "trained {} classifier in {}",
                cfg.classifier.name(),
                cfg.work_dir.display()
            );
        }
        Command::Evaluate(opts) => {
            let cfg = resolve_config(&opts)?;
            let (report, timing) = pipeline::stage_evaluate(&cfg)?;
            print!("{}", pipeline::format_report(&report, Some(&timing)));
        }
        Command::Grid(opts) => {
            let cfg = resolve_config(&opts)?;
            let result = pipeline::stage_grid(&cfg)?;
            print!("{}", pipeline::format_grid(&result));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
            };
            ExitCode::from(code)
        }
    }
}

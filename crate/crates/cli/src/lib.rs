//! Command-line harness: dataset generation, training, evaluation, latent
//! export, target-directed generation and parameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dklvae_core::checkpoint::{load_checkpoint, MANIFEST_FILE};
use dklvae_core::config::DatasetConfig;
use dklvae_core::run::{
    checkpoint_dir, evaluation_reports, generate_artifacts, prepare_data, train_experiment,
    write_embeddings_csv, write_metrics_csv, write_predictions_csv, write_reconstruction_images,
    PreparedData, RunError, Subset, OUTPUT_ENV,
};
use dklvae_core::{
    CheckpointError, ConfigError, DklVaeModel, ExperimentConfig, StoreError, StoredDataset,
    TrainError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Run(e.into())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Run(e.into())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    /// Stable category name printed on failure.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Run(e) => match e {
                RunError::Config(_) => "config",
                RunError::Store(StoreError::Io { .. }) | RunError::Io { .. } => "io",
                RunError::Store(_) | RunError::Csv { .. } => "data",
                RunError::Checkpoint(CheckpointError::Io { .. }) => "io",
                RunError::Checkpoint(_) => "checkpoint",
                RunError::HashMismatch { .. } => "checkpoint",
                RunError::Train(TrainError::Config(_)) => "config",
                RunError::Train(_) | RunError::Metric(_) => "train",
                RunError::Incompatible(_) => "incompatible",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "data" => 4,
            "checkpoint" => 5,
            "train" => 6,
            "io" => 7,
            _ => 8,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dklvae", version, about = "VAE with deep-kernel GP latent structuring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the training seed and, for generated datasets, the data seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to $DKLVAE_OUTPUT_DIR, then `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reject any malformed CSV row instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// A training output directory or a checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config to use instead of the one stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory. Defaults to regenerating the configured dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory. Defaults to $DKLVAE_OUTPUT_DIR, then the run
    /// directory holding the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reject any malformed CSV row instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SubsetArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a card dataset to a directory.
    GenCards(ConfigArgs),
    /// Generate or ingest a sequence dataset into a directory.
    GenSequences(ConfigArgs),
    /// Train a model; writes a checkpoint, history and run summary.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset directory. Defaults to building the configured dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Metrics and predictions on a split subset.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "test")]
        subset: SubsetArg,
        /// Also write this many input/reconstruction graymaps (cards only).
        #[arg(long, default_value_t = 0)]
        images: usize,
    },
    /// Export posterior-mean latent coordinates of every sample.
    Embed {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Search the latent space for objects with a given target value.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        target: f64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every point of the config's sweep grid.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
        return Ok(PathBuf::from(p));
    }
    cfg.output
        .dir
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Usage(format!("no output directory: pass --out, set {OUTPUT_ENV} or output.dir")))
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    if args.strict {
        force_strict(&mut cfg);
    }
    Ok(cfg)
}

fn force_strict(cfg: &mut ExperimentConfig) {
    if let DatasetConfig::SequencesCsv { strict, .. } = &mut cfg.dataset {
        *strict = true;
    }
}

fn gen_dataset(args: &ConfigArgs, want_cards: bool) -> Result<String, CliError> {
    let cfg = load_config(args)?;
    if cfg.dataset.is_cards() != want_cards {
        return Err(CliError::Usage(format!(
            "config dataset is not a {} dataset",
            if want_cards { "card" } else { "sequence" }
        )));
    }
    let out = resolve_out(args.out.as_deref(), &cfg)?;
    let data = StoredDataset::from_config(&cfg.dataset)?;
    data.save(&out)?;
    let extra = match &data {
        StoredDataset::Sequences { manifest, .. } if manifest.rejected_rows > 0 => {
            format!(" ({} malformed rows skipped)", manifest.rejected_rows)
        }
        _ => String::new(),
    };
    Ok(format!("wrote {} samples to {}{extra}", data.len(), out.display()))
}

fn train(args: &ConfigArgs, data: Option<&Path>, resume: bool) -> Result<String, CliError> {
    let cfg = load_config(args)?;
    let out = resolve_out(args.out.as_deref(), &cfg)?;
    let prepared = prepare_data(&cfg, data)?;
    eprintln!(
        "train {} / test {} / dropped {}",
        prepared.train.len(),
        prepared.test.len(),
        prepared.dropped
    );
    let outcome = train_experiment(&cfg, &prepared, &out, resume)?;
    Ok(summary_line(&out, &outcome))
}

fn summary_line(out: &Path, outcome: &dklvae_core::run::TrainOutcome) -> String {
    match &outcome.evaluation {
        Some(e) => format!(
            "{} epochs; test rmse {:.4} r2 {:.4} quality {:.4}; output in {}",
            outcome.model.epoch,
            e.rmse,
            e.r2,
            e.quality,
            out.display()
        ),
        None => format!("{} epochs; output in {}", outcome.model.epoch, out.display()),
    }
}

struct Loaded {
    cfg: ExperimentConfig,
    model: DklVaeModel,
    data: PreparedData,
    out: PathBuf,
}

fn load_model(args: &ModelArgs) -> Result<Loaded, CliError> {
    let (dir, run_dir) = if args.checkpoint.join(MANIFEST_FILE).exists() {
        let parent = args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
        (args.checkpoint.clone(), parent)
    } else {
        (checkpoint_dir(&args.checkpoint), args.checkpoint.clone())
    };
    let (manifest, model) = load_checkpoint(&dir)?;
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml_str(&manifest.config)?,
    };
    if args.strict {
        force_strict(&mut cfg);
    }
    // Outputs land next to the checkpoint unless redirected.
    let env = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty());
    let out = match (&args.out, env) {
        (Some(o), _) => o.clone(),
        (None, Some(e)) => PathBuf::from(e),
        (None, None) => run_dir,
    };
    let data = prepare_data(&cfg, args.data.as_deref())?;
    if model.vae.data_dim() != data.train.x.cols() {
        return Err(RunError::Incompatible(format!(
            "checkpoint expects {} values per sample, dataset has {}",
            model.vae.data_dim(),
            data.train.x.cols()
        ))
        .into());
    }
    Ok(Loaded {
        cfg,
        model,
        data,
        out,
    })
}

fn eval(args: &ModelArgs, subset: SubsetArg, images: usize) -> Result<String, CliError> {
    let l = load_model(args)?;
    let subset = match subset {
        SubsetArg::Train => Subset::Train,
        SubsetArg::Test => Subset::Test,
        SubsetArg::All => Subset::All,
    };
    let data = l.data.subset(subset);
    let (reports, ev) = evaluation_reports(&l.model, &l.data.train, &data)?;
    write_metrics_csv(&l.out.join("metrics.csv"), &reports)?;
    write_predictions_csv(&l.out.join("predictions.csv"), &data, &ev)?;
    if images > 0 {
        write_reconstruction_images(&l.model, &data, images, &l.out.join("reconstructions"))?;
    }
    Ok(format!(
        "{} samples: rmse {:.4} r2 {:.4} quality {:.4}; output in {}",
        data.len(),
        ev.rmse,
        ev.r2,
        ev.quality,
        l.out.display()
    ))
}

fn embed(args: &ModelArgs) -> Result<String, CliError> {
    let l = load_model(args)?;
    let data = l.data.stored.to_dataset();
    let path = l.out.join("embeddings.csv");
    write_embeddings_csv(&path, &l.model, &data)?;
    Ok(format!("wrote {} embeddings to {}", data.len(), path.display()))
}

fn generate(args: &ModelArgs, target: f64, n: usize, seed: u64) -> Result<String, CliError> {
    let l = load_model(args)?;
    let cands = generate_artifacts(&l.cfg, &l.model, &l.data.train, target, n, seed, &l.out)?;
    match cands.first() {
        Some(c) => Ok(format!(
            "{} candidates; best predicted {:.4} (variance {:.4}); output in {}",
            cands.len(),
            c.predicted,
            c.variance,
            l.out.display()
        )),
        None => Ok(format!("0 candidates; output in {}", l.out.display())),
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' })
        .collect()
}

fn sweep(args: &ConfigArgs, data: Option<&Path>) -> Result<String, CliError> {
    let cfg = load_config(args)?;
    let out = resolve_out(args.out.as_deref(), &cfg)?;
    let points = cfg.expand_sweep()?;
    let mut table = String::from("index,label,dir,test_rmse,test_r2,test_match_or_ssim\n");
    for (i, (label, point)) in points.iter().enumerate() {
        let dir_name = format!("{i:03}-{}", sanitize(label));
        let dir = out.join(&dir_name);
        eprintln!("[{}/{}] {label}", i + 1, points.len());
        let prepared = prepare_data(point, data)?;
        let outcome = train_experiment(point, &prepared, &dir, false)?;
        let cell = |f: fn(&dklvae_core::trainer::Evaluation) -> f64| {
            outcome.evaluation.as_ref().map(|e| format!("{:?}", f(e))).unwrap_or_default()
        };
        table.push_str(&format!(
            "{i},\"{label}\",{dir_name},{},{},{}\n",
            cell(|e| e.rmse),
            cell(|e| e.r2),
            cell(|e| e.quality)
        ));
    }
    let path = out.join("sweep.csv");
    fs::create_dir_all(&out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    fs::write(&path, table).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(format!("{} runs; summary in {}", points.len(), path.display()))
}

/// Runs one command and returns its summary line.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::GenCards(a) => gen_dataset(&a, true),
        Command::GenSequences(a) => gen_dataset(&a, false),
        Command::Train { common, data, resume } => train(&common, data.as_deref(), resume),
        Command::Eval { model, subset, images } => eval(&model, subset, images),
        Command::Embed { model } => embed(&model),
        Command::Generate {
            model,
            target,
            n,
            seed,
        } => generate(&model, target, n, seed),
        Command::Sweep { common, data } => sweep(&common, data.as_deref()),
    }
}

//! Experiment runs and their artifacts: training output directories, history
//! CSVs, evaluation reports, embeddings and generated candidates.
//!
//! A training output directory holds:
//!
//! * `config.toml`: the resolved experiment config.
//! * `checkpoint/`: the latest checkpoint.
//! * `checkpoints/epoch-NNNNNN/`: checkpoints at evaluation epochs, if enabled.
//! * `history.csv`: one row per epoch. The test columns are filled on
//!   evaluation epochs only and left empty otherwise. `seconds` is empty
//!   unless wall-time recording is on, so the file is reproducible.
//! * `timing.csv`: `epoch,seconds` wall time per epoch.
//! * `run.toml`: run summary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, MANIFEST_FILE};
use crate::config::{ConfigError, ExperimentConfig};
use crate::metrics::{
    exact_match_rate, r2, reconstruction_error_histogram, rmse, write_reports_csv, MetricError,
    MetricReport,
};
use crate::rng::Rng;
use crate::sequences::{format_tokens, one_hot_decode};
use crate::store::{StoreError, StoredDataset};
use crate::tensor::Matrix;
use crate::trainer::{
    evaluate, fit_from, generate_for_target, reconstruct, Candidate, DataKind, Dataset,
    DklVaeModel, EpochRecord, EvalSummary, Evaluation, TrainError,
};

pub const RUN_FORMAT_VERSION: u32 = 1;
pub const HISTORY_HEADER: [&str; 7] = [
    "epoch",
    "vae_loss",
    "dkl_loss",
    "test_rmse",
    "test_r2",
    "test_match_or_ssim",
    "seconds",
];
/// Environment variable overriding the output directory of every command.
pub const OUTPUT_ENV: &str = "DKLVAE_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("checkpoint was trained with config hash {found}, current config hashes to {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("{0}")]
    Incompatible(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RunError + '_ {
    move |e| RunError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// A dataset with its train/test partition.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stored: StoredDataset,
    pub train: Dataset,
    pub test: Dataset,
    pub dropped: usize,
}

/// Loads the dataset from `data_dir`, or builds it from the config section
/// when no directory is given, and applies the configured split.
pub fn prepare_data(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<PreparedData, RunError> {
    let stored = match data_dir {
        Some(dir) => StoredDataset::load(dir)?,
        None => StoredDataset::from_config(&cfg.dataset)?,
    };
    let is_cards = matches!(stored, StoredDataset::Cards { .. });
    if is_cards != cfg.dataset.is_cards() {
        return Err(RunError::Incompatible(format!(
            "config expects a {} dataset",
            if cfg.dataset.is_cards() { "card" } else { "sequence" }
        )));
    }
    let (train, test, dropped) = stored.split(&cfg.split)?;
    if train.is_empty() {
        return Err(RunError::Incompatible("split leaves no training samples".into()));
    }
    Ok(PreparedData {
        stored,
        train,
        test,
        dropped,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn write_history_csv<W: Write>(w: W, records: &[EpochRecord], wall_time: bool) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HISTORY_HEADER)?;
    for r in records {
        out.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.vae_loss),
            format!("{:?}", r.dkl_loss),
            fmt_opt(r.eval.map(|e| e.rmse)),
            fmt_opt(r.eval.map(|e| e.r2)),
            fmt_opt(r.eval.map(|e| e.quality)),
            if wall_time { format!("{:?}", r.seconds) } else { String::new() },
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>, RunError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(HISTORY_HEADER) {
        return Err(RunError::Csv {
            path: path.to_path_buf(),
            message: format!("header must be {}", HISTORY_HEADER.join(",")),
        });
    }
    let bad = |m: String| RunError::Csv {
        path: path.to_path_buf(),
        message: m,
    };
    let num = |s: &str| -> Result<Option<f64>, RunError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| bad(format!("'{s}': {e}")))
        }
    };
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let epoch = rec[0].parse().map_err(|e| bad(format!("epoch '{}': {e}", &rec[0])))?;
        let req = |k: usize| num(&rec[k])?.ok_or_else(|| bad(format!("column {k} is empty")));
        let eval = match (num(&rec[3])?, num(&rec[4])?, num(&rec[5])?) {
            (Some(rmse), Some(r2), Some(quality)) => Some(EvalSummary { rmse, r2, quality }),
            (None, None, None) => None,
            _ => return Err(bad(format!("epoch {epoch}: partial evaluation columns"))),
        };
        records.push(EpochRecord {
            epoch,
            vae_loss: req(1)?,
            dkl_loss: req(2)?,
            eval,
            seconds: num(&rec[6])?.unwrap_or(0.0),
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub format_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub epochs_completed: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub dropped_count: usize,
    /// Phase 2 ran on a resampled subset of this size instead of the full
    /// training set.
    #[serde(default)]
    pub dkl_subset_size: Option<usize>,
    #[serde(default)]
    pub final_test_rmse: Option<f64>,
    #[serde(default)]
    pub final_test_r2: Option<f64>,
    #[serde(default)]
    pub final_test_quality: Option<f64>,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: DklVaeModel,
    /// Every epoch of the run, including those before a resume.
    pub records: Vec<EpochRecord>,
    /// Test metrics of the final model, when there is a test set.
    pub evaluation: Option<Evaluation>,
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

/// Trains per `cfg` into `out`. With `resume`, continues from the checkpoint
/// in `out` (which must have been produced by a config with the same
/// training hash); without it, `out` must not already hold a checkpoint.
pub fn train_experiment(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    out: &Path,
    resume: bool,
) -> Result<TrainOutcome, RunError> {
    cfg.validate()?;
    let arch = cfg.model.architecture(data.train.x.cols());
    let hash = cfg.training_hash();
    let config_text = cfg.to_toml_string();
    let ckpt = checkpoint_dir(out);
    let has_ckpt = ckpt.join(MANIFEST_FILE).exists();
    let (mut model, mut records) = if resume && has_ckpt {
        let (manifest, model) = load_checkpoint(&ckpt)?;
        if manifest.config_hash != hash {
            return Err(RunError::HashMismatch {
                found: manifest.config_hash,
                expected: hash,
            });
        }
        if manifest.architecture != arch {
            return Err(RunError::Incompatible(
                "checkpoint architecture does not match the data".into(),
            ));
        }
        let history = out.join("history.csv");
        let mut records = if history.exists() {
            read_history_csv(&history)?
        } else {
            Vec::new()
        };
        records.retain(|r| r.epoch <= model.epoch);
        (model, records)
    } else {
        if has_ckpt {
            return Err(RunError::Incompatible(format!(
                "{} already holds a checkpoint; resume it or choose another output directory",
                out.display()
            )));
        }
        (DklVaeModel::new(&arch, &cfg.train, &data.train.targets)?, Vec::new())
    };
    write_file(&out.join("config.toml"), config_text.as_bytes())?;

    let wall_time = cfg.output.record_wall_time;
    let test = (!data.test.is_empty()).then_some(&data.test);
    let write_logs = |records: &[EpochRecord]| -> Result<(), RunError> {
        let mut buf = Vec::new();
        write_history_csv(&mut buf, records, wall_time).map_err(csv_err(&out.join("history.csv")))?;
        write_file(&out.join("history.csv"), &buf)?;
        let mut timing = String::from("epoch,seconds\n");
        for r in records {
            timing.push_str(&format!("{},{:?}\n", r.epoch, r.seconds));
        }
        write_file(&out.join("timing.csv"), timing.as_bytes())
    };
    let seed = cfg.train.seed;
    let mut seen = records.clone();
    fit_from(&mut model, &cfg.train, &data.train, test, |m, rec| {
        seen.push(rec.clone());
        if rec.epoch % cfg.train.eval_every == 0 {
            if cfg.output.checkpoint_every_eval {
                let dir = out.join("checkpoints").join(format!("epoch-{:06}", rec.epoch));
                save_checkpoint(&dir, m, &arch, seed, &hash, &config_text)?;
            }
            save_checkpoint(&ckpt, m, &arch, seed, &hash, &config_text)?;
            write_logs(&seen)?;
        }
        Ok::<(), RunError>(())
    })
    .map(|h| records.extend(h.records))?;
    save_checkpoint(&ckpt, &model, &arch, seed, &hash, &config_text)?;
    write_logs(&records)?;

    let evaluation = match test {
        Some(t) => Some(evaluate(&model, &data.train, t)?),
        None => None,
    };
    let summary = RunSummary {
        format_version: RUN_FORMAT_VERSION,
        name: cfg.name.clone(),
        config_hash: hash,
        seed,
        epochs_completed: model.epoch,
        train_count: data.train.len(),
        test_count: data.test.len(),
        dropped_count: data.dropped,
        dkl_subset_size: cfg.train.dkl_subset_size.filter(|&k| k < data.train.len()),
        final_test_rmse: evaluation.as_ref().map(|e| e.rmse),
        final_test_r2: evaluation.as_ref().map(|e| e.r2),
        final_test_quality: evaluation.as_ref().map(|e| e.quality),
    };
    let text = toml::to_string(&summary).map_err(|e| RunError::Incompatible(e.to_string()))?;
    write_file(&out.join("run.toml"), text.as_bytes())?;
    Ok(TrainOutcome {
        model,
        records,
        evaluation,
    })
}

/// Checks that a trained model can consume `data`.
pub fn check_compatible(model: &DklVaeModel, data: &Dataset) -> Result<(), RunError> {
    if model.vae.data_dim() != data.x.cols() {
        return Err(RunError::Incompatible(format!(
            "model expects {} input values per sample, dataset has {}",
            model.vae.data_dim(),
            data.x.cols()
        )));
    }
    Ok(())
}

/// Which subset of a split dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Train,
    Test,
    All,
}

impl PreparedData {
    pub fn subset(&self, s: Subset) -> Dataset {
        match s {
            Subset::Train => self.train.clone(),
            Subset::Test => self.test.clone(),
            Subset::All => {
                let mut ids: Vec<usize> = self.train.ids.iter().chain(&self.test.ids).copied().collect();
                ids.sort_unstable();
                self.stored.to_dataset().select(&ids)
            }
        }
    }
}

/// Metrics of `data` under a GP conditioned on `train`: RMSE and R² per
/// group, reconstruction quality per group, and for one-hot data the share
/// of reconstructions with fewer than three row errors.
pub fn evaluation_reports(
    model: &DklVaeModel,
    train: &Dataset,
    data: &Dataset,
) -> Result<(Vec<MetricReport>, Evaluation), RunError> {
    check_compatible(model, data)?;
    if data.is_empty() {
        return Err(RunError::Incompatible("nothing to evaluate: the subset is empty".into()));
    }
    let ev = evaluate(model, train, data)?;
    let mut reports = vec![
        MetricReport::grouped("rmse", &ev.truth, &ev.prediction, &data.groups, rmse)?,
        MetricReport::grouped("r2", &ev.truth, &ev.prediction, &data.groups, r2)
            .unwrap_or_else(|_| MetricReport::single("r2", f64::NAN, data.len())),
    ];
    match &data.kind {
        DataKind::Image { .. } => {
            reports.push(MetricReport::mean_by_group("ssim", &ev.per_sample_quality, &data.groups)?);
        }
        DataKind::OneHot { rows, alphabet } => {
            reports.push(MetricReport::mean_by_group(
                "exact_match",
                &ev.per_sample_quality,
                &data.groups,
            )?);
            let pairs = onehot_pairs(model, data, *rows, alphabet)?;
            let hist = reconstruction_error_histogram(&pairs)?;
            reports.push(MetricReport::single("below_3_row_errors", hist.fraction_below(3), data.len()));
            debug_assert_eq!(exact_match_rate(&pairs)?, ev.quality);
        }
    }
    Ok((reports, ev))
}

/// `(input, decoded reconstruction)` one-hot pairs.
pub fn onehot_pairs(
    model: &DklVaeModel,
    data: &Dataset,
    rows: usize,
    alphabet: &crate::sequences::Alphabet,
) -> Result<Vec<(Matrix, Matrix)>, RunError> {
    let (logits, _) = reconstruct(model, &data.x)?;
    let a = alphabet.len();
    (0..data.len())
        .map(|i| {
            let shape = |v: &[f64]| {
                Matrix::from_vec(rows, a, v.to_vec()).map_err(|e| RunError::Incompatible(e.to_string()))
            };
            let dec = one_hot_decode(&shape(logits.row(i))?, alphabet)
                .map_err(|e| RunError::Incompatible(e.to_string()))?;
            Ok((shape(data.x.row(i))?, dec.onehot))
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<(), RunError> {
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, reports).map_err(csv_err(path))?;
    write_file(path, &buf)
}

/// `id,group,truth,prediction,variance`.
pub fn write_predictions_csv(path: &Path, data: &Dataset, ev: &Evaluation) -> Result<(), RunError> {
    let mut out = csv::Writer::from_writer(Vec::new());
    let e = csv_err(path);
    out.write_record(["id", "group", "truth", "prediction", "variance"]).map_err(&e)?;
    for i in 0..data.len() {
        out.write_record([
            data.ids[i].to_string(),
            data.groups[i].clone(),
            format!("{:?}", ev.truth[i]),
            format!("{:?}", ev.prediction[i]),
            format!("{:?}", ev.variance[i]),
        ])
        .map_err(&e)?;
    }
    let buf = out.into_inner().map_err(|err| RunError::Csv {
        path: path.to_path_buf(),
        message: err.to_string(),
    })?;
    write_file(path, &buf)
}

/// `id,group,target,z_1..z_d` with posterior means.
pub fn write_embeddings_csv(path: &Path, model: &DklVaeModel, data: &Dataset) -> Result<(), RunError> {
    check_compatible(model, data)?;
    let z = model.embed(&data.x)?;
    let mut out = csv::Writer::from_writer(Vec::new());
    let e = csv_err(path);
    let mut header = vec!["id".to_string(), "group".into(), "target".into()];
    header.extend((1..=z.cols()).map(|k| format!("z_{k}")));
    out.write_record(&header).map_err(&e)?;
    for i in 0..data.len() {
        let mut row = vec![
            data.ids[i].to_string(),
            data.groups[i].clone(),
            format!("{:?}", data.targets[i]),
        ];
        row.extend(z.row(i).iter().map(|v| format!("{v:?}")));
        out.write_record(&row).map_err(&e)?;
    }
    let buf = out.into_inner().map_err(|err| RunError::Csv {
        path: path.to_path_buf(),
        message: err.to_string(),
    })?;
    write_file(path, &buf)
}

/// Binary portable graymap (P5, maxval 255) of values in `[0, 1]`.
pub fn pgm_bytes(pixels: &[f64], width: usize) -> Vec<u8> {
    let height = pixels.len() / width;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Parses a P5 graymap written by [`pgm_bytes`]: `(width, height, bytes)`.
pub fn parse_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let data = bytes.get(pos..)?;
    (data.len() == w * h).then(|| (w, h, data.to_vec()))
}

/// Generates `n` candidates for `target` and writes `candidates.csv`
/// (`rank,predicted,variance,object,z_1..z_d`) into `out`. Card candidates
/// are also written as `candidate-NNN.pgm`, and `object` names the file;
/// sequence candidates are decoded to their token string.
pub fn generate_artifacts(
    cfg: &ExperimentConfig,
    model: &DklVaeModel,
    train: &Dataset,
    target: f64,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<Candidate>, RunError> {
    check_compatible(model, train)?;
    let predictor = model.predictor(train)?;
    let mut rng = Rng::new(seed);
    let cands = generate_for_target(model, &predictor, target, n, &cfg.generate, &mut rng)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("candidates.csv");
    let e = csv_err(&path);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["rank".to_string(), "predicted".into(), "variance".into(), "object".into()];
    header.extend((1..=model.vae.latent_dim()).map(|k| format!("z_{k}")));
    w.write_record(&header).map_err(&e)?;
    for (rank, c) in cands.iter().enumerate() {
        let object = match &train.kind {
            DataKind::Image { width } => {
                let name = format!("candidate-{rank:03}.pgm");
                write_file(&out.join(&name), &pgm_bytes(&c.probs, *width))?;
                name
            }
            DataKind::OneHot { rows, alphabet } => {
                let logits = Matrix::from_vec(*rows, alphabet.len(), c.logits.clone())
                    .map_err(|err| RunError::Incompatible(err.to_string()))?;
                let dec = one_hot_decode(&logits, alphabet)
                    .map_err(|err| RunError::Incompatible(err.to_string()))?;
                format_tokens(&dec.tokens)
            }
        };
        let mut row = vec![
            rank.to_string(),
            format!("{:?}", c.predicted),
            format!("{:?}", c.variance),
            object,
        ];
        row.extend(c.z.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(&e)?;
    }
    let buf = w.into_inner().map_err(|err| RunError::Csv {
        path: path.clone(),
        message: err.to_string(),
    })?;
    write_file(&path, &buf)?;
    Ok(cands)
}

/// Side-by-side input/reconstruction graymaps for the first `n` card samples
/// of `data`, as `recon-<id>.pgm` (input on the left).
pub fn write_reconstruction_images(
    model: &DklVaeModel,
    data: &Dataset,
    n: usize,
    out: &Path,
) -> Result<usize, RunError> {
    let DataKind::Image { width } = data.kind else {
        return Ok(0);
    };
    let n = n.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let sub = data.select(&idx);
    let (_, probs) = reconstruct(model, &sub.x)?;
    for i in 0..n {
        let mut pixels = Vec::with_capacity(2 * width * width);
        for r in 0..sub.x.cols() / width {
            pixels.extend_from_slice(&sub.x.row(i)[r * width..(r + 1) * width]);
            pixels.extend_from_slice(&probs.row(i)[r * width..(r + 1) * width]);
        }
        write_file(&out.join(format!("recon-{}.pgm", sub.ids[i])), &pgm_bytes(&pixels, 2 * width))?;
    }
    Ok(n)
}

//! The two-phase training epoch, full runs with periodic evaluation, target
//! prediction through the GP, and target-conditioned generation.
//!
//! Phase 1 runs shuffled ELBO mini-batches and updates encoder and decoder.
//! Phase 2 embeds the training data (or a fresh random subset) by posterior
//! means and takes one Adam step on `dkl_scale · NLL` with respect to the
//! encoder and the GP hyperparameters. The decoder is not touched in phase 2.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{GpError, GpFit, GpHyperparams, GpPosterior, GpPredictor, GpRawParams};
use crate::metrics::{exact_match_rate, r2, rmse, ssim, MetricError};
use crate::nn::{AdamState, NnError};
use crate::rng::Rng;
use crate::sequences::{one_hot_decode, Alphabet};
use crate::tensor::Matrix;
use crate::vae::{VaeArchitecture, VaeError, VaeModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("GP failure in epoch {epoch}: {source}")]
    Gp { epoch: usize, source: GpError },
    #[error(transparent)]
    Predict(#[from] GpError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn default_one() -> f64 {
    1.0
}

fn default_jitter() -> f64 {
    1e-6
}

/// Optimization settings of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub vae_batch_size: usize,
    pub vae_lr: f64,
    pub dkl_lr: f64,
    #[serde(default = "default_one")]
    pub dkl_scale: f64,
    /// Upper bound `X` of the kernel length-scale.
    pub lengthscale_bound: f64,
    /// Phase 2 uses a fresh uniform subset of this size each epoch.
    #[serde(default)]
    pub dkl_subset_size: Option<usize>,
    pub eval_every: usize,
    pub seed: u64,
    /// Z-score the targets before fitting the GP.
    #[serde(default)]
    pub normalize_targets: bool,
    /// Initial GP length-scale, output scale and noise variance, in the
    /// (possibly normalized) target units.
    pub init_lengthscale: f64,
    pub init_output_scale: f64,
    pub init_noise_variance: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.vae_batch_size == 0 {
            return bad("vae_batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        for (name, v) in [("vae_lr", self.vae_lr), ("dkl_lr", self.dkl_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.dkl_scale >= 0.0 && self.dkl_scale.is_finite()) {
            return bad(format!("dkl_scale must be non-negative, got {}", self.dkl_scale));
        }
        if self.dkl_subset_size == Some(0) {
            return bad("dkl_subset_size must be at least 1".into());
        }
        self.initial_gp().validate().or_else(|e| bad(e.to_string()))?;
        if self.init_lengthscale >= self.lengthscale_bound {
            return bad("init_lengthscale must be below lengthscale_bound".into());
        }
        if self.init_noise_variance <= 0.0 {
            return bad("init_noise_variance must be positive".into());
        }
        Ok(())
    }

    fn initial_gp(&self) -> GpHyperparams {
        GpHyperparams {
            lengthscale: self.init_lengthscale,
            lengthscale_bound: self.lengthscale_bound,
            output_scale: self.init_output_scale,
            noise_variance: self.init_noise_variance,
            jitter: self.jitter,
        }
    }
}

/// Search settings of [`generate_for_target`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    #[serde(default = "GenerateConfig::default_restarts")]
    pub restarts: usize,
    #[serde(default = "GenerateConfig::default_steps")]
    pub steps: usize,
    #[serde(default = "GenerateConfig::default_step_size")]
    pub step_size: f64,
}

impl GenerateConfig {
    fn default_restarts() -> usize {
        256
    }
    fn default_steps() -> usize {
        100
    }
    fn default_step_size() -> f64 {
        0.05
    }
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            restarts: Self::default_restarts(),
            steps: Self::default_steps(),
            step_size: Self::default_step_size(),
        }
    }
}

/// How a row of the data matrix is laid out, which decides the
/// reconstruction-quality metric.
#[derive(Debug, Clone, PartialEq)]
pub enum DataKind {
    /// Grayscale image, row-major with the given width. Quality is mean SSIM.
    Image { width: usize },
    /// Flattened `rows × alphabet` one-hot matrix. Quality is exact-match rate.
    OneHot { rows: usize, alphabet: Alphabet },
}

/// Training or evaluation data as one row per datum.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub targets: Vec<f64>,
    /// Label used for per-group reports (suit, or a constant).
    pub groups: Vec<String>,
    /// Stable identifier of each row in the source dataset.
    pub ids: Vec<usize>,
    pub kind: DataKind,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        targets: Vec<f64>,
        groups: Vec<String>,
        ids: Vec<usize>,
        kind: DataKind,
    ) -> Result<Self, TrainError> {
        let n = x.rows();
        if targets.len() != n || groups.len() != n || ids.len() != n {
            return Err(TrainError::Data(format!(
                "{n} rows but {} targets, {} groups, {} ids",
                targets.len(),
                groups.len(),
                ids.len()
            )));
        }
        if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
            return Err(TrainError::Data(format!("target {i} is not finite")));
        }
        let width = match &kind {
            DataKind::Image { width } => *width,
            DataKind::OneHot { alphabet, .. } => alphabet.len(),
        };
        let expected_cols = match &kind {
            DataKind::Image { .. } => x.cols(),
            DataKind::OneHot { rows, alphabet } => rows * alphabet.len(),
        };
        if width == 0 || x.cols() != expected_cols || !x.cols().is_multiple_of(width) {
            return Err(TrainError::Data(format!(
                "row length {} does not match the data layout",
                x.cols()
            )));
        }
        Ok(Self {
            x,
            targets,
            groups,
            ids,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            kind: self.kind.clone(),
        }
    }
}

/// Affine map between raw targets and the units the GP sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub shift: f64,
    pub scale: f64,
}

impl TargetScaler {
    pub const IDENTITY: TargetScaler = TargetScaler {
        shift: 0.0,
        scale: 1.0,
    };

    /// Z-score parameters of `y` (population standard deviation).
    pub fn fit(y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { shift: mean, scale }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.shift) / self.scale
    }

    pub fn inverse(&self, u: f64) -> f64 {
        u * self.scale + self.shift
    }
}

/// VAE, GP hyperparameters and both optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct DklVaeModel {
    pub vae: VaeModel,
    pub gp_raw: GpRawParams,
    pub lengthscale_bound: f64,
    pub jitter: f64,
    /// Optimizer over trunk, mean head, σ head and decoder, in that order.
    pub vae_opt: AdamState,
    /// Optimizer over trunk, mean head, σ head, then the three GP raws.
    pub dkl_opt: AdamState,
    pub scaler: TargetScaler,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl DklVaeModel {
    /// Fresh model; network weights come from stream 0 of the config seed.
    pub fn new(
        arch: &VaeArchitecture,
        cfg: &TrainConfig,
        train_targets: &[f64],
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).split(0);
        let vae = VaeModel::new(arch, &mut rng)?;
        let h = cfg.initial_gp();
        let gp_raw = GpRawParams::from_constrained(
            h.lengthscale,
            h.lengthscale_bound,
            h.output_scale,
            h.noise_variance,
        );
        let scaler = if cfg.normalize_targets {
            TargetScaler::fit(train_targets)
        } else {
            TargetScaler::IDENTITY
        };
        let vae_len = vae.encoder_param_count() + vae.decoder.param_count();
        let dkl_len = vae.encoder_param_count() + 3;
        Ok(Self {
            vae,
            gp_raw,
            lengthscale_bound: cfg.lengthscale_bound,
            jitter: cfg.jitter,
            vae_opt: AdamState::new(vae_len),
            dkl_opt: AdamState::new(dkl_len),
            scaler,
            epoch: 0,
        })
    }

    pub fn gp_hyperparams(&self) -> GpHyperparams {
        self.gp_raw.constrain(self.lengthscale_bound, self.jitter)
    }

    /// Posterior-mean embeddings of every row.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix, TrainError> {
        Ok(self.vae.encode_mean(x)?)
    }

    /// GP conditioned on the embeddings of `train`.
    pub fn predictor(&self, train: &Dataset) -> Result<TargetPredictor, TrainError> {
        let z = self.embed(&train.x)?;
        let y: Vec<f64> = train.targets.iter().map(|&t| self.scaler.forward(t)).collect();
        let gp = GpPredictor::new(&z, &y, &self.gp_hyperparams())?;
        Ok(TargetPredictor {
            gp,
            scaler: self.scaler,
        })
    }
}

/// GP over training embeddings that answers in raw target units.
#[derive(Debug, Clone)]
pub struct TargetPredictor {
    gp: GpPredictor,
    scaler: TargetScaler,
}

impl TargetPredictor {
    pub fn predict_latent(&self, z: &Matrix) -> Result<GpPosterior, TrainError> {
        let mut post = self.gp.predict(z)?;
        let s = self.scaler.scale;
        for m in &mut post.mean {
            *m = self.scaler.inverse(*m);
        }
        for v in &mut post.variance {
            *v *= s * s;
        }
        Ok(post)
    }

    pub fn gp(&self) -> &GpPredictor {
        &self.gp
    }

    pub fn scaler(&self) -> TargetScaler {
        self.scaler
    }
}

/// Encodes `x` to posterior means and predicts their targets.
pub fn predict_target(
    model: &DklVaeModel,
    predictor: &TargetPredictor,
    x: &Matrix,
) -> Result<GpPosterior, TrainError> {
    predictor.predict_latent(&model.embed(x)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    /// Mean per-datum negative ELBO over phase 1.
    pub vae_loss: f64,
    /// GP negative log marginal likelihood at the start of phase 2, unscaled.
    pub dkl_loss: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    Rng::new(seed).split(1 + epoch as u64)
}

/// Phase 1: one pass of shuffled ELBO mini-batches.
pub fn vae_phase(
    model: &mut DklVaeModel,
    train: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64, TrainError> {
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0;
    for batch in order.chunks(cfg.vae_batch_size) {
        let x = train.x.select_rows(batch);
        let out = model.vae.elbo_loss(&x, rng)?;
        total += out.loss * batch.len() as f64;
        let g = &out.grads;
        let vae = &mut model.vae;
        model.vae_opt.step_segments(
            &mut [
                vae.encoder_trunk.params_mut(),
                vae.mean_head.params_mut(),
                vae.logvar_head.params_mut(),
                vae.decoder.params_mut(),
            ],
            &[&g.encoder_trunk, &g.mean_head, &g.logvar_head, &g.decoder],
            cfg.vae_lr,
        )?;
    }
    Ok(total / n.max(1) as f64)
}

/// Gradients of the unscaled GP NLL of `y` at the posterior means of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DklGradients {
    pub encoder_trunk: Vec<f64>,
    pub mean_head: Vec<f64>,
    /// With respect to the raw length-scale, output-scale and noise variables.
    pub gp_raw: [f64; 3],
}

/// GP NLL of targets `y` (already in scaler units) at the posterior means of
/// `x`, with its gradients through the encoder and the GP raw variables.
pub fn dkl_gradients(
    model: &DklVaeModel,
    x: &Matrix,
    y: &[f64],
) -> Result<(f64, DklGradients), TrainError> {
    let (mu, trunk, mean) = model.vae.encode_mean_trace(x)?;
    let fit = GpFit::new(&mu, y, &model.gp_hyperparams()).map_err(TrainError::Predict)?;
    let grad = fit.gradient().map_err(TrainError::Predict)?;
    let (encoder_trunk, mean_head) = model.vae.backward_mean(&trunk, &mean, &grad.dz)?;
    let gp_raw = model.gp_raw.chain_gradient(model.lengthscale_bound, &grad);
    Ok((
        fit.nll(),
        DklGradients {
            encoder_trunk,
            mean_head,
            gp_raw,
        },
    ))
}

/// Phase 2: one Adam step on `dkl_scale · NLL`. Returns the unscaled NLL.
pub fn dkl_phase(
    model: &mut DklVaeModel,
    train: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64, TrainError> {
    let epoch = model.epoch + 1;
    let n = train.len();
    let subset: Option<Vec<usize>> = match cfg.dkl_subset_size {
        Some(k) if k < n => {
            let mut idx = rng.sample_indices(n, k);
            idx.sort_unstable();
            Some(idx)
        }
        _ => None,
    };
    let (x, targets) = match &subset {
        Some(idx) => (
            train.x.select_rows(idx),
            idx.iter().map(|&i| train.targets[i]).collect::<Vec<_>>(),
        ),
        None => (train.x.clone(), train.targets.clone()),
    };
    let y: Vec<f64> = targets.iter().map(|&t| model.scaler.forward(t)).collect();

    let (nll, g) = dkl_gradients(model, &x, &y).map_err(|e| match e {
        TrainError::Predict(source) => TrainError::Gp { epoch, source },
        other => other,
    })?;
    let s = cfg.dkl_scale;
    let scaled = |v: &[f64]| v.iter().map(|x| x * s).collect::<Vec<_>>();
    let d_trunk = scaled(&g.encoder_trunk);
    let d_mean = scaled(&g.mean_head);
    let d_logvar = vec![0.0; model.vae.logvar_head.param_count()];
    let d_gp = g.gp_raw.map(|v| v * s);
    let mut raw = model.gp_raw.to_array();
    let vae = &mut model.vae;
    model.dkl_opt.step_segments(
        &mut [
            vae.encoder_trunk.params_mut(),
            vae.mean_head.params_mut(),
            vae.logvar_head.params_mut(),
            &mut raw[..],
        ],
        &[&d_trunk, &d_mean, &d_logvar, &d_gp],
        cfg.dkl_lr,
    )?;
    model.gp_raw = GpRawParams::from_array(raw);
    Ok(nll)
}

/// Runs both phases of one epoch and advances the epoch counter.
pub fn train_epoch(
    model: &mut DklVaeModel,
    train: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<EpochLosses, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    let vae_loss = vae_phase(model, train, cfg, rng)?;
    let dkl_loss = dkl_phase(model, train, cfg, rng)?;
    model.epoch += 1;
    Ok(EpochLosses { vae_loss, dkl_loss })
}

/// Test-set metrics of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rmse: f64,
    pub r2: f64,
    /// Mean SSIM for images, exact-match rate for one-hot data.
    pub quality: f64,
    pub truth: Vec<f64>,
    pub prediction: Vec<f64>,
    pub variance: Vec<f64>,
    /// Per-datum SSIM or exact-match indicator.
    pub per_sample_quality: Vec<f64>,
}

/// Reconstructs each row of `x` from its posterior mean. Returns decoder
/// logits and probabilities.
pub fn reconstruct(model: &DklVaeModel, x: &Matrix) -> Result<(Matrix, Matrix), TrainError> {
    let z = model.embed(x)?;
    let d = model.vae.decode(&z)?;
    Ok((d.logits, d.probs))
}

/// Per-datum reconstruction quality from the posterior mean.
pub fn reconstruction_quality(model: &DklVaeModel, data: &Dataset) -> Result<Vec<f64>, TrainError> {
    let (logits, probs) = reconstruct(model, &data.x)?;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let q = match &data.kind {
            DataKind::Image { width } => ssim(data.x.row(i), probs.row(i), *width)?,
            DataKind::OneHot { rows, alphabet } => {
                let a = alphabet.len();
                let l = Matrix::from_vec(*rows, a, logits.row(i).to_vec())
                    .map_err(|e| TrainError::Data(e.to_string()))?;
                let truth = Matrix::from_vec(*rows, a, data.x.row(i).to_vec())
                    .map_err(|e| TrainError::Data(e.to_string()))?;
                let dec = one_hot_decode(&l, alphabet).map_err(|e| TrainError::Data(e.to_string()))?;
                exact_match_rate(&[(truth, dec.onehot)])?
            }
        };
        out.push(q);
    }
    Ok(out)
}

pub fn evaluate(
    model: &DklVaeModel,
    train: &Dataset,
    test: &Dataset,
) -> Result<Evaluation, TrainError> {
    let predictor = model.predictor(train)?;
    let post = predict_target(model, &predictor, &test.x)?;
    let per_sample_quality = reconstruction_quality(model, test)?;
    let quality = per_sample_quality.iter().sum::<f64>() / per_sample_quality.len().max(1) as f64;
    Ok(Evaluation {
        rmse: rmse(&test.targets, &post.mean)?,
        r2: r2(&test.targets, &post.mean).unwrap_or(f64::NAN),
        quality,
        truth: test.targets.clone(),
        prediction: post.mean,
        variance: post.variance,
        per_sample_quality,
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub vae_loss: f64,
    pub dkl_loss: f64,
    pub eval: Option<EvalSummary>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub rmse: f64,
    pub r2: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn evaluations(&self) -> impl Iterator<Item = (usize, EvalSummary)> + '_ {
        self.records
            .iter()
            .filter_map(|r| r.eval.map(|e| (r.epoch, e)))
    }
}

/// Continues training `model` until `cfg.epochs` epochs are complete.
/// Evaluates on `test` (when non-empty) after every epoch divisible by
/// `cfg.eval_every`. `on_epoch` sees the model after each epoch and may stop
/// the run by returning an error.
pub fn fit_from<E, F>(
    model: &mut DklVaeModel,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut on_epoch: F,
) -> Result<TrainHistory, E>
where
    E: From<TrainError>,
    F: FnMut(&DklVaeModel, &EpochRecord) -> Result<(), E>,
{
    cfg.validate()?;
    let mut history = TrainHistory::default();
    while model.epoch < cfg.epochs {
        let start = Instant::now();
        let mut rng = epoch_rng(cfg.seed, model.epoch);
        let losses = train_epoch(model, train, cfg, &mut rng)?;
        let eval = match test {
            Some(t) if !t.is_empty() && model.epoch.is_multiple_of(cfg.eval_every) => {
                let e = evaluate(model, train, t)?;
                Some(EvalSummary {
                    rmse: e.rmse,
                    r2: e.r2,
                    quality: e.quality,
                })
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch: model.epoch,
            vae_loss: losses.vae_loss,
            dkl_loss: losses.dkl_loss,
            eval,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(model, &record)?;
        history.records.push(record);
    }
    Ok(history)
}

/// Fresh model trained for `cfg.epochs` epochs.
pub fn fit(
    arch: &VaeArchitecture,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<(DklVaeModel, TrainHistory), TrainError> {
    if train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    if let Some(t) = test {
        if train.ids.iter().any(|id| t.ids.contains(id)) {
            return Err(TrainError::Data("train and test sets share samples".into()));
        }
    }
    let mut model = DklVaeModel::new(arch, cfg, &train.targets)?;
    let history = fit_from(&mut model, cfg, train, test, |_, _| Ok::<(), TrainError>(()))?;
    Ok((model, history))
}

/// A generated latent point with its decoding and predicted target.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: f64,
    pub variance: f64,
}

/// Searches the latent space for points whose GP mean is `target`.
///
/// Starts from `restarts` draws of N(0, I), runs gradient descent with step
/// halving on `((m(z) − t) / s)²` where `s` is the target scale the GP was
/// fitted with, then decodes the best `n_candidates` ranked by `|m(z) − t|` and then by
/// predictive variance.
pub fn generate_for_target(
    model: &DklVaeModel,
    predictor: &TargetPredictor,
    target: f64,
    n_candidates: usize,
    cfg: &GenerateConfig,
    rng: &mut Rng,
) -> Result<Vec<Candidate>, TrainError> {
    if n_candidates == 0 {
        return Ok(Vec::new());
    }
    let d = model.vae.latent_dim();
    let t = predictor.scaler().forward(target);
    let mut points = Matrix::zeros(cfg.restarts, d);
    for v in points.as_mut_slice() {
        *v = rng.standard_normal();
    }
    // A step is kept only if it lowers the objective; otherwise the step
    // size of that restart halves. Steep GP means otherwise overshoot into
    // regions far from the data, where the mean collapses to zero.
    for r in 0..cfg.restarts {
        let z = points.row_mut(r);
        let mut step = cfg.step_size;
        let (mut m, mut g) = predictor.gp().mean_and_gradient(z);
        let mut trial = vec![0.0; d];
        for _ in 0..cfg.steps {
            let c = 2.0 * (m - t) * step;
            for ((ti, zi), gi) in trial.iter_mut().zip(z.iter()).zip(&g) {
                *ti = zi - c * gi;
            }
            let (m_new, g_new) = predictor.gp().mean_and_gradient(&trial);
            if (m_new - t).powi(2) < (m - t).powi(2) {
                z.copy_from_slice(&trial);
                (m, g) = (m_new, g_new);
            } else {
                step *= 0.5;
            }
        }
    }
    let post = predictor.predict_latent(&points)?;
    let mut order: Vec<usize> = (0..cfg.restarts).collect();
    order.sort_by(|&a, &b| {
        let ea = (post.mean[a] - target).abs();
        let eb = (post.mean[b] - target).abs();
        ea.total_cmp(&eb)
            .then(post.variance[a].total_cmp(&post.variance[b]))
            .then(a.cmp(&b))
    });
    order.truncate(n_candidates);
    let chosen = points.select_rows(&order);
    let dec = model.vae.decode(&chosen)?;
    Ok(order
        .iter()
        .enumerate()
        .map(|(k, &i)| Candidate {
            z: chosen.row(k).to_vec(),
            logits: dec.logits.row(k).to_vec(),
            probs: dec.probs.row(k).to_vec(),
            predicted: post.mean[i],
            variance: post.variance[i],
        })
        .collect())
}

//! Exact Gaussian-process regression on latent embeddings.
//!
//! The kernel is `a² exp(−‖z − z'‖² / 2ℓ²)`. Every solve goes through the
//! Cholesky factor of `K + (σ² + jitter)·I`; jitter starts at `jitter·a²` and is
//! raised tenfold on each failed factorization, up to `1e-2·a²`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{sigmoid, softplus};
use crate::tensor::{
    cholesky, cholesky_inverse, cholesky_log_det, cholesky_solve, gemm, solve_lower, Matrix,
    TensorError, View,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_RELATIVE_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("latent dims differ: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("{points} points but {targets} targets")]
    TargetLength { points: usize, targets: usize },
    #[error("GP needs at least one training point")]
    Empty,
    #[error("non-finite target at index {index}")]
    NonFiniteTarget { index: usize },
    #[error("ill-conditioned kernel: Cholesky failed even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Kernel and likelihood hyperparameters in constrained form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub lengthscale: f64,
    /// Upper bound `X` of the length-scale.
    pub lengthscale_bound: f64,
    pub output_scale: f64,
    pub noise_variance: f64,
    /// Initial diagonal jitter relative to `output_scale²`.
    pub jitter: f64,
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<(), GpError> {
        let bad = |m: &str| Err(GpError::InvalidHyperparams(m.to_string()));
        if !(self.lengthscale_bound > 0.0) {
            return bad("lengthscale bound must be positive");
        }
        if !(self.lengthscale > 0.0 && self.lengthscale <= self.lengthscale_bound) {
            return bad("lengthscale must lie in (0, bound]");
        }
        if !(self.output_scale > 0.0) || !self.output_scale.is_finite() {
            return bad("output scale must be positive");
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return bad("noise variance must be non-negative");
        }
        if !(self.jitter > 0.0) {
            return bad("jitter must be positive");
        }
        Ok(())
    }

    fn signal_variance(&self) -> f64 {
        self.output_scale * self.output_scale
    }
}

/// Unconstrained optimization variables behind [`GpHyperparams`].
///
/// `ℓ = X·sigmoid(θ_ℓ)`, `a = softplus(θ_a)`, `σ² = softplus(θ_σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpRawParams {
    pub lengthscale: f64,
    pub output_scale: f64,
    pub noise: f64,
}

impl GpRawParams {
    pub fn constrain(&self, bound: f64, jitter: f64) -> GpHyperparams {
        GpHyperparams {
            lengthscale: constrain_lengthscale(self.lengthscale, bound),
            lengthscale_bound: bound,
            output_scale: softplus(self.output_scale),
            noise_variance: softplus(self.noise),
            jitter,
        }
    }

    /// Raw values that constrain to the given `ℓ`, `a`, `σ²`.
    pub fn from_constrained(lengthscale: f64, bound: f64, output_scale: f64, noise: f64) -> Self {
        let p = (lengthscale / bound).clamp(1e-12, 1.0 - 1e-12);
        Self {
            lengthscale: (p / (1.0 - p)).ln(),
            output_scale: inverse_softplus(output_scale),
            noise: inverse_softplus(noise),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.lengthscale, self.output_scale, self.noise]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            lengthscale: a[0],
            output_scale: a[1],
            noise: a[2],
        }
    }

    /// Chains a constrained-space gradient back to the raw variables.
    pub fn chain_gradient(&self, bound: f64, g: &GpGradient) -> [f64; 3] {
        let s = sigmoid(self.lengthscale);
        [
            g.d_lengthscale * bound * s * (1.0 - s),
            g.d_output_scale * sigmoid(self.output_scale),
            g.d_noise_variance * sigmoid(self.noise),
        ]
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Maps an unconstrained value into `(0, X)`.
pub fn constrain_lengthscale(raw: f64, bound: f64) -> f64 {
    bound * sigmoid(raw)
}

fn check_dims(z1: &Matrix, z2: &Matrix) -> Result<(), GpError> {
    if z1.cols() != z2.cols() {
        return Err(GpError::DimMismatch {
            left: z1.cols(),
            right: z2.cols(),
        });
    }
    Ok(())
}

/// Squared distances between rows of `z1` and rows of `z2`.
fn squared_distances(z1: &Matrix, z2: &Matrix) -> Matrix {
    let (n, m) = (z1.rows(), z2.rows());
    let mut d = Matrix::zeros(n, m);
    for i in 0..n {
        let a = z1.row(i);
        let row = d.row_mut(i);
        for (j, out) in row.iter_mut().enumerate() {
            let b = z2.row(j);
            *out = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    d
}

/// `K[i, j] = a² exp(−‖z1_i − z2_j‖² / 2ℓ²)`.
pub fn rbf_kernel(z1: &Matrix, z2: &Matrix, h: &GpHyperparams) -> Result<Matrix, GpError> {
    check_dims(z1, z2)?;
    let a2 = h.signal_variance();
    let inv = 1.0 / (2.0 * h.lengthscale * h.lengthscale);
    Ok(squared_distances(z1, z2).map(|d| a2 * (-d * inv).exp()))
}

/// Factorized training covariance shared by likelihood, gradient and prediction.
#[derive(Debug, Clone)]
pub struct GpFit {
    hyper: GpHyperparams,
    z: Matrix,
    kernel: Matrix,
    sq_dist: Matrix,
    chol: Matrix,
    alpha: Vec<f64>,
    /// Absolute jitter that made the factorization succeed.
    jitter: f64,
    nll: f64,
}

impl GpFit {
    pub fn new(z: &Matrix, y: &[f64], h: &GpHyperparams) -> Result<Self, GpError> {
        h.validate()?;
        let n = z.rows();
        if n == 0 {
            return Err(GpError::Empty);
        }
        if y.len() != n {
            return Err(GpError::TargetLength {
                points: n,
                targets: y.len(),
            });
        }
        if let Some(index) = y.iter().position(|v| !v.is_finite()) {
            return Err(GpError::NonFiniteTarget { index });
        }
        let a2 = h.signal_variance();
        let inv = 1.0 / (2.0 * h.lengthscale * h.lengthscale);
        let sq_dist = squared_distances(z, z);
        let kernel = sq_dist.map(|d| a2 * (-d * inv).exp());

        let mut jitter = h.jitter * a2;
        let chol = loop {
            let mut ks = kernel.clone();
            ks.add_diagonal(h.noise_variance + jitter);
            match cholesky(&ks) {
                Ok(l) => break l,
                Err(TensorError::NotPositiveDefinite { .. }) => {
                    jitter *= 10.0;
                    if jitter > MAX_RELATIVE_JITTER * a2 * (1.0 + 1e-9) {
                        return Err(GpError::IllConditioned { jitter: jitter / 10.0 });
                    }
                }
                Err(e) => return Err(e.into()),
            }
        };
        let alpha = cholesky_solve(&chol, &Matrix::column(y))?.into_vec();
        let quad: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let nll = 0.5 * quad + 0.5 * cholesky_log_det(&chol) + 0.5 * n as f64 * LN_2PI;
        Ok(Self {
            hyper: *h,
            z: z.clone(),
            kernel,
            sq_dist,
            chol,
            alpha,
            jitter,
            nll,
        })
    }

    pub fn nll(&self) -> f64 {
        self.nll
    }

    /// Absolute diagonal jitter used in the factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyper
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Exact gradient of the NLL.
    ///
    /// With `W = ½(K_σ⁻¹ − ααᵀ)` the NLL differential is `tr(W dK_σ)`; `W` is
    /// then chained through the kernel entries to embeddings and
    /// hyperparameters. The jitter scales with `a²` and is differentiated as
    /// such, so the result is the gradient of the value actually returned.
    pub fn gradient(&self) -> Result<GpGradient, GpError> {
        let n = self.z.rows();
        let d = self.z.cols();
        let h = &self.hyper;
        let kinv = cholesky_inverse(&self.chol)?;

        // M = W ∘ K, accumulated with the scalar reductions.
        let mut m = Matrix::zeros(n, n);
        let mut sum_wk = 0.0;
        let mut sum_wkr = 0.0;
        let mut trace_w = 0.0;
        for i in 0..n {
            let ai = self.alpha[i];
            let krow = self.kernel.row(i);
            let drow = self.sq_dist.row(i);
            let irow = kinv.row(i);
            let mrow = m.row_mut(i);
            for j in 0..n {
                let w = 0.5 * (irow[j] - ai * self.alpha[j]);
                let wk = w * krow[j];
                mrow[j] = wk;
                sum_wk += wk;
                sum_wkr += wk * drow[j];
            }
            trace_w += 0.5 * (irow[i] - ai * ai);
        }

        let l = h.lengthscale;
        let a = h.output_scale;
        let d_lengthscale = sum_wkr / (l * l * l);
        let d_output_scale = 2.0 / a * (sum_wk + self.jitter * trace_w);
        let d_noise_variance = trace_w;

        // dz_i = −(2/ℓ²) Σ_j M_ij (z_i − z_j)  (M symmetric).
        let mut mz = Matrix::zeros(n, d);
        gemm(1.0, View::of(&m), View::of(&self.z), 0.0, mz.as_mut_slice());
        let scale = -2.0 / (l * l);
        let mut dz = Matrix::zeros(n, d);
        for i in 0..n {
            let rs: f64 = m.row(i).iter().sum();
            let zi = self.z.row(i);
            let mzi = mz.row(i);
            for (k, out) in dz.row_mut(i).iter_mut().enumerate() {
                *out = scale * (rs * zi[k] - mzi[k]);
            }
        }
        Ok(GpGradient {
            dz,
            d_lengthscale,
            d_output_scale,
            d_noise_variance,
        })
    }

    pub fn predictor(self) -> GpPredictor {
        GpPredictor { fit: self }
    }
}

/// Gradients of the NLL in constrained space.
#[derive(Debug, Clone, PartialEq)]
pub struct GpGradient {
    pub dz: Matrix,
    pub d_lengthscale: f64,
    pub d_output_scale: f64,
    pub d_noise_variance: f64,
}

/// Pointwise predictive mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Negative log marginal likelihood of `y` at inputs `z`.
pub fn gp_nll(z: &Matrix, y: &[f64], h: &GpHyperparams) -> Result<f64, GpError> {
    Ok(GpFit::new(z, y, h)?.nll())
}

/// NLL gradient with respect to inputs and hyperparameters.
pub fn gp_nll_grad(z: &Matrix, y: &[f64], h: &GpHyperparams) -> Result<GpGradient, GpError> {
    GpFit::new(z, y, h)?.gradient()
}

/// Conditions on `(z_train, y)` and predicts at `z_test`.
pub fn gp_predict(
    z_train: &Matrix,
    y: &[f64],
    z_test: &Matrix,
    h: &GpHyperparams,
) -> Result<GpPosterior, GpError> {
    GpFit::new(z_train, y, h)?.predictor().predict(z_test)
}

/// A conditioned GP that can be queried repeatedly.
#[derive(Debug, Clone)]
pub struct GpPredictor {
    fit: GpFit,
}

impl GpPredictor {
    pub fn new(z_train: &Matrix, y: &[f64], h: &GpHyperparams) -> Result<Self, GpError> {
        Ok(GpFit::new(z_train, y, h)?.predictor())
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.fit.hyper
    }

    pub fn training_inputs(&self) -> &Matrix {
        &self.fit.z
    }

    pub fn predict(&self, z_test: &Matrix) -> Result<GpPosterior, GpError> {
        let h = &self.fit.hyper;
        let ks = rbf_kernel(&self.fit.z, z_test, h)?;
        let m = z_test.rows();
        let mut mean = vec![0.0; m];
        for (i, &a) in self.fit.alpha.iter().enumerate() {
            for (out, k) in mean.iter_mut().zip(ks.row(i)) {
                *out += a * k;
            }
        }
        let v = solve_lower(&self.fit.chol, &ks)?;
        let mut explained = vec![0.0; m];
        for i in 0..v.rows() {
            for (out, x) in explained.iter_mut().zip(v.row(i)) {
                *out += x * x;
            }
        }
        let prior = h.signal_variance() + h.noise_variance;
        let variance = explained.iter().map(|e| (prior - e).max(0.0)).collect();
        Ok(GpPosterior { mean, variance })
    }

    /// Predictive mean at a single point and its gradient with respect to it.
    pub fn mean_and_gradient(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let h = &self.fit.hyper;
        let a2 = h.signal_variance();
        let inv_l2 = 1.0 / (h.lengthscale * h.lengthscale);
        let mut mean = 0.0;
        let mut grad = vec![0.0; z.len()];
        for (i, &a) in self.fit.alpha.iter().enumerate() {
            let zi = self.fit.z.row(i);
            let d2: f64 = z.iter().zip(zi).map(|(p, q)| (p - q) * (p - q)).sum();
            let k = a2 * (-0.5 * d2 * inv_l2).exp();
            mean += a * k;
            let c = -a * k * inv_l2;
            for (g, (p, q)) in grad.iter_mut().zip(z.iter().zip(zi)) {
                *g += c * (p - q);
            }
        }
        (mean, grad)
    }
}

//! Encoder/decoder wiring and the ELBO objective.
//!
//! The decoder models each output dimension as an independent Bernoulli, so the
//! reconstruction term is binary cross-entropy computed from logits. The
//! encoder's second head passes through Softplus to give the posterior standard
//! deviation directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{init_mlp, sigmoid, softplus, Activation, LayerSpec, MlpModel, NnError, Trace};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Floor applied to σ so `ln σ` stays finite if Softplus underflows.
pub const SIGMA_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VaeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("input value {value} at ({row}, {col}) is outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("noise has shape {found:?}, expected {expected:?}")]
    NoiseShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("latent input has {found} columns, model latent dim is {expected}")]
    LatentShape { expected: usize, found: usize },
}

/// Layer sizes of a VAE. The decoder mirrors the encoder's hidden sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArchitecture {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl VaeArchitecture {
    pub fn encoder_trunk(&self) -> Vec<LayerSpec> {
        let mut dims = vec![self.data_dim];
        dims.extend(&self.hidden);
        dims.windows(2)
            .map(|w| LayerSpec::new(w[0], w[1], Activation::Tanh))
            .collect()
    }

    fn trunk_out(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.data_dim)
    }

    pub fn mean_head(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::new(self.trunk_out(), self.latent_dim, Activation::Identity)]
    }

    /// Affine layer whose output is mapped through Softplus to σ.
    pub fn logvar_head(&self) -> Vec<LayerSpec> {
        self.mean_head()
    }

    pub fn decoder(&self) -> Vec<LayerSpec> {
        let mut dims = vec![self.latent_dim];
        dims.extend(self.hidden.iter().rev());
        dims.push(self.data_dim);
        let n = dims.len() - 1;
        dims.windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n {
                    Activation::Sigmoid
                } else {
                    Activation::Tanh
                };
                LayerSpec::new(w[0], w[1], act)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder_trunk: MlpModel,
    pub mean_head: MlpModel,
    pub logvar_head: MlpModel,
    pub decoder: MlpModel,
    latent_dim: usize,
}

/// Diagonal Gaussian posterior of a single datum.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Posteriors of a batch, one row per datum.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBatch {
    pub mu: Matrix,
    pub sigma: Matrix,
}

impl PosteriorBatch {
    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.rows() == 0
    }

    pub fn get(&self, i: usize) -> LatentGaussian {
        LatentGaussian {
            mu: self.mu.row(i).to_vec(),
            sigma: self.sigma.row(i).to_vec(),
        }
    }

    pub fn gaussians(&self) -> Vec<LatentGaussian> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Decoder output: Bernoulli logits and the matching probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub logits: Matrix,
    pub probs: Matrix,
}

/// Gradients of a scalar with respect to each VAE sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder_trunk: Vec<f64>,
    pub mean_head: Vec<f64>,
    pub logvar_head: Vec<f64>,
    pub decoder: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ElboOutput {
    /// Mean over the batch of reconstruction NLL plus KL; minimizing it
    /// maximizes the ELBO.
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub grads: VaeGrads,
}

pub(crate) struct EncoderTrace {
    trunk: Trace,
    mean: Trace,
    std: Trace,
}

impl VaeModel {
    pub fn new(arch: &VaeArchitecture, rng: &mut Rng) -> Result<Self, VaeError> {
        Ok(Self {
            encoder_trunk: init_mlp(&arch.encoder_trunk(), rng)?,
            mean_head: init_mlp(&arch.mean_head(), rng)?,
            logvar_head: init_mlp(&arch.logvar_head(), rng)?,
            decoder: init_mlp(&arch.decoder(), rng)?,
            latent_dim: arch.latent_dim,
        })
    }

    /// Assembles a model from existing networks, checking that they chain.
    pub fn from_parts(
        encoder_trunk: MlpModel,
        mean_head: MlpModel,
        logvar_head: MlpModel,
        decoder: MlpModel,
    ) -> Result<Self, VaeError> {
        let t = encoder_trunk.output_dim();
        for head in [&mean_head, &logvar_head] {
            if head.input_dim() != t {
                return Err(NnError::BrokenChain {
                    layer: 0,
                    expected: head.input_dim(),
                    found: t,
                }
                .into());
            }
        }
        let latent_dim = mean_head.output_dim();
        if logvar_head.output_dim() != latent_dim || decoder.input_dim() != latent_dim {
            return Err(VaeError::LatentShape {
                expected: latent_dim,
                found: decoder.input_dim(),
            });
        }
        if decoder.output_dim() != encoder_trunk.input_dim() {
            return Err(NnError::BrokenChain {
                layer: 0,
                expected: encoder_trunk.input_dim(),
                found: decoder.output_dim(),
            }
            .into());
        }
        Ok(Self {
            encoder_trunk,
            mean_head,
            logvar_head,
            decoder,
            latent_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.encoder_trunk.input_dim()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder_trunk.param_count()
            + self.mean_head.param_count()
            + self.logvar_head.param_count()
    }

    pub(crate) fn encode_trace(&self, x: &Matrix) -> Result<(PosteriorBatch, EncoderTrace), VaeError> {
        let trunk = self.encoder_trunk.forward_trace(x)?;
        let mean = self.mean_head.forward_trace(trunk.output())?;
        let std = self.logvar_head.forward_trace(trunk.output())?;
        let sigma = std.output().map(|h| softplus(h).max(SIGMA_FLOOR));
        let post = PosteriorBatch {
            mu: mean.output().clone(),
            sigma,
        };
        Ok((post, EncoderTrace { trunk, mean, std }))
    }

    /// Posterior for every row of `x`.
    pub fn encode(&self, x: &Matrix) -> Result<PosteriorBatch, VaeError> {
        Ok(self.encode_trace(x)?.0)
    }

    /// Posterior means only; skips the σ head.
    pub fn encode_mean(&self, x: &Matrix) -> Result<Matrix, VaeError> {
        let h = self.encoder_trunk.predict(x)?;
        Ok(self.mean_head.predict(&h)?)
    }

    pub(crate) fn encode_mean_trace(&self, x: &Matrix) -> Result<(Matrix, Trace, Trace), VaeError> {
        let trunk = self.encoder_trunk.forward_trace(x)?;
        let mean = self.mean_head.forward_trace(trunk.output())?;
        Ok((mean.output().clone(), trunk, mean))
    }

    /// Gradient of a scalar with respect to the encoder parameters, given its
    /// gradient with respect to the posterior means.
    pub(crate) fn backward_mean(
        &self,
        trunk: &Trace,
        mean: &Trace,
        dmu: &Matrix,
    ) -> Result<(Vec<f64>, Vec<f64>), VaeError> {
        let (d_mean, dh) = self.mean_head.backward(mean, dmu)?;
        let (d_trunk, _) = self.encoder_trunk.backward(trunk, &dh)?;
        Ok((d_trunk, d_mean))
    }

    pub fn decode(&self, z: &Matrix) -> Result<Decoded, VaeError> {
        if z.cols() != self.latent_dim {
            return Err(VaeError::LatentShape {
                expected: self.latent_dim,
                found: z.cols(),
            });
        }
        let trace = self.decoder.forward_trace(z)?;
        Ok(Decoded {
            logits: trace.output_pre_activation().clone(),
            probs: trace.into_output(),
        })
    }

    /// Loss and gradients with one reparameterized sample per datum drawn from `rng`.
    pub fn elbo_loss(&self, x: &Matrix, rng: &mut Rng) -> Result<ElboOutput, VaeError> {
        let mut eps = Matrix::zeros(x.rows(), self.latent_dim);
        for v in eps.as_mut_slice() {
            *v = rng.standard_normal();
        }
        self.elbo_loss_with_eps(x, &eps)
    }

    /// Loss and gradients with fixed noise `eps` (batch × latent_dim).
    pub fn elbo_loss_with_eps(&self, x: &Matrix, eps: &Matrix) -> Result<ElboOutput, VaeError> {
        check_unit_interval(x)?;
        let batch = x.rows();
        if eps.shape() != (batch, self.latent_dim) {
            return Err(VaeError::NoiseShape {
                expected: (batch, self.latent_dim),
                found: eps.shape(),
            });
        }
        let (post, enc) = self.encode_trace(x)?;

        let mut z = post.mu.clone();
        for ((zi, s), e) in z
            .as_mut_slice()
            .iter_mut()
            .zip(post.sigma.as_slice())
            .zip(eps.as_slice())
        {
            *zi += s * e;
        }

        let dec = self.decoder.forward_trace(&z)?;
        let logits = dec.output_pre_activation();
        let inv_b = 1.0 / batch.max(1) as f64;

        let mut recon = 0.0;
        let mut dlogits = Matrix::zeros(batch, logits.cols());
        for ((dl, &l), &t) in dlogits
            .as_mut_slice()
            .iter_mut()
            .zip(logits.as_slice())
            .zip(x.as_slice())
        {
            recon += bce_with_logits(l, t);
            *dl = (sigmoid(l) - t) * inv_b;
        }
        recon *= inv_b;

        let kl: f64 = (0..batch)
            .map(|i| kl_diag_gaussian(&post.get(i)))
            .sum::<f64>()
            * inv_b;

        let (d_decoder, dz) = self.decoder.backward_from_pre(&dec, &dlogits)?;

        // z = μ + σ ε; KL contributes μ and σ − 1/σ per datum.
        let mut dmu = dz.clone();
        let mut dh = Matrix::zeros(batch, self.latent_dim);
        let hs = enc.std.output().as_slice();
        for i in 0..dmu.as_slice().len() {
            let mu = post.mu.as_slice()[i];
            let s = post.sigma.as_slice()[i];
            dmu.as_mut_slice()[i] += mu * inv_b;
            let dsigma = dz.as_slice()[i] * eps.as_slice()[i] + (s - 1.0 / s) * inv_b;
            let h = hs[i];
            // Clamped σ carries no gradient.
            dh.as_mut_slice()[i] = if softplus(h) > SIGMA_FLOOR {
                dsigma * sigmoid(h)
            } else {
                0.0
            };
        }

        let (d_mean, dt_mean) = self.mean_head.backward(&enc.mean, &dmu)?;
        let (d_std, dt_std) = self.logvar_head.backward(&enc.std, &dh)?;
        let mut dtrunk_out = dt_mean;
        for (a, b) in dtrunk_out.as_mut_slice().iter_mut().zip(dt_std.as_slice()) {
            *a += b;
        }
        let (d_trunk, _) = self.encoder_trunk.backward(&enc.trunk, &dtrunk_out)?;

        Ok(ElboOutput {
            loss: recon + kl,
            reconstruction: recon,
            kl,
            grads: VaeGrads {
                encoder_trunk: d_trunk,
                mean_head: d_mean,
                logvar_head: d_std,
                decoder: d_decoder,
            },
        })
    }
}

fn check_unit_interval(x: &Matrix) -> Result<(), VaeError> {
    for r in 0..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(VaeError::OutOfRange { row: r, col: c, value: v });
            }
        }
    }
    Ok(())
}

/// Binary cross-entropy of target `t` under Bernoulli(sigmoid(logit)).
#[inline]
pub fn bce_with_logits(logit: f64, t: f64) -> f64 {
    logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p()
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(g: &LatentGaussian, eps: &[f64]) -> Result<Vec<f64>, VaeError> {
    if eps.len() != g.mu.len() {
        return Err(VaeError::NoiseShape {
            expected: (1, g.mu.len()),
            found: (1, eps.len()),
        });
    }
    Ok(g.mu
        .iter()
        .zip(&g.sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn kl_diag_gaussian(g: &LatentGaussian) -> f64 {
    0.5 * g
        .mu
        .iter()
        .zip(&g.sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - 2.0 * s.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_arch() -> VaeArchitecture {
        VaeArchitecture {
            data_dim: 6,
            hidden: vec![5, 4],
            latent_dim: 2,
        }
    }

    fn zero_heads(model: &mut VaeModel) {
        model.mean_head.params_mut().fill(0.0);
        model.logvar_head.params_mut().fill(0.0);
    }

    #[test]
    fn architecture_shapes() {
        let a = VaeArchitecture {
            data_dim: 2304,
            hidden: vec![128, 128],
            latent_dim: 2,
        };
        let dec = a.decoder();
        assert_eq!(dec.len(), 3);
        assert_eq!(dec[0].input_dim, 2);
        assert_eq!(dec[2].output_dim, 2304);
        assert_eq!(dec[2].activation, Activation::Sigmoid);
        assert_eq!(a.mean_head()[0].input_dim, 128);
        let m = VaeModel::new(&a, &mut Rng::new(0)).unwrap();
        assert_eq!(m.latent_dim(), 2);
        assert_eq!(m.data_dim(), 2304);
    }

    #[test]
    fn encode_examples() {
        let mut rng = Rng::new(1);
        let mut model = VaeModel::new(&toy_arch(), &mut rng).unwrap();
        let x = Matrix::from_rows(&[
            [0.0, 1.0, 0.5, 0.2, 0.9, 0.1],
            [0.0, 1.0, 0.5, 0.2, 0.9, 0.1],
            [1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        ]);
        let post = model.encode(&x).unwrap();
        assert!(post.sigma.as_slice().iter().all(|&s| s > 0.0));
        assert_eq!(post.get(0), post.get(1));

        zero_heads(&mut model);
        let post = model.encode(&x).unwrap();
        assert!(post.mu.as_slice().iter().all(|&m| m == 0.0));
        assert!(post
            .sigma
            .as_slice()
            .iter()
            .all(|&s| (s - 2f64.ln()).abs() < 1e-15));

        assert!(matches!(
            model.encode(&Matrix::zeros(1, 5)),
            Err(VaeError::Nn(NnError::InputShape { .. }))
        ));
    }

    #[test]
    fn reparameterize_examples() {
        let g = LatentGaussian {
            mu: vec![0.5, -1.0],
            sigma: vec![2.0, 0.1],
        };
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), g.mu);
        let unit = LatentGaussian {
            mu: vec![0.0, 0.0],
            sigma: vec![1.0, 1.0],
        };
        assert_eq!(reparameterize(&unit, &[0.3, -0.4]).unwrap(), vec![0.3, -0.4]);
        assert!(reparameterize(&g, &[0.0]).is_err());
    }

    #[test]
    fn reparameterized_mean_converges() {
        let g = LatentGaussian {
            mu: vec![1.5, -0.25],
            sigma: vec![0.8, 2.0],
        };
        let n = 100_000;
        let mut rng = Rng::new(31);
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let eps = [rng.standard_normal(), rng.standard_normal()];
            let z = reparameterize(&g, &eps).unwrap();
            acc[0] += z[0];
            acc[1] += z[1];
        }
        for j in 0..2 {
            let mean = acc[j] / n as f64;
            assert!((mean - g.mu[j]).abs() < 3.0 * g.sigma[j] / (n as f64).sqrt());
        }
    }

    #[test]
    fn decode_examples() {
        let mut rng = Rng::new(2);
        let mut model = VaeModel::new(&toy_arch(), &mut rng).unwrap();
        let z = Matrix::from_rows(&[[30.0, -40.0], [30.0, -40.0], [0.1, 0.2]]);
        let d = model.decode(&z).unwrap();
        assert!(d.probs.as_slice().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(d.probs.row(0), d.probs.row(1));
        model.decoder.params_mut().fill(0.0);
        let d = model.decode(&z).unwrap();
        assert!(d.probs.as_slice().iter().all(|&p| p == 0.5));
        assert!(matches!(
            model.decode(&Matrix::zeros(1, 3)),
            Err(VaeError::LatentShape { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let prior = LatentGaussian {
            mu: vec![0.0; 3],
            sigma: vec![1.0; 3],
        };
        assert_eq!(kl_diag_gaussian(&prior), 0.0);
        let shifted = LatentGaussian {
            mu: vec![1.0],
            sigma: vec![1.0],
        };
        assert!((kl_diag_gaussian(&shifted) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[ln q(z) − ln p(z)] with z ~ q; the normalizers cancel.
        let g = LatentGaussian {
            mu: vec![0.7, -1.2, 0.1],
            sigma: vec![0.5, 1.6, 0.9],
        };
        let mut rng = Rng::new(99);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut term = 0.0;
            for j in 0..3 {
                let e = rng.standard_normal();
                let z = g.mu[j] + g.sigma[j] * e;
                term += -0.5 * e * e - g.sigma[j].ln() + 0.5 * z * z;
            }
            acc += term;
        }
        let mc = acc / n as f64;
        assert!((mc - kl_diag_gaussian(&g)).abs() < 1e-2);
    }

    #[test]
    fn elbo_at_half_probability() {
        let mut rng = Rng::new(3);
        let mut model = VaeModel::new(&toy_arch(), &mut rng).unwrap();
        model.decoder.params_mut().fill(0.0);
        let x = Matrix::from_vec(4, 6, vec![0.5; 24]).unwrap();
        let out = model.elbo_loss(&x, &mut rng).unwrap();
        assert!((out.reconstruction - 6.0 * 2f64.ln()).abs() < 1e-12);
        let post = model.encode(&x).unwrap();
        let kl = (0..4).map(|i| kl_diag_gaussian(&post.get(i))).sum::<f64>() / 4.0;
        assert_eq!(out.kl, kl);
        assert!((out.loss - out.reconstruction - out.kl).abs() < 1e-15);
    }

    #[test]
    fn elbo_rejects_out_of_range_input() {
        let mut rng = Rng::new(3);
        let model = VaeModel::new(&toy_arch(), &mut rng).unwrap();
        let mut x = Matrix::zeros(2, 6);
        x.set(1, 4, 1.5);
        assert!(matches!(
            model.elbo_loss(&x, &mut rng),
            Err(VaeError::OutOfRange { row: 1, col: 4, .. })
        ));
    }

    #[test]
    fn bce_is_stable_for_saturated_logits() {
        assert!(bce_with_logits(800.0, 1.0).abs() < 1e-300);
        assert!((bce_with_logits(800.0, 0.0) - 800.0).abs() < 1e-9);
        assert!((bce_with_logits(-800.0, 1.0) - 800.0).abs() < 1e-9);
        assert!((bce_with_logits(0.0, 0.3) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let mut rng = Rng::new(17);
        let mut model = VaeModel::new(&toy_arch(), &mut rng).unwrap();
        for net in [
            &mut model.encoder_trunk,
            &mut model.mean_head,
            &mut model.logvar_head,
            &mut model.decoder,
        ] {
            for p in net.params_mut() {
                *p += 0.1 * rng.standard_normal();
            }
        }
        let x = Matrix::from_vec(3, 6, (0..18).map(|_| rng.uniform()).collect()).unwrap();
        let eps = Matrix::from_vec(3, 2, (0..6).map(|_| rng.standard_normal()).collect()).unwrap();
        let base = model.elbo_loss_with_eps(&x, &eps).unwrap();
        let again = model.elbo_loss_with_eps(&x, &eps).unwrap();
        assert_eq!(base.loss, again.loss);

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let nets: [(&str, &Vec<f64>); 4] = [
            ("trunk", &base.grads.encoder_trunk),
            ("mean", &base.grads.mean_head),
            ("std", &base.grads.logvar_head),
            ("decoder", &base.grads.decoder),
        ];
        for (k, (name, grads)) in nets.iter().enumerate() {
            for i in 0..grads.len() {
                let mut probe = model.clone();
                let p = match k {
                    0 => probe.encoder_trunk.params_mut(),
                    1 => probe.mean_head.params_mut(),
                    2 => probe.logvar_head.params_mut(),
                    _ => probe.decoder.params_mut(),
                };
                let orig = p[i];
                p[i] = orig + h;
                let fp = probe.elbo_loss_with_eps(&x, &eps).unwrap().loss;
                let p = match k {
                    0 => probe.encoder_trunk.params_mut(),
                    1 => probe.mean_head.params_mut(),
                    2 => probe.logvar_head.params_mut(),
                    _ => probe.decoder.params_mut(),
                };
                p[i] = orig - h;
                let fm = probe.elbo_loss_with_eps(&x, &eps).unwrap().loss;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    rel(grads[i], fd) <= 1e-4,
                    "{name}[{i}]: {} vs {}",
                    grads[i],
                    fd
                );
            }
        }
    }
}

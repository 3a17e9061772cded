//! Fully connected networks with hand-written reverse mode, plus Adam.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{gemm, Matrix, View};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("network spec has no layers")]
    EmptySpec,
    #[error("layer {layer} has a zero dimension")]
    ZeroDim { layer: usize },
    #[error("layer {layer} expects input dim {expected} but the previous layer outputs {found}")]
    BrokenChain {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("input has {found} columns, network expects {expected}")]
    InputShape { expected: usize, found: usize },
    #[error("output gradient is {found:?}, expected {expected:?}")]
    GradShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("trace does not come from this network")]
    TraceMismatch,
    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    Sigmoid,
    Identity,
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Softplus => sigmoid(pre),
            Activation::Sigmoid => post * (1.0 - post),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// Checks that every layer is non-empty and feeds the next.
pub fn validate_spec(spec: &[LayerSpec]) -> Result<(), NnError> {
    if spec.is_empty() {
        return Err(NnError::EmptySpec);
    }
    for (i, l) in spec.iter().enumerate() {
        if l.input_dim == 0 || l.output_dim == 0 {
            return Err(NnError::ZeroDim { layer: i });
        }
        if i > 0 && spec[i - 1].output_dim != l.input_dim {
            return Err(NnError::BrokenChain {
                layer: i,
                expected: l.input_dim,
                found: spec[i - 1].output_dim,
            });
        }
    }
    Ok(())
}

/// A multilayer perceptron with a single flat parameter vector.
///
/// Layer `l` occupies a contiguous block: its weight matrix, stored row-major as
/// `input_dim x output_dim` (so a batch maps as `x·W + b`), followed by its
/// `output_dim` biases. Blocks appear in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Activations cached by [`MlpModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.post.last().expect("trace has at least one layer")
    }

    /// Pre-activation values of the final layer.
    pub fn output_pre_activation(&self) -> &Matrix {
        self.pre.last().expect("trace has at least one layer")
    }

    pub fn into_output(mut self) -> Matrix {
        self.post.pop().expect("trace has at least one layer")
    }
}

fn offsets_for(layers: &[LayerSpec]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(layers.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for l in layers {
        acc += l.param_count();
        offsets.push(acc);
    }
    offsets
}

/// Builds a network with weights drawn uniformly from `±sqrt(3 / input_dim)`
/// (variance `1 / input_dim`) and zero biases.
pub fn init_mlp(spec: &[LayerSpec], rng: &mut Rng) -> Result<MlpModel, NnError> {
    validate_spec(spec)?;
    let offsets = offsets_for(spec);
    let mut params = vec![0.0; offsets[spec.len()]];
    for (l, layer) in spec.iter().enumerate() {
        let bound = (3.0 / layer.input_dim as f64).sqrt();
        let w = &mut params[offsets[l]..offsets[l] + layer.input_dim * layer.output_dim];
        for v in w {
            *v = rng.uniform_range(-bound, bound);
        }
    }
    Ok(MlpModel {
        layers: spec.to_vec(),
        params,
        offsets,
    })
}

impl MlpModel {
    pub fn from_params(spec: &[LayerSpec], params: Vec<f64>) -> Result<Self, NnError> {
        validate_spec(spec)?;
        let offsets = offsets_for(spec);
        if params.len() != offsets[spec.len()] {
            return Err(NnError::LengthMismatch {
                expected: offsets[spec.len()],
                found: params.len(),
            });
        }
        Ok(Self {
            layers: spec.to_vec(),
            params,
            offsets,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    fn weights(&self, l: usize) -> &[f64] {
        let spec = &self.layers[l];
        &self.params[self.offsets[l]..self.offsets[l] + spec.input_dim * spec.output_dim]
    }

    fn bias(&self, l: usize) -> &[f64] {
        let spec = &self.layers[l];
        let start = self.offsets[l] + spec.input_dim * spec.output_dim;
        &self.params[start..start + spec.output_dim]
    }

    /// Weight matrix of layer `l`, for inspection.
    pub fn layer_weights(&self, l: usize) -> Matrix {
        let s = &self.layers[l];
        Matrix::from_vec(s.input_dim, s.output_dim, self.weights(l).to_vec())
            .expect("weight block has layer shape")
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Trace), NnError> {
        let trace = self.forward_trace(x)?;
        Ok((trace.output().clone(), trace))
    }

    /// Forward pass keeping every intermediate activation.
    pub fn forward_trace(&self, x: &Matrix) -> Result<Trace, NnError> {
        if x.cols() != self.input_dim() {
            return Err(NnError::InputShape {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        let batch = x.rows();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (l, spec) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &post[l - 1] };
            let mut z = Matrix::zeros(batch, spec.output_dim);
            let w = View::row_major(self.weights(l), spec.input_dim, spec.output_dim);
            gemm(1.0, View::of(input), w, 0.0, z.as_mut_slice());
            let b = self.bias(l);
            for r in 0..batch {
                for (v, bi) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bi;
                }
            }
            let a = if spec.activation == Activation::Identity {
                z.clone()
            } else {
                z.map(|v| spec.activation.apply(v))
            };
            pre.push(z);
            post.push(a);
        }
        Ok(Trace {
            input: x.clone(),
            pre,
            post,
        })
    }

    /// Forward pass returning only the output.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix, NnError> {
        Ok(self.forward_trace(x)?.into_output())
    }

    fn check_trace(&self, trace: &Trace) -> Result<(), NnError> {
        if trace.pre.len() != self.layers.len()
            || trace.input.cols() != self.input_dim()
            || trace
                .pre
                .iter()
                .zip(&self.layers)
                .any(|(p, s)| p.cols() != s.output_dim || p.rows() != trace.input.rows())
        {
            return Err(NnError::TraceMismatch);
        }
        Ok(())
    }

    /// Gradients of a scalar whose gradient with respect to the network output
    /// is `dy`. Returns `(d params, d input)`.
    pub fn backward(&self, trace: &Trace, dy: &Matrix) -> Result<(Vec<f64>, Matrix), NnError> {
        self.check_trace(trace)?;
        let last = self.layers.len() - 1;
        let out = &trace.post[last];
        if dy.shape() != out.shape() {
            return Err(NnError::GradShape {
                expected: out.shape(),
                found: dy.shape(),
            });
        }
        let act = self.layers[last].activation;
        let mut delta = dy.clone();
        if act != Activation::Identity {
            let pre = trace.pre[last].as_slice();
            let post = out.as_slice();
            for (i, d) in delta.as_mut_slice().iter_mut().enumerate() {
                *d *= act.derivative(pre[i], post[i]);
            }
        }
        self.backprop(trace, delta)
    }

    /// Like [`backward`](Self::backward) but `dpre` is the gradient with respect
    /// to the final layer's pre-activation (e.g. logits feeding a fused loss).
    pub fn backward_from_pre(
        &self,
        trace: &Trace,
        dpre: &Matrix,
    ) -> Result<(Vec<f64>, Matrix), NnError> {
        self.check_trace(trace)?;
        let expected = trace.pre[self.layers.len() - 1].shape();
        if dpre.shape() != expected {
            return Err(NnError::GradShape {
                expected,
                found: dpre.shape(),
            });
        }
        self.backprop(trace, dpre.clone())
    }

    fn backprop(&self, trace: &Trace, mut delta: Matrix) -> Result<(Vec<f64>, Matrix), NnError> {
        let mut grads = vec![0.0; self.params.len()];
        let batch = trace.input.rows();
        for l in (0..self.layers.len()).rev() {
            let spec = self.layers[l];
            let input = if l == 0 {
                &trace.input
            } else {
                &trace.post[l - 1]
            };
            let w_off = self.offsets[l];
            let w_len = spec.input_dim * spec.output_dim;
            gemm(
                1.0,
                View::of(input).t(),
                View::of(&delta),
                0.0,
                &mut grads[w_off..w_off + w_len],
            );
            let db = &mut grads[w_off + w_len..w_off + w_len + spec.output_dim];
            for r in 0..batch {
                for (g, d) in db.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            let mut dx = Matrix::zeros(batch, spec.input_dim);
            let w = View::row_major(self.weights(l), spec.input_dim, spec.output_dim);
            gemm(1.0, View::of(&delta), w.t(), 0.0, dx.as_mut_slice());
            if l == 0 {
                return Ok((grads, dx));
            }
            let prev = self.layers[l - 1].activation;
            if prev != Activation::Identity {
                let pre = trace.pre[l - 1].as_slice();
                let post = trace.post[l - 1].as_slice();
                for (i, d) in dx.as_mut_slice().iter_mut().enumerate() {
                    *d *= prev.derivative(pre[i], post[i]);
                }
            }
            delta = dx;
        }
        unreachable!("validated spec has at least one layer")
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn from_parts(step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<Self, NnError> {
        if m.len() != v.len() {
            return Err(NnError::LengthMismatch {
                expected: m.len(),
                found: v.len(),
            });
        }
        Ok(Self {
            step,
            m,
            v,
            ..Self::new(0)
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NnError> {
        self.step_segments(&mut [params], &[grads], lr)
    }

    /// One update over several parameter blocks treated as a single
    /// concatenated vector (moments are laid out in the same order).
    pub fn step_segments(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<(), NnError> {
        let p_len: usize = params.iter().map(|p| p.len()).sum();
        let g_len: usize = grads.iter().map(|g| g.len()).sum();
        if p_len != self.m.len() {
            return Err(NnError::LengthMismatch {
                expected: self.m.len(),
                found: p_len,
            });
        }
        if g_len != self.m.len() || grads.len() != params.len() {
            return Err(NnError::LengthMismatch {
                expected: self.m.len(),
                found: g_len,
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(NnError::LengthMismatch {
                    expected: p.len(),
                    found: g.len(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let n = p.len();
            let m = &mut self.m[offset..offset + n];
            let v = &mut self.v[offset..offset + n];
            for i in 0..n {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += n;
        }
        Ok(())
    }
}

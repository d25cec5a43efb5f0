//! Small fully-connected networks with hand-written reverse-mode gradients.
//!
//! Batched calls use a features × batch layout: every column is one sample.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: &mut DMatrix<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.apply(|v| *v = v.max(0.0)),
            Activation::Sigmoid => z.apply(|v| *v = sigmoid(*v)),
        }
    }

    /// Multiply `g` in place by the derivative, given the activated output `a`.
    fn backprop(self, a: &DMatrix<f64>, g: &mut DMatrix<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => g.zip_apply(a, |gi, ai| {
                if ai <= 0.0 {
                    *gi = 0.0
                }
            }),
            Activation::Sigmoid => g.zip_apply(a, |gi, ai| *gi *= ai * (1.0 - ai)),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine map followed by an activation. `w` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    fn affine(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = DMatrix::from_fn(self.w.nrows(), a.ncols(), |r, _| self.b[r]);
        z.gemm(1.0, &self.w, a, 1.0);
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

/// Per-layer parameter gradients, shaped like the owning [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dw: Vec<DMatrix<f64>>,
    pub db: Vec<DVector<f64>>,
}

/// Layer outputs recorded by [`MlpParams::forward_trace`]; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<DMatrix<f64>>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("trace holds the input")
    }
}

impl MlpParams {
    /// He-uniform initialization. `widths = [in, h1, …, out]`; hidden layers use
    /// `hidden`, the last layer is linear.
    pub fn new(widths: &[usize], hidden: Activation, rng: &mut RngStream) -> Result<Self> {
        Self::check_widths(widths)?;
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let w = DMatrix::from_fn(fan_out, fan_in, |_, _| limit * (2.0 * rng.uniform() - 1.0));
                Dense {
                    w,
                    b: DVector::zeros(fan_out),
                    activation: if l + 1 == n { Activation::Identity } else { hidden },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize], hidden: Activation) -> Result<Self> {
        Self::check_widths(widths)?;
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| Dense {
                w: DMatrix::zeros(widths[l + 1], widths[l]),
                b: DVector::zeros(widths[l + 1]),
                activation: if l + 1 == n { Activation::Identity } else { hidden },
            })
            .collect();
        Ok(Self { layers })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Domain(format!("invalid layer widths {widths:?}")));
        }
        Ok(())
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Domain("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::Dimension {
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        for l in &layers {
            if l.b.len() != l.output_dim() {
                return Err(Error::Dimension {
                    expected: l.output_dim(),
                    got: l.b.len(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Set the last layer's weights and bias to zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.w.fill(0.0);
        last.b.fill(0.0);
    }

    pub fn forward(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input.as_slice());
        let out = self.forward_batch(&x)?;
        Ok(out.column(0).into_owned())
    }

    pub fn forward_batch(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(input)?;
        let mut a = input.clone();
        for layer in &self.layers {
            let mut z = layer.affine(&a);
            layer.activation.apply(&mut z);
            a = z;
        }
        Ok(a)
    }

    pub fn forward_trace(&self, input: &DMatrix<f64>) -> Result<Trace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let mut z = layer.affine(activations.last().unwrap());
            layer.activation.apply(&mut z);
            activations.push(z);
        }
        Ok(Trace { activations })
    }

    fn check_input(&self, input: &DMatrix<f64>) -> Result<()> {
        if input.nrows() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: input.nrows(),
            });
        }
        Ok(())
    }

    /// Gradient of `⟨upstream, forward(input)⟩` with respect to the parameters.
    pub fn backward(&self, input: &DVector<f64>, upstream: &DVector<f64>) -> Result<Gradients> {
        let x = DMatrix::from_column_slice(input.len(), 1, input.as_slice());
        let g = DMatrix::from_column_slice(upstream.len(), 1, upstream.as_slice());
        let trace = self.forward_trace(&x)?;
        Ok(self.backward_batch(&trace, g)?.0)
    }

    /// Reverse pass over a recorded trace. `upstream` is `∂L/∂output` with one
    /// column per sample; parameter gradients are summed over the batch.
    /// Also returns `∂L/∂input`.
    pub fn backward_batch(
        &self,
        trace: &Trace,
        upstream: DMatrix<f64>,
    ) -> Result<(Gradients, DMatrix<f64>)> {
        let out = trace.output();
        if upstream.shape() != out.shape() {
            return Err(Error::Dimension {
                expected: out.len(),
                got: upstream.len(),
            });
        }
        let n = self.layers.len();
        let mut dw = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        let mut g = upstream;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&trace.activations[l + 1], &mut g);
            let a_in = &trace.activations[l];
            let mut w_grad = DMatrix::zeros(layer.output_dim(), layer.input_dim());
            w_grad.gemm(1.0, &g, &a_in.transpose(), 0.0);
            let b_grad = g.column_sum();
            let mut g_in = DMatrix::zeros(layer.input_dim(), g.ncols());
            g_in.gemm(1.0, &layer.w.transpose(), &g, 0.0);
            dw.push(w_grad);
            db.push(b_grad);
            g = g_in;
        }
        dw.reverse();
        db.reverse();
        Ok((Gradients { dw, db }, g))
    }

    /// Parameters flattened layer by layer, weights column-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> MlpCheckpoint {
        MlpCheckpoint {
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.output_dim(),
                    cols: l.input_dim(),
                    activation: l.activation,
                    weights: l.w.transpose().as_slice().to_vec(),
                    bias: l.b.as_slice().to_vec(),
                })
                .collect(),
            seed,
            step,
        }
    }

    pub fn from_checkpoint(ckpt: &MlpCheckpoint) -> Result<Self> {
        let layers = ckpt
            .layers
            .iter()
            .map(|r| {
                if r.weights.len() != r.rows * r.cols || r.bias.len() != r.rows {
                    return Err(Error::Dimension {
                        expected: r.rows * r.cols + r.rows,
                        got: r.weights.len() + r.bias.len(),
                    });
                }
                Ok(Dense {
                    w: DMatrix::from_row_slice(r.rows, r.cols, &r.weights),
                    b: DVector::from_column_slice(&r.bias),
                    activation: r.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            dw: params
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            db: params.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.dw
            .iter()
            .zip(&self.db)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    /// Same ordering as [`MlpParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn dot(&self, other: &Gradients) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        for (w, b) in self.dw.iter_mut().zip(&mut self.db) {
            *w *= k;
            *b *= k;
        }
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, k: f64, other: &Gradients) {
        for l in 0..self.dw.len() {
            self.dw[l].zip_apply(&other.dw[l], |a, b| *a += k * b);
            self.db[l].axpy(k, &other.db[l], 1.0);
        }
    }

    fn matches(&self, params: &MlpParams) -> bool {
        self.dw.len() == params.layers.len()
            && params
                .layers
                .iter()
                .enumerate()
                .all(|(l, p)| self.dw[l].shape() == p.w.shape() && self.db[l].len() == p.b.len())
    }
}

/// `(sin 2π2ᵏs, cos 2π2ᵏs)` for `k = 0..pairs`.
pub fn time_encoding(s: f64, pairs: usize) -> DVector<f64> {
    let mut out = DVector::zeros(2 * pairs);
    time_encoding_into(s, out.as_mut_slice());
    out
}

/// Write the encoding into `out`, whose length must be even.
pub fn time_encoding_into(s: f64, out: &mut [f64]) {
    let mut freq = 2.0 * std::f64::consts::PI;
    for pair in out.chunks_exact_mut(2) {
        let (sin, cos) = (freq * s).sin_cos();
        pair[0] = sin;
        pair[1] = cos;
        freq *= 2.0;
    }
}

/// Binary cross-entropy on a logit and its derivative `σ(logit) − y`.
pub fn bce_loss(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}

fn check_step(params: &MlpParams, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    if !grads.matches(params) {
        return Err(Error::Dimension {
            expected: params.num_params(),
            got: grads.values().count(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::Divergence { t: f64::NAN });
    }
    Ok(())
}

pub fn sgd_step(params: &mut MlpParams, grads: &Gradients, lr: f64) -> Result<()> {
    check_step(params, grads, lr)?;
    for (l, layer) in params.layers.iter_mut().enumerate() {
        layer.w.zip_apply(&grads.dw[l], |p, g| *p -= lr * g);
        layer.b.axpy(-lr, &grads.db[l], 1.0);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }
}

pub fn adam_step(
    params: &mut MlpParams,
    grads: &Gradients,
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    check_step(params, grads, lr)?;
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    };
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let (m, v) = (&mut state.m, &mut state.v);
        for (((p, g), mi), vi) in layer
            .w
            .iter_mut()
            .zip(grads.dw[l].iter())
            .zip(m.dw[l].iter_mut())
            .zip(v.dw[l].iter_mut())
        {
            update(p, *g, mi, vi);
        }
        for (((p, g), mi), vi) in layer
            .b
            .iter_mut()
            .zip(grads.db[l].iter())
            .zip(m.db[l].iter_mut())
            .zip(v.db[l].iter_mut())
        {
            update(p, *g, mi, vi);
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence { t: f64::NAN });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub activation: Activation,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub layers: Vec<LayerRecord>,
    pub seed: u64,
    pub step: u64,
}

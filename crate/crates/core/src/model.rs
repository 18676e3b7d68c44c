//! Small classifiers with closed-form gradients.
//!
//! Weight layout is row-major per layer with the bias stored after each
//! row's input weights:
//!
//! * softmax regression: `num_classes` rows of `input_dim + 1`;
//! * one-hidden-layer MLP (ReLU): `hidden_dim` rows of `input_dim + 1`,
//!   followed by `num_classes` rows of `hidden_dim + 1`.
//!
//! The risk is mean softmax cross-entropy, evaluated with max-subtracted
//! log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Ignored for softmax regression.
    pub hidden_dim: usize,
}

impl ModelSpec {
    pub fn softmax(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            num_classes,
            hidden_dim: 0,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1,
            input_dim,
            num_classes,
            hidden_dim,
        }
    }

    /// Weight dimension `d`.
    pub fn dim(&self) -> usize {
        match self.kind {
            ModelKind::SoftmaxRegression => (self.input_dim + 1) * self.num_classes,
            ModelKind::Mlp1 => {
                (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.num_classes
            }
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_weights(&self, rng: &mut Rng) -> WeightVector {
        let mut w = WeightVector::zeros(self.dim());
        let mut fill = |w: &mut WeightVector, offset: usize, rows: usize, fan_in: usize| {
            let a = (6.0 / (fan_in + rows) as f64).sqrt();
            for r in 0..rows {
                for j in 0..fan_in {
                    w[offset + r * (fan_in + 1) + j] = rng.uniform_range(-a, a);
                }
            }
        };
        match self.kind {
            ModelKind::SoftmaxRegression => fill(&mut w, 0, self.num_classes, self.input_dim),
            ModelKind::Mlp1 => {
                fill(&mut w, 0, self.hidden_dim, self.input_dim);
                let off = self.hidden_dim * (self.input_dim + 1);
                fill(&mut w, off, self.num_classes, self.hidden_dim);
            }
        }
        w
    }

    fn check(&self, w: &[f64], batch: &Batch) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: w.len(),
            });
        }
        if batch.input_dim != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: batch.input_dim,
            });
        }
        if let Some(&class) = batch.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidClass {
                class,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }
}

/// Row-major inputs with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * input_dim,
                got: inputs.len(),
            });
        }
        Ok(Self {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn empty(input_dim: usize) -> Self {
        Self {
            inputs: Vec::new(),
            labels: Vec::new(),
            input_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copy of the listed examples, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            labels,
            input_dim: self.input_dim,
        }
    }

    pub fn extend(&mut self, other: &Batch) {
        debug_assert_eq!(self.input_dim, other.input_dim);
        self.inputs.extend_from_slice(&other.inputs);
        self.labels.extend_from_slice(&other.labels);
    }
}

/// Affine layer: `out[r] = W[r, :] . x + b[r]`.
fn affine(w: &[f64], x: &[f64], rows: usize, out: &mut [f64]) {
    let stride = x.len() + 1;
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * stride..(r + 1) * stride];
        *o = row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()];
    }
}

struct Forward {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn forward(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Forward {
    let mut logits = vec![0.0; spec.num_classes];
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            affine(w, x, spec.num_classes, &mut logits);
            Forward {
                hidden: Vec::new(),
                logits,
            }
        }
        ModelKind::Mlp1 => {
            let mut hidden = vec![0.0; spec.hidden_dim];
            affine(w, x, spec.hidden_dim, &mut hidden);
            hidden.iter_mut().for_each(|h| *h = h.max(0.0));
            let off = spec.hidden_dim * (spec.input_dim + 1);
            affine(&w[off..], &hidden, spec.num_classes, &mut logits);
            Forward { hidden, logits }
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Logits for every example, concatenated.
pub fn logits(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<Vec<f64>> {
    spec.check(w, batch)?;
    Ok((0..batch.len())
        .flat_map(|i| forward(spec, w, batch.row(i)).logits)
        .collect())
}

/// Mean cross-entropy over the batch.
pub fn risk(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<f64> {
    spec.check(w, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let total: f64 = (0..batch.len())
        .map(|i| {
            let f = forward(spec, w, batch.row(i));
            (log_sum_exp(&f.logits) - f.logits[batch.labels[i]]).max(0.0)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`risk`]. ReLU's subgradient at zero is zero.
pub fn grad(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<WeightVector> {
    spec.check(w, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let mut g = WeightVector::zeros(w.len());
    let c = spec.num_classes;
    for i in 0..batch.len() {
        let x = batch.row(i);
        let f = forward(spec, w, x);
        let lse = log_sum_exp(&f.logits);
        let dz: Vec<f64> = f
            .logits
            .iter()
            .enumerate()
            .map(|(k, z)| (z - lse).exp() - if k == batch.labels[i] { 1.0 } else { 0.0 })
            .collect();
        match spec.kind {
            ModelKind::SoftmaxRegression => accumulate_outer(&mut g, 0, &dz, x),
            ModelKind::Mlp1 => {
                let h = spec.hidden_dim;
                let off = h * (spec.input_dim + 1);
                accumulate_outer(&mut g, off, &dz, &f.hidden);
                let mut dpre = vec![0.0; h];
                for (j, d) in dpre.iter_mut().enumerate() {
                    if f.hidden[j] > 0.0 {
                        *d = (0..c).map(|k| dz[k] * w[off + k * (h + 1) + j]).sum();
                    }
                }
                accumulate_outer(&mut g, 0, &dpre, x);
            }
        }
    }
    g.scale_in_place(1.0 / batch.len() as f64);
    Ok(g)
}

/// `g[offset + r*(n+1) + j] += delta[r] * x[j]`, bias column gets `delta[r]`.
fn accumulate_outer(g: &mut [f64], offset: usize, delta: &[f64], x: &[f64]) {
    let stride = x.len() + 1;
    for (r, d) in delta.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        let row = &mut g[offset + r * stride..offset + (r + 1) * stride];
        for (gj, xj) in row[..x.len()].iter_mut().zip(x) {
            *gj += d * xj;
        }
        row[x.len()] += d;
    }
}

/// Index of the largest logit; ties resolve to the lowest class index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = k;
        }
    }
    best
}

pub fn predict(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<Vec<usize>> {
    spec.check(w, batch)?;
    Ok((0..batch.len())
        .map(|i| argmax(&forward(spec, w, batch.row(i)).logits))
        .collect())
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn accuracy(spec: &ModelSpec, w: &[f64], dataset: &Batch) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let preds = predict(spec, w, dataset)?;
    let correct = preds
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

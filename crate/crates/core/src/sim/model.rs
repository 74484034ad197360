//! Differentiable classifiers over flat parameter vectors, trained with
//! mean cross-entropy.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::data::Dataset;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Multiclass logistic regression, parameters `[W (C x p), b (C)]`.
    #[default]
    Softmax,
    /// One tanh hidden layer, parameters `[W1 (h x p), b1 (h), W2 (C x h), b2 (C)]`.
    Mlp { hidden: usize },
}

/// A model architecture bound to an input width and a class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub features: usize,
    pub classes: usize,
}

fn log_softmax_grad(z: &mut [f64], y: usize) -> f64 {
    let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = z.iter().map(|v| (v - top).exp()).sum();
    let lse = top + total.ln();
    let loss = lse - z[y];
    for v in z.iter_mut() {
        *v = (*v - lse).exp();
    }
    z[y] -= 1.0;
    loss
}

impl Model {
    pub fn new(spec: ModelSpec, features: usize, classes: usize) -> Result<Self> {
        if features == 0 || classes < 2 {
            return Err(Error::InvalidParameter("model needs features >= 1 and classes >= 2".into()));
        }
        if let ModelSpec::Mlp { hidden: 0 } = spec {
            return Err(Error::InvalidParameter("hidden layer width must be positive".into()));
        }
        Ok(Self { spec, features, classes })
    }

    pub fn param_count(&self) -> usize {
        let (p, c) = (self.features, self.classes);
        match self.spec {
            ModelSpec::Softmax => c * p + c,
            ModelSpec::Mlp { hidden: h } => h * p + h + c * h + c,
        }
    }

    /// Softmax starts at zero; the hidden layer gets scaled Gaussian weights.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut theta = vec![0.0; self.param_count()];
        if let ModelSpec::Mlp { hidden: h } = self.spec {
            let p = self.features;
            let s1 = 1.0 / (p as f64).sqrt();
            for w in &mut theta[..h * p] {
                *w = s1 * rng.sample::<f64, _>(StandardNormal);
            }
            let off = h * p + h;
            let s2 = 1.0 / (h as f64).sqrt();
            for w in &mut theta[off..off + self.classes * h] {
                *w = s2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        theta
    }

    fn check(&self, theta: &[f64], ds: &Dataset) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                found: theta.len(),
            });
        }
        if let Some(x) = ds.features.first() {
            if x.len() != self.features {
                return Err(Error::DimensionMismatch {
                    expected: self.features,
                    found: x.len(),
                });
            }
        }
        Ok(())
    }

    /// Logits for one input; also returns hidden activations for the MLP.
    fn forward(&self, theta: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (p, c) = (self.features, self.classes);
        match self.spec {
            ModelSpec::Softmax => {
                let (w, b) = theta.split_at(c * p);
                let z = (0..c)
                    .map(|k| b[k] + w[k * p..(k + 1) * p].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                    .collect();
                (z, Vec::new())
            }
            ModelSpec::Mlp { hidden: h } => {
                let (w1, rest) = theta.split_at(h * p);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let a: Vec<f64> = (0..h)
                    .map(|j| (b1[j] + w1[j * p..(j + 1) * p].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).tanh())
                    .collect();
                let z = (0..c)
                    .map(|k| b2[k] + w2[k * h..(k + 1) * h].iter().zip(&a).map(|(w, v)| w * v).sum::<f64>())
                    .collect();
                (z, a)
            }
        }
    }

    /// Adds `scale` times the cross-entropy gradient at sample `(x, y)` to
    /// `grad` and returns the sample loss.
    fn accumulate(&self, theta: &[f64], x: &[f64], y: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let (p, c) = (self.features, self.classes);
        let (mut z, a) = self.forward(theta, x);
        let loss = log_softmax_grad(&mut z, y);
        match self.spec {
            ModelSpec::Softmax => {
                let (gw, gb) = grad.split_at_mut(c * p);
                for k in 0..c {
                    let dz = scale * z[k];
                    gb[k] += dz;
                    for (g, v) in gw[k * p..(k + 1) * p].iter_mut().zip(x) {
                        *g += dz * v;
                    }
                }
            }
            ModelSpec::Mlp { hidden: h } => {
                let w2 = &theta[h * p + h..h * p + h + c * h];
                let (gw1, rest) = grad.split_at_mut(h * p);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                let mut da = vec![0.0; h];
                for k in 0..c {
                    let dz = scale * z[k];
                    gb2[k] += dz;
                    for j in 0..h {
                        gw2[k * h + j] += dz * a[j];
                        da[j] += dz * w2[k * h + j];
                    }
                }
                for j in 0..h {
                    let d = da[j] * (1.0 - a[j] * a[j]);
                    gb1[j] += d;
                    for (g, v) in gw1[j * p..(j + 1) * p].iter_mut().zip(x) {
                        *g += d * v;
                    }
                }
            }
        }
        loss
    }

    /// Mean loss and gradient over the samples at `indices` (repeats count
    /// with multiplicity).
    pub fn loss_and_grad(&self, theta: &[f64], ds: &Dataset, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check(theta, ds)?;
        if indices.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut grad = vec![0.0; theta.len()];
        let scale = 1.0 / indices.len() as f64;
        let mut loss = 0.0;
        for &i in indices {
            loss += self.accumulate(theta, &ds.features[i], ds.labels[i], scale, &mut grad);
        }
        Ok((loss * scale, grad))
    }

    pub fn full_loss_and_grad(&self, theta: &[f64], ds: &Dataset) -> Result<(f64, Vec<f64>)> {
        let all: Vec<usize> = (0..ds.len()).collect();
        self.loss_and_grad(theta, ds, &all)
    }

    /// Gradient of the loss at a single sample.
    pub fn sample_grad(&self, theta: &[f64], ds: &Dataset, i: usize) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(theta, ds, &[i])?.1)
    }

    pub fn loss(&self, theta: &[f64], ds: &Dataset, indices: &[usize]) -> Result<f64> {
        self.check(theta, ds)?;
        if indices.is_empty() {
            return Err(Error::EmptySet);
        }
        let total: f64 = indices
            .iter()
            .map(|&i| {
                let (mut z, _) = self.forward(theta, &ds.features[i]);
                log_softmax_grad(&mut z, ds.labels[i])
            })
            .sum();
        Ok(total / indices.len() as f64)
    }

    /// Fraction of samples whose largest logit (lowest index on ties) is the label.
    pub fn accuracy(&self, theta: &[f64], ds: &Dataset) -> Result<f64> {
        self.check(theta, ds)?;
        if ds.is_empty() {
            return Err(Error::EmptySet);
        }
        let hits = ds
            .features
            .iter()
            .zip(&ds.labels)
            .filter(|(x, &y)| {
                let (z, _) = self.forward(theta, x);
                let best = z
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
                best.0 == y
            })
            .count();
        Ok(hits as f64 / ds.len() as f64)
    }
}

/// Heavy-ball momentum `beta * m_prev + (1 - beta) * g`.
pub fn momentum_update(m_prev: &[f64], g: &[f64], beta: f64) -> Result<Vec<f64>> {
    if m_prev.len() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: m_prev.len(),
            found: g.len(),
        });
    }
    Ok(m_prev.iter().zip(g).map(|(m, x)| beta * m + (1.0 - beta) * x).collect())
}

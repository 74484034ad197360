//! Synthetic classification data: Gaussian class blobs, with per-worker
//! label distributions that are either shared or Dirichlet-perturbed.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::rng::{stream, Purpose, SERVER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Concatenation of several datasets over the same label set.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut out = Dataset {
            features: Vec::new(),
            labels: Vec::new(),
            classes: 0,
        };
        for p in parts {
            out.classes = out.classes.max(p.classes);
            out.features.extend(p.features.iter().cloned());
            out.labels.extend(&p.labels);
        }
        out
    }
}

/// Geometry of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub classes: usize,
    pub features: usize,
    /// Standard deviation of the class means around the origin; within-class
    /// noise has unit variance.
    pub separation: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            features: 8,
            separation: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataMode {
    /// Every worker samples labels from the prior.
    Uniform,
    /// Worker `i` samples labels from `q_i ~ Dir(alpha * prior)`.
    Dirichlet { alpha: f64 },
}

impl DataMode {
    pub fn label(&self) -> String {
        match self {
            DataMode::Uniform => "uniform".into(),
            DataMode::Dirichlet { alpha } => format!("dirichlet-{alpha}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerData {
    pub train: Dataset,
    pub test: Dataset,
    pub class_distribution: Vec<f64>,
}

/// Dirichlet draw computed in log space, so that tiny concentrations do not
/// underflow every Gamma variate to zero. Uses
/// `Gamma(a) = Gamma(a + 1) * U^(1/a)`.
pub fn sample_dirichlet(concentration: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if concentration.is_empty() || concentration.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::InvalidParameter(
            "Dirichlet concentrations must be positive and finite".into(),
        ));
    }
    let logs: Vec<f64> = concentration
        .iter()
        .map(|&a| {
            let g: f64 = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / a
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

fn check_prior(prior: &[f64], classes: usize) -> Result<()> {
    if prior.len() != classes {
        return Err(Error::DimensionMismatch {
            expected: classes,
            found: prior.len(),
        });
    }
    let total: f64 = prior.iter().sum();
    if prior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter("prior must be a probability vector".into()));
    }
    Ok(())
}

/// Per-class feature means, a pure function of `seed`.
pub fn class_means(task: &TaskSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, SERVER, 0, Purpose::Data);
    (0..task.classes)
        .map(|_| {
            (0..task.features)
                .map(|_| task.separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn draw(means: &[Vec<f64>], q: &WeightedIndex<f64>, m: usize, rng: &mut impl Rng) -> Dataset {
    let mut features = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let y = q.sample(rng);
        features.push(means[y].iter().map(|mu| mu + rng.sample::<f64, _>(StandardNormal)).collect());
        labels.push(y);
    }
    Dataset {
        features,
        labels,
        classes: means.len(),
    }
}

/// Train and test sets for `n_workers` workers. Each worker's train and test
/// samples come from the same label distribution.
pub fn gen_hetero_data(
    n_workers: usize,
    m_train: usize,
    m_test: usize,
    task: &TaskSpec,
    mode: &DataMode,
    prior: Option<&[f64]>,
    seed: u64,
) -> Result<Vec<WorkerData>> {
    if task.classes < 2 || task.features == 0 {
        return Err(Error::InvalidParameter("task needs at least 2 classes and 1 feature".into()));
    }
    if !(task.separation.is_finite() && task.separation >= 0.0) {
        return Err(Error::InvalidParameter("class separation must be non-negative".into()));
    }
    if m_train == 0 {
        return Err(Error::InvalidParameter("workers need at least one training sample".into()));
    }
    let uniform = vec![1.0 / task.classes as f64; task.classes];
    let prior = prior.unwrap_or(&uniform);
    check_prior(prior, task.classes)?;
    if let DataMode::Dirichlet { alpha } = mode {
        if !(alpha.is_finite() && *alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("Dirichlet alpha must be positive, got {alpha}")));
        }
    }
    let means = class_means(task, seed);
    (0..n_workers)
        .map(|i| {
            let mut rng = stream(seed, i as u64, 0, Purpose::Data);
            let q = match mode {
                DataMode::Uniform => prior.to_vec(),
                DataMode::Dirichlet { alpha } => {
                    // zero-mass classes get a vanishing concentration instead of an invalid one
                    let conc: Vec<f64> = prior.iter().map(|p| (alpha * p).max(1e-300)).collect();
                    sample_dirichlet(&conc, &mut rng)?
                }
            };
            let weights = WeightedIndex::new(&q)
                .map_err(|e| Error::InvalidParameter(format!("label distribution: {e}")))?;
            let train = draw(&means, &weights, m_train, &mut rng);
            let test = draw(&means, &weights, m_test, &mut rng);
            Ok(WorkerData {
                train,
                test,
                class_distribution: q,
            })
        })
        .collect()
}

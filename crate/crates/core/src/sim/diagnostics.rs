//! Empirical heterogeneity and gradient-noise estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, dist_sq};
use crate::sim::data::WorkerData;
use crate::sim::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityEstimate {
    /// Largest, over the sampled models, mean squared distance between a
    /// worker's full gradient and the average of all workers' gradients.
    pub g_squared: f64,
    /// Largest, over models and workers, mean squared distance between a
    /// single-sample gradient and that worker's full gradient.
    pub sigma_squared: f64,
}

pub fn heterogeneity_diag(model: &Model, workers: &[WorkerData], thetas: &[Vec<f64>]) -> Result<HeterogeneityEstimate> {
    if workers.is_empty() || thetas.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut g_squared = 0.0f64;
    let mut sigma_squared = 0.0f64;
    for theta in thetas {
        let grads: Vec<Vec<f64>> = workers
            .iter()
            .map(|w| model.full_loss_and_grad(theta, &w.train).map(|r| r.1))
            .collect::<Result<_>>()?;
        let mean = geometry::centroid(&grads)?;
        let g2 = grads.iter().map(|g| dist_sq(g, &mean)).sum::<f64>() / grads.len() as f64;
        g_squared = g_squared.max(g2);
        for (w, full) in workers.iter().zip(&grads) {
            let mut s = 0.0;
            for i in 0..w.train.len() {
                s += dist_sq(&model.sample_grad(theta, &w.train, i)?, full);
            }
            sigma_squared = sigma_squared.max(s / w.train.len() as f64);
        }
    }
    Ok(HeterogeneityEstimate {
        g_squared,
        sigma_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::data::{gen_hetero_data, DataMode, TaskSpec};
    use crate::sim::model::ModelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn thetas(model: &Model, k: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..k)
            .map(|_| (0..model.param_count()).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect()
    }

    #[test]
    fn shared_data_has_no_heterogeneity() {
        let task = TaskSpec::default();
        let model = Model::new(ModelSpec::Softmax, task.features, task.classes).unwrap();
        let one = gen_hetero_data(1, 50, 5, &task, &DataMode::Uniform, None, 1).unwrap().remove(0);
        let workers = vec![one.clone(), one.clone(), one];
        let est = heterogeneity_diag(&model, &workers, &thetas(&model, 3)).unwrap();
        assert!(est.g_squared < 1e-20);
        assert!(est.sigma_squared > 0.0);
    }

    #[test]
    fn dirichlet_data_is_more_heterogeneous() {
        let task = TaskSpec::default();
        let model = Model::new(ModelSpec::Softmax, task.features, task.classes).unwrap();
        let th = thetas(&model, 3);
        let uni = gen_hetero_data(12, 60, 5, &task, &DataMode::Uniform, None, 2).unwrap();
        let dir = gen_hetero_data(12, 60, 5, &task, &DataMode::Dirichlet { alpha: 0.1 }, None, 2).unwrap();
        let a = heterogeneity_diag(&model, &uni, &th).unwrap();
        let b = heterogeneity_diag(&model, &dir, &th).unwrap();
        assert!(b.g_squared > a.g_squared, "{} vs {}", b.g_squared, a.g_squared);
    }
}

//! Server/worker training loops: single-aggregator heavy ball and the
//! two-phase propose-and-vote variant.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregators::{aggregate, AggregatorSpec};
use crate::attacks::{byzantine_vote, craft, label_flip, reversal, AttackContext, AttackSpec, Vote};
use crate::error::{Error, Result};
use crate::geometry::{self, VectorSet};
use crate::sim::data::{gen_hetero_data, DataMode, Dataset, TaskSpec, WorkerData};
use crate::sim::model::{momentum_update, Model, ModelSpec};
use crate::sim::rng::{stream, Purpose, SERVER};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr / sqrt(t + 1)`.
    InverseSqrt,
    /// Multiply by `factor` every `every` rounds.
    StepDecay { every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn at(&self, base: f64, round: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::InverseSqrt => base / ((round + 1) as f64).sqrt(),
            LrSchedule::StepDecay { every, factor } => base * factor.powi((round / every) as i32),
        }
    }
}

fn default_eval_every() -> usize {
    1
}

/// Everything a single training run needs besides the method and attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_workers: usize,
    /// Number of Byzantine workers; also the budget `f` passed to aggregators.
    pub byzantine: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub batch_size: usize,
    /// Samples each honest worker draws to score the two proposals.
    pub vote_batch_size: usize,
    pub train_per_worker: usize,
    pub test_per_worker: usize,
    pub task: TaskSpec,
    pub data: DataMode,
    pub model: ModelSpec,
    pub seed: u64,
    /// Test accuracy is recorded every this many rounds and after the last one.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_workers: 35,
            byzantine: 7,
            rounds: 300,
            learning_rate: 0.1,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.0,
            batch_size: 10,
            vote_batch_size: 50,
            train_per_worker: 100,
            test_per_worker: 40,
            task: TaskSpec::default(),
            data: DataMode::Uniform,
            model: ModelSpec::Softmax,
            seed: 0,
            eval_every: 10,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_workers == 0 {
            return bad("n_workers must be positive");
        }
        if 2 * self.byzantine >= self.n_workers {
            return Err(Error::InvalidOutlierBudget {
                n: self.n_workers,
                f: self.byzantine,
                reason: "Byzantine workers must be a strict minority",
            });
        }
        if self.rounds == 0 {
            return bad("rounds must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.batch_size > self.train_per_worker {
            return bad("batch_size must lie in 1..=train_per_worker");
        }
        if self.vote_batch_size == 0 || self.vote_batch_size > self.train_per_worker {
            return bad("vote_batch_size must lie in 1..=train_per_worker");
        }
        if self.test_per_worker == 0 {
            return bad("test_per_worker must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if let LrSchedule::StepDecay { every, factor } = self.lr_schedule {
            if every == 0 || !(factor.is_finite() && factor > 0.0) {
                return bad("step decay needs every >= 1 and factor > 0");
            }
        }
        Ok(())
    }

    pub fn honest(&self) -> usize {
        self.n_workers - self.byzantine
    }
}

/// The server's aggregation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// One aggregator, one model update per round.
    Single { aggregator: AggregatorSpec },
    /// Two candidate updates per round, committed by worker vote.
    TwoPhase { inner: AggregatorSpec, outer: AggregatorSpec },
}

impl Method {
    pub fn validate(&self) -> Result<()> {
        match self {
            Method::Single { aggregator } => aggregator.validate(),
            Method::TwoPhase { inner, outer } => {
                inner.validate()?;
                outer.validate()
            }
        }
    }

    /// Aggregator PGA attacks when its spec names none.
    pub fn primary(&self) -> &AggregatorSpec {
        match self {
            Method::Single { aggregator } => aggregator,
            Method::TwoPhase { inner, .. } => inner,
        }
    }

    pub fn cent2p() -> Self {
        Method::TwoPhase {
            inner: AggregatorSpec::CenterWo,
            outer: AggregatorSpec::OuterCenter,
        }
    }

    pub fn mean2p() -> Self {
        Method::TwoPhase {
            inner: AggregatorSpec::MeanWo,
            outer: AggregatorSpec::OuterMean,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Method::Single { aggregator } => aggregator.name().to_string(),
            Method::TwoPhase { .. } if *self == Method::cent2p() => "Cent2P".into(),
            Method::TwoPhase { .. } if *self == Method::mean2p() => "Mean2P".into(),
            Method::TwoPhase { inner, outer } => format!("2P({inner},{outer})"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    /// `cent2p`, `mean2p`, or any aggregation rule name.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "cent2p" => Ok(Method::cent2p()),
            "mean2p" => Ok(Method::mean2p()),
            _ => Ok(Method::Single { aggregator: s.parse()? }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    Inner,
    Outer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub learning_rate: f64,
    /// Norm of the committed aggregate.
    pub aggregate_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub committed: Option<Proposal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_votes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outer_votes: Option<usize>,
    /// Mean honest training loss at the model the round started from.
    pub train_loss: f64,
    /// Squared norm of the honest full gradient at that model.
    pub grad_norm_sq: f64,
    /// Pooled honest test accuracy after the round's update.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rounds: Vec<RoundRecord>,
    pub final_model: Vec<f64>,
    /// Average of the iterates produced by the rounds.
    pub averaged_model: Vec<f64>,
    pub final_accuracy: f64,
    pub averaged_accuracy: f64,
    pub final_train_loss: f64,
    /// Mean squared norm of the honest full gradient over the rounds.
    pub res_t: f64,
}

impl RunRecord {
    /// Share of rounds committing the given proposal; `None` for single-phase runs.
    pub fn commit_fraction(&self, which: Proposal) -> Option<f64> {
        let committed: Vec<Proposal> = self.rounds.iter().filter_map(|r| r.committed).collect();
        if committed.is_empty() {
            return None;
        }
        Some(committed.iter().filter(|&&p| p == which).count() as f64 / committed.len() as f64)
    }
}

struct Worker {
    data: WorkerData,
    /// Training set actually used for gradients (flipped for label flipping).
    train: Dataset,
    momentum: Vec<f64>,
}

/// Mean honest training loss and squared norm of the honest full gradient.
fn honest_objective(model: &Model, theta: &[f64], workers: &[Worker]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for w in workers {
        let (l, g) = model.full_loss_and_grad(theta, &w.data.train)?;
        loss += l;
        geometry::axpy(&mut grad, 1.0, &g);
    }
    let h = workers.len() as f64;
    Ok((loss / h, geometry::dot(&grad, &grad) / (h * h)))
}

fn sorted_sample(rng: &mut impl rand::Rng, m: usize, b: usize) -> Vec<usize> {
    let mut idx = index::sample(rng, m, b).into_vec();
    idx.sort_unstable();
    idx
}

pub fn rashb_run(cfg: &SimConfig, aggregator: &AggregatorSpec, attack: &AttackSpec) -> Result<RunRecord> {
    run(
        cfg,
        &Method::Single {
            aggregator: aggregator.clone(),
        },
        attack,
    )
}

pub fn two_phase_run(
    cfg: &SimConfig,
    inner: &AggregatorSpec,
    outer: &AggregatorSpec,
    attack: &AttackSpec,
) -> Result<RunRecord> {
    run(
        cfg,
        &Method::TwoPhase {
            inner: inner.clone(),
            outer: outer.clone(),
        },
        attack,
    )
}

/// Executes `cfg.rounds` rounds. Workers `0..n-f` are honest and the last
/// `f` are Byzantine; the server sees the `n` vectors in a freshly shuffled
/// order every round.
pub fn run(cfg: &SimConfig, method: &Method, attack: &AttackSpec) -> Result<RunRecord> {
    cfg.validate()?;
    method.validate()?;
    attack.validate()?;
    let model = Model::new(cfg.model.clone(), cfg.task.features, cfg.task.classes)?;
    let data = gen_hetero_data(
        cfg.n_workers,
        cfg.train_per_worker,
        cfg.test_per_worker,
        &cfg.task,
        &cfg.data,
        None,
        cfg.seed,
    )?;
    let h = cfg.honest();
    let f = cfg.byzantine;
    let dim = model.param_count();
    let flip = match attack {
        AttackSpec::LabelFlip { permutation } => {
            Some(permutation.clone().unwrap_or_else(|| reversal(cfg.task.classes)))
        }
        _ => None,
    };
    let mut workers: Vec<Worker> = data
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let train = match (&flip, i >= h) {
                (Some(p), true) => label_flip(&d.train, p)?,
                _ => d.train.clone(),
            };
            Ok(Worker {
                data: d,
                train,
                momentum: vec![0.0; dim],
            })
        })
        .collect::<Result<_>>()?;
    let test = Dataset::pooled(workers[..h].iter().map(|w| &w.data.test));

    let mut theta = model.init(&mut stream(cfg.seed, SERVER, 0, Purpose::Init));
    let mut theta_sum = vec![0.0; dim];
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut grad_sq_total = 0.0;

    for t in 0..cfg.rounds {
        let lr = cfg.lr_schedule.at(cfg.learning_rate, t);
        let (train_loss, grad_norm_sq) = honest_objective(&model, &theta, &workers[..h])?;
        grad_sq_total += grad_norm_sq;

        // every worker, Byzantine included, computes its true momentum
        let step = |i: usize, w: &Worker| -> Result<Vec<f64>> {
            let mut rng = stream(cfg.seed, i as u64, t as u64, Purpose::Batch);
            let batch = sorted_sample(&mut rng, w.train.len(), cfg.batch_size);
            let (_, g) = model.loss_and_grad(&theta, &w.train, &batch)?;
            momentum_update(&w.momentum, &g, cfg.momentum)
        };
        let momenta: Vec<Vec<f64>> = workers
            .par_iter()
            .enumerate()
            .map(|(i, w)| step(i, w))
            .collect::<Result<_>>()?;
        for (w, m) in workers.iter_mut().zip(&momenta) {
            w.momentum.clone_from(m);
        }

        let mut attack_rng = stream(cfg.seed, SERVER, t as u64, Purpose::Attack);
        let byzantine = craft(
            attack,
            &mut AttackContext {
                honest: &momenta[..h],
                byzantine_true: &momenta[h..],
                f,
                server_f: f,
                target: Some(method.primary()),
                round: t as u64,
                rng: &mut attack_rng,
            },
        )?;
        let mut received: Vec<Vec<f64>> = momenta[..h].to_vec();
        received.extend(byzantine);
        received.shuffle(&mut stream(cfg.seed, SERVER, t as u64, Purpose::Order));
        let set = VectorSet::new(received, f)?;

        let mut record = RoundRecord {
            round: t,
            learning_rate: lr,
            aggregate_norm: 0.0,
            committed: None,
            inner_votes: None,
            outer_votes: None,
            train_loss,
            grad_norm_sq,
            test_accuracy: None,
        };
        match method {
            Method::Single { aggregator } => {
                let r = aggregate(aggregator, &set)?;
                record.aggregate_norm = geometry::norm(&r);
                geometry::axpy(&mut theta, -lr, &r);
            }
            Method::TwoPhase { inner, outer } => {
                let r = aggregate(inner, &set)?;
                let q = aggregate(outer, &set)?;
                let mut theta_inner = theta.clone();
                geometry::axpy(&mut theta_inner, -lr, &r);
                let mut theta_outer = theta.clone();
                geometry::axpy(&mut theta_outer, -lr, &q);
                let losses: Vec<(f64, f64)> = workers[..h]
                    .par_iter()
                    .enumerate()
                    .map(|(i, w)| {
                        let mut rng = stream(cfg.seed, i as u64, t as u64, Purpose::Vote);
                        let batch = sorted_sample(&mut rng, w.data.train.len(), cfg.vote_batch_size);
                        Ok((
                            model.loss(&theta_inner, &w.data.train, &batch)?,
                            model.loss(&theta_outer, &w.data.train, &batch)?,
                        ))
                    })
                    .collect::<Result<_>>()?;
                let mut inner_votes = losses.iter().filter(|(a, b)| a <= b).count();
                let mut outer_votes = h - inner_votes;
                let seen_inner = losses.iter().map(|l| l.0).sum::<f64>() / h as f64;
                let seen_outer = losses.iter().map(|l| l.1).sum::<f64>() / h as f64;
                match byzantine_vote(seen_inner, seen_outer) {
                    Vote::First => inner_votes += f,
                    Vote::Second => outer_votes += f,
                }
                let (choice, agg, next) = if inner_votes >= outer_votes {
                    (Proposal::Inner, r, theta_inner)
                } else {
                    (Proposal::Outer, q, theta_outer)
                };
                record.aggregate_norm = geometry::norm(&agg);
                record.committed = Some(choice);
                record.inner_votes = Some(inner_votes);
                record.outer_votes = Some(outer_votes);
                theta = next;
            }
        }
        geometry::axpy(&mut theta_sum, 1.0, &theta);
        if (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds {
            record.test_accuracy = Some(model.accuracy(&theta, &test)?);
        }
        rounds.push(record);
    }

    let averaged_model = geometry::scale(&theta_sum, 1.0 / cfg.rounds as f64);
    let final_accuracy = rounds.last().and_then(|r| r.test_accuracy).expect("last round is evaluated");
    let (final_train_loss, _) = honest_objective(&model, &theta, &workers[..h])?;
    Ok(RunRecord {
        averaged_accuracy: model.accuracy(&averaged_model, &test)?,
        final_model: theta,
        averaged_model,
        final_accuracy,
        final_train_loss,
        res_t: grad_sq_total / cfg.rounds as f64,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_workers: 9,
            byzantine: 2,
            rounds: 40,
            train_per_worker: 40,
            test_per_worker: 20,
            vote_batch_size: 10,
            batch_size: 5,
            eval_every: 5,
            ..SimConfig::default()
        }
    }

    #[test]
    fn honest_training_learns() {
        let cfg = SimConfig {
            byzantine: 0,
            rounds: 150,
            ..small()
        };
        let rec = rashb_run(&cfg, &AggregatorSpec::Avg, &AttackSpec::None).unwrap();
        assert!(rec.final_accuracy > 0.5, "{}", rec.final_accuracy);
        assert!(rec.final_train_loss < rec.rounds[0].train_loss);
        assert!(rec.res_t >= 0.0);
        assert_eq!(rec.rounds.len(), 150);
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let cfg = SimConfig {
            byzantine: 0,
            rounds: 30,
            batch_size: 40,
            learning_rate: 0.05,
            ..small()
        };
        let rec = rashb_run(&cfg, &AggregatorSpec::Avg, &AttackSpec::None).unwrap();
        assert!(rec.rounds.windows(2).all(|w| w[1].train_loss <= w[0].train_loss));
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = small();
        let m = Method::TwoPhase {
            inner: AggregatorSpec::CenterWo,
            outer: AggregatorSpec::OuterCenter,
        };
        let a = run(&cfg, &m, &AttackSpec::gauss()).unwrap();
        let b = run(&cfg, &m, &AttackSpec::gauss()).unwrap();
        assert_eq!(a, b);
        let c = run(&SimConfig { seed: 1, ..cfg }, &m, &AttackSpec::gauss()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn two_phase_with_equal_proposals_matches_single() {
        let cfg = small();
        let single = rashb_run(&cfg, &AggregatorSpec::Avg, &AttackSpec::Sf).unwrap();
        let two = two_phase_run(&cfg, &AggregatorSpec::Avg, &AggregatorSpec::Avg, &AttackSpec::Sf).unwrap();
        assert_eq!(single.final_model, two.final_model);
        assert!(two.rounds.iter().all(|r| r.committed.is_some()));
    }

    #[test]
    fn committed_model_is_one_of_the_proposals() {
        let cfg = SimConfig { rounds: 15, ..small() };
        let rec = two_phase_run(&cfg, &AggregatorSpec::MeanWo, &AggregatorSpec::OuterMean, &AttackSpec::sneak()).unwrap();
        for r in &rec.rounds {
            assert_eq!(r.inner_votes.unwrap() + r.outer_votes.unwrap(), cfg.n_workers);
        }
        assert!(rec.commit_fraction(Proposal::Inner).is_some());
    }

    #[test]
    fn every_attack_runs() {
        let cfg = SimConfig { rounds: 5, ..small() };
        for attack in AttackSpec::all() {
            let rec = rashb_run(&cfg, &AggregatorSpec::Cwtm, &attack).unwrap();
            assert!(rec.final_model.iter().all(|x| x.is_finite()), "{}", attack.name());
        }
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { byzantine: 5, ..small() }.validate().is_err());
        assert!(SimConfig { momentum: 1.0, ..small() }.validate().is_err());
        assert!(SimConfig { batch_size: 41, ..small() }.validate().is_err());
        assert!(SimConfig { rounds: 0, ..small() }.validate().is_err());
        assert_eq!(LrSchedule::InverseSqrt.at(1.0, 3), 0.5);
        assert_eq!(LrSchedule::StepDecay { every: 10, factor: 0.5 }.at(1.0, 25), 0.25);
    }
}

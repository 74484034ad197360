//! Exhaustive measurement of robustness criteria and certification against
//! closed-form bounds.
//!
//! Each criterion bounds the deviation `||F(X) - mean(S)||` of an aggregate
//! from the average of an honest subset `S` of size `n - f`, relative to a
//! spread statistic of `S`. The measured value of a criterion on an instance
//! is the worst ratio over every such subset.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregators::{aggregate, AggregatorSpec};
use crate::clustering::{approx_cluster, exact_cluster, ClusterObjective, ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::geometry::{self, dist_sq, for_each_combination, VectorSet};

const POWER_ITERATIONS: usize = 200;
const POWER_TOLERANCE: f64 = 1e-10;
const POWER_SEED: u64 = 0x5eed;
/// Relative scale below which a squared deviation or spread counts as zero.
const ZERO_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Deviation over the subset diameter.
    Lambda,
    /// Squared deviation over `(f/n)` times the squared subset diameter.
    Zeta,
    /// Squared deviation over the mean squared distance to the subset centroid.
    Kappa,
    /// Squared deviation over the top eigenvalue of the subset covariance.
    Xi,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Lambda, Criterion::Zeta, Criterion::Kappa, Criterion::Xi];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Lambda => "lambda",
            Criterion::Zeta => "zeta",
            Criterion::Kappa => "kappa",
            Criterion::Xi => "xi",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Worst ratio found for one criterion and the subset attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub criterion: Criterion,
    pub value: f64,
    pub witness: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lambda: f64,
    pub zeta: f64,
    pub kappa: f64,
    pub xi: f64,
}

impl Bounds {
    pub fn get(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Lambda => self.lambda,
            Criterion::Zeta => self.zeta,
            Criterion::Kappa => self.kappa,
            Criterion::Xi => self.xi,
        }
    }
}

/// Measured values for every criterion on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub rule: String,
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub delta_max: f64,
    pub aggregate: Vec<f64>,
    pub measurements: [Measurement; 4],
    pub bounds: Option<Bounds>,
}

impl RobustnessReport {
    pub fn measurement(&self, c: Criterion) -> &Measurement {
        &self.measurements[Criterion::ALL.iter().position(|x| *x == c).expect("listed")]
    }

    pub fn passes(&self, c: Criterion) -> Option<bool> {
        self.bounds.map(|b| within(self.measurement(c).value, b.get(c)))
    }
}

fn within(measured: f64, bound: f64) -> bool {
    measured <= bound * (1.0 + 1e-9) + 1e-12
}

fn ratio(num: f64, den: f64, zero: f64) -> f64 {
    let num = if num <= zero { 0.0 } else { num };
    if den <= zero {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Default `delta_max = f / n`.
pub fn default_delta_max(n: usize, f: usize) -> f64 {
    f as f64 / n as f64
}

fn check_delta(n: usize, f: usize, delta_max: f64) -> Result<()> {
    let lo = default_delta_max(n, f);
    if !(delta_max >= lo - 1e-15 && delta_max < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "delta_max must lie in [f/n, 1/2) = [{lo}, 0.5), got {delta_max}"
        )));
    }
    Ok(())
}

/// Closed-form resilience bounds of the two clustering aggregators.
pub fn closed_form_bounds(rule: &AggregatorSpec, n: usize, f: usize, d: usize, delta_max: f64) -> Result<Bounds> {
    if 2 * f >= n {
        return Err(Error::InvalidOutlierBudget {
            n,
            f,
            reason: "bounds need n - 2f > 0",
        });
    }
    check_delta(n, f, delta_max)?;
    let (nf, ff) = (n as f64, f as f64);
    let honest = nf - ff;
    let gap = nf - 2.0 * ff;
    let nu = 0.5 - delta_max;
    let shrink = honest / gap;
    match rule {
        AggregatorSpec::CenterWo => Ok(Bounds {
            lambda: (2.0 * 2f64.sqrt() + 1.0) * ff / honest,
            zeta: (18.0 + 8.0 * 2f64.sqrt()) / (1.0 + 2.0 * nu).powi(2) * ff / nf,
            kappa: (8.0 * ff * ff + 2.0 * ff) / gap * shrink,
            xi: (8.0 * ff * ff + 2.0 * ff) / gap * shrink,
        }),
        AggregatorSpec::MeanWo => Ok(Bounds {
            lambda: (3.0 * ff * honest).sqrt() / gap,
            zeta: 3.0 * (1.0 + 2.0 * nu) / (8.0 * nu * nu),
            kappa: 6.0 * ff / gap * shrink,
            xi: 6.0 * ff * (honest.min(d as f64)) / gap * shrink,
        }),
        other => Err(Error::NoBounds(other.name().to_string())),
    }
}

/// Largest eigenvalue of the covariance `(1/k) sum (x_i - m)(x_i - m)^T`.
/// Power iteration runs on whichever of the `d x d` covariance and the
/// `k x k` Gram matrix is smaller; both share their nonzero spectrum.
pub fn top_covariance_eigenvalue<P: AsRef<[f64]>>(points: &[P]) -> Result<f64> {
    let m = geometry::centroid(points)?;
    let k = points.len();
    let centred: Vec<Vec<f64>> = points.iter().map(|p| geometry::sub(p.as_ref(), &m)).collect();
    let d = m.len();
    let size = d.min(k);
    let mut mat = vec![vec![0.0; size]; size];
    if d <= k {
        for y in &centred {
            for a in 0..d {
                for b in 0..d {
                    mat[a][b] += y[a] * y[b] / k as f64;
                }
            }
        }
    } else {
        for a in 0..k {
            for b in 0..k {
                mat[a][b] = geometry::dot(&centred[a], &centred[b]) / k as f64;
            }
        }
    }
    Ok(power_iteration(&mat))
}

/// Dominant eigenvalue of a symmetric positive semidefinite matrix via the
/// Rayleigh quotient of power iterates.
fn power_iteration(mat: &[Vec<f64>]) -> f64 {
    let size = mat.len();
    let trace: f64 = (0..size).map(|i| mat[i][i]).sum();
    if trace <= 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..size).map(|_| 1.0 + rng.random::<f64>()).collect();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let len = geometry::norm(&v);
        if len == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= len);
        let w: Vec<f64> = mat.iter().map(|row| geometry::dot(row, &v)).collect();
        let next = geometry::dot(&v, &w);
        v = w;
        if (next - lambda).abs() <= POWER_TOLERANCE * next.abs().max(f64::MIN_POSITIVE) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Ratio of one criterion for aggregate `fx` and honest subset `members`.
pub fn subset_ratio(criterion: Criterion, fx: &[f64], set: &VectorSet, members: &[usize]) -> Result<f64> {
    let pts = set.subset(members);
    let mean = geometry::centroid(&pts)?;
    let dev = dist_sq(fx, &mean);
    let zero = zero_threshold(set, fx);
    let k = pts.len() as f64;
    Ok(match criterion {
        Criterion::Lambda => {
            let diam_sq = geometry::max_pairwise_dist_sq(&pts);
            ratio(dev, diam_sq, zero).sqrt()
        }
        Criterion::Zeta => {
            let diam_sq = geometry::max_pairwise_dist_sq(&pts);
            let frac = set.f() as f64 / set.len() as f64;
            ratio(dev, frac * diam_sq, zero)
        }
        Criterion::Kappa => {
            let scatter: f64 = pts.iter().map(|p| dist_sq(p, &mean)).sum();
            ratio(dev, scatter / k, zero)
        }
        Criterion::Xi => ratio(dev, top_covariance_eigenvalue(&pts)?, zero),
    })
}

fn zero_threshold(set: &VectorSet, fx: &[f64]) -> f64 {
    let scale = set
        .vectors()
        .iter()
        .map(|v| geometry::norm(v))
        .fold(geometry::norm(fx), f64::max);
    (ZERO_REL * (1.0 + scale)).powi(2)
}

fn check_measurable(set: &VectorSet) -> Result<()> {
    set.require_honest_majority()?;
    if set.len() > ENUMERATION_CAP {
        return Err(Error::EnumerationCapExceeded {
            n: set.len(),
            cap: ENUMERATION_CAP,
        });
    }
    Ok(())
}

/// Worst ratios of the given criteria over all honest subsets of size
/// `n - f`. Ties keep the lexicographically first subset.
pub fn measure_aggregate(fx: &[f64], set: &VectorSet, criteria: &[Criterion]) -> Result<Vec<Measurement>> {
    check_measurable(set)?;
    if fx.len() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            found: fx.len(),
        });
    }
    let mut best: Vec<Measurement> = criteria
        .iter()
        .map(|&criterion| Measurement {
            criterion,
            value: f64::NEG_INFINITY,
            witness: Vec::new(),
        })
        .collect();
    let mut failure = None;
    let k = set.len() - set.f();
    let mut buf = Vec::with_capacity(k);
    for_each_combination(set.len(), k, &mut buf, &mut |members| {
        for m in best.iter_mut() {
            match subset_ratio(m.criterion, fx, set, members) {
                Ok(r) if r > m.value => {
                    m.value = r;
                    m.witness = members.to_vec();
                }
                Ok(_) => {}
                Err(e) => failure = Some(e),
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(best),
    }
}

fn measure_one(criterion: Criterion, spec: &AggregatorSpec, set: &VectorSet) -> Result<(f64, Vec<usize>)> {
    let fx = aggregate(spec, set)?;
    let m = measure_aggregate(&fx, set, &[criterion])?.remove(0);
    Ok((m.value, m.witness))
}

pub fn measure_lambda(spec: &AggregatorSpec, set: &VectorSet) -> Result<(f64, Vec<usize>)> {
    measure_one(Criterion::Lambda, spec, set)
}

pub fn measure_kappa(spec: &AggregatorSpec, set: &VectorSet) -> Result<(f64, Vec<usize>)> {
    measure_one(Criterion::Kappa, spec, set)
}

pub fn measure_xi(spec: &AggregatorSpec, set: &VectorSet) -> Result<(f64, Vec<usize>)> {
    measure_one(Criterion::Xi, spec, set)
}

/// `delta_max` only enters the bound, but it is validated here so that a
/// measurement is never produced for an inadmissible setting.
pub fn measure_zeta(spec: &AggregatorSpec, set: &VectorSet, delta_max: f64) -> Result<(f64, Vec<usize>)> {
    check_delta(set.len(), set.f(), delta_max)?;
    measure_one(Criterion::Zeta, spec, set)
}

/// Measures all four criteria and attaches the closed-form bounds of
/// `against` (when it has any).
pub fn robustness_report(
    spec: &AggregatorSpec,
    against: &AggregatorSpec,
    set: &VectorSet,
    delta_max: Option<f64>,
) -> Result<RobustnessReport> {
    let (n, f, d) = (set.len(), set.f(), set.dim());
    let delta_max = delta_max.unwrap_or_else(|| default_delta_max(n, f));
    check_delta(n, f, delta_max)?;
    let fx = aggregate(spec, set)?;
    let m = measure_aggregate(&fx, set, &Criterion::ALL)?;
    let measurements: [Measurement; 4] = m.try_into().expect("four criteria");
    let bounds = match closed_form_bounds(against, n, f, d, delta_max) {
        Ok(b) => Some(b),
        Err(Error::NoBounds(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(RobustnessReport {
        rule: spec.name().to_string(),
        n,
        f,
        d,
        delta_max,
        aggregate: fx,
        measurements,
        bounds,
    })
}

/// Shape of the random instances used for certification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    /// One isotropic Gaussian cluster, no planted outliers.
    Gaussian,
    /// `f` points far away from the cluster in random directions.
    FarOutliers,
    /// `f` points just outside the cluster's bulk.
    NearOutliers,
    /// `f` points stacked in one tight group off the cluster.
    TightGroup,
    /// `f` points on a ring around the cluster centre.
    Ring,
    /// Cycles through all of the above.
    Mixed,
}

impl std::str::FromStr for InstanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "gaussian" => Ok(InstanceKind::Gaussian),
            "faroutliers" | "far" => Ok(InstanceKind::FarOutliers),
            "nearoutliers" | "near" => Ok(InstanceKind::NearOutliers),
            "tightgroup" | "tight" => Ok(InstanceKind::TightGroup),
            "ring" => Ok(InstanceKind::Ring),
            "mixed" => Ok(InstanceKind::Mixed),
            _ => Err(Error::InvalidParameter(format!(
                "unknown instance kind '{s}' (gaussian, far, near, tight, ring, mixed)"
            ))),
        }
    }
}

impl InstanceKind {
    const CYCLE: [InstanceKind; 5] = [
        InstanceKind::Gaussian,
        InstanceKind::FarOutliers,
        InstanceKind::NearOutliers,
        InstanceKind::TightGroup,
        InstanceKind::Ring,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceGenerator {
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub kind: InstanceKind,
}

fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let g = gaussian(rng, d);
        let len = geometry::norm(&g);
        if len > 1e-9 {
            return geometry::scale(&g, 1.0 / len);
        }
    }
}

impl InstanceGenerator {
    pub fn new(n: usize, f: usize, d: usize, kind: InstanceKind) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::EmptySet);
        }
        if 2 * f >= n {
            return Err(Error::InvalidOutlierBudget {
                n,
                f,
                reason: "need f < n/2",
            });
        }
        Ok(Self { n, f, d, kind })
    }

    /// The instance for trial `trial`; a pure function of `(seed, trial)`.
    /// Honest points come first, planted points after, then the order is
    /// shuffled so that index position carries no information.
    pub fn instance(&self, seed: u64, trial: u64) -> VectorSet {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ trial.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let kind = match self.kind {
            InstanceKind::Mixed => InstanceKind::CYCLE[(trial % 5) as usize],
            k => k,
        };
        let d = self.d;
        // anisotropic honest cluster at a random offset
        let spread: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..2.0)).collect();
        let offset = geometry::scale(&gaussian(&mut rng, d), 3.0);
        let mut pts: Vec<Vec<f64>> = (0..self.n - self.f)
            .map(|_| {
                let g = gaussian(&mut rng, d);
                g.iter().zip(&spread).zip(&offset).map(|((x, s), o)| x * s + o).collect()
            })
            .collect();
        let radius = spread.iter().cloned().fold(0.0, f64::max);
        let planted: Vec<Vec<f64>> = match kind {
            InstanceKind::Gaussian | InstanceKind::Mixed => (0..self.f)
                .map(|_| {
                    let g = gaussian(&mut rng, d);
                    g.iter().zip(&spread).zip(&offset).map(|((x, s), o)| x * s + o).collect()
                })
                .collect(),
            InstanceKind::FarOutliers => (0..self.f)
                .map(|_| {
                    let r = rng.random_range(20.0..200.0) * radius;
                    geometry::add(&offset, &geometry::scale(&unit(&mut rng, d), r))
                })
                .collect(),
            InstanceKind::NearOutliers => (0..self.f)
                .map(|_| {
                    let r = rng.random_range(1.5..3.5) * radius;
                    geometry::add(&offset, &geometry::scale(&unit(&mut rng, d), r))
                })
                .collect(),
            InstanceKind::TightGroup => {
                let r = rng.random_range(2.0..10.0) * radius;
                let c = geometry::add(&offset, &geometry::scale(&unit(&mut rng, d), r));
                (0..self.f)
                    .map(|_| geometry::add(&c, &geometry::scale(&gaussian(&mut rng, d), 0.01 * radius)))
                    .collect()
            }
            InstanceKind::Ring => {
                let r = rng.random_range(1.0..4.0) * radius;
                (0..self.f)
                    .map(|_| geometry::add(&offset, &geometry::scale(&unit(&mut rng, d), r)))
                    .collect()
            }
        };
        pts.extend(planted);
        pts.shuffle(&mut rng);
        VectorSet::new(pts, self.f).expect("generated points are finite")
    }
}

/// Worst case of one criterion over a certification batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionOutcome {
    pub criterion: Criterion,
    pub bound: Option<f64>,
    pub worst: f64,
    pub worst_trial: Option<u64>,
    pub witness: Vec<usize>,
    pub violations: usize,
}

impl CriterionOutcome {
    pub fn passed(&self) -> Option<bool> {
        self.bound.map(|_| self.violations == 0)
    }

    pub fn margin(&self) -> Option<f64> {
        self.bound.map(|b| b - self.worst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certification {
    pub rule: String,
    pub against: String,
    pub generator: InstanceGenerator,
    pub delta_max: f64,
    pub trials: u64,
    pub seed: u64,
    pub outcomes: Vec<CriterionOutcome>,
}

impl Certification {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed() != Some(false))
    }

    /// One record per criterion:
    /// `rule criterion measured bound margin status trial witness`.
    pub fn to_text(&self) -> String {
        let fmt_num = |x: f64| {
            if x.is_infinite() {
                if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
            } else {
                format!("{x:.6}")
            }
        };
        let mut out = format!(
            "# rule={} against={} n={} f={} d={} kind={:?} delta_max={} trials={} seed={}\n",
            self.rule,
            self.against,
            self.generator.n,
            self.generator.f,
            self.generator.d,
            self.generator.kind,
            self.delta_max,
            self.trials,
            self.seed
        );
        out.push_str("rule\tcriterion\tmeasured\tbound\tmargin\tstatus\ttrial\twitness\n");
        for o in &self.outcomes {
            let status = match o.passed() {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "unbounded",
            };
            let witness: Vec<String> = o.witness.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                self.rule,
                o.criterion,
                fmt_num(o.worst),
                o.bound.map_or("-".into(), fmt_num),
                o.margin().map_or("-".into(), fmt_num),
                status,
                o.worst_trial.map_or("-".into(), |t| t.to_string()),
                witness.join(",")
            ));
        }
        out
    }
}

/// Measures `spec` on `trials` generated instances and checks every
/// criterion against the closed-form bounds of `against`. Trials run in
/// parallel; the reduction keeps the worst value and, among equals, the
/// earliest trial, so the result does not depend on scheduling.
pub fn certify(
    spec: &AggregatorSpec,
    against: &AggregatorSpec,
    generator: &InstanceGenerator,
    trials: u64,
    seed: u64,
    delta_max: Option<f64>,
) -> Result<Certification> {
    spec.validate()?;
    let (n, f, d) = (generator.n, generator.f, generator.d);
    if n > ENUMERATION_CAP {
        return Err(Error::EnumerationCapExceeded { n, cap: ENUMERATION_CAP });
    }
    let delta_max = delta_max.unwrap_or_else(|| default_delta_max(n, f));
    check_delta(n, f, delta_max)?;
    let bounds = match closed_form_bounds(against, n, f, d, delta_max) {
        Ok(b) => Some(b),
        Err(Error::NoBounds(_)) => None,
        Err(e) => return Err(e),
    };
    let per_trial: Vec<(u64, Vec<Measurement>)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let set = generator.instance(seed, t);
            let fx = aggregate(spec, &set)?;
            Ok((t, measure_aggregate(&fx, &set, &Criterion::ALL)?))
        })
        .collect::<Result<_>>()?;
    // no trials, no claims: the report is empty rather than vacuously passing
    let measured: &[Criterion] = if per_trial.is_empty() { &[] } else { &Criterion::ALL };
    let outcomes = measured
        .iter()
        .enumerate()
        .map(|(ci, &criterion)| {
            let bound = bounds.map(|b| b.get(criterion));
            let mut outcome = CriterionOutcome {
                criterion,
                bound,
                worst: 0.0,
                worst_trial: None,
                witness: Vec::new(),
                violations: 0,
            };
            for (t, ms) in &per_trial {
                let m = &ms[ci];
                if outcome.worst_trial.is_none() || m.value > outcome.worst {
                    outcome.worst = m.value;
                    outcome.worst_trial = Some(*t);
                    outcome.witness = m.witness.clone();
                }
                if bound.is_some_and(|b| !within(m.value, b)) {
                    outcome.violations += 1;
                }
            }
            outcome
        })
        .collect();
    Ok(Certification {
        rule: spec.name().to_string(),
        against: against.name().to_string(),
        generator: *generator,
        delta_max,
        trials,
        seed,
        outcomes,
    })
}

/// Result of comparing the medoid approximation with the exact oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxCheck {
    pub instances: u64,
    /// Largest approx/exact cost ratio seen, for the center and mean objectives.
    pub worst_ratio: [f64; 2],
    pub violations: Vec<String>,
}

impl ApproxCheck {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that the medoid solution costs at most twice the optimum on
/// `trials` random mixed instances with `n` in `4..=n_max`, `d` in
/// `1..=d_max` and `f < n/2`. Relative tolerance 1e-9.
pub fn approx_check(trials: u64, seed: u64, n_max: usize, d_max: usize) -> Result<ApproxCheck> {
    if !(4..=ENUMERATION_CAP).contains(&n_max) || d_max == 0 {
        return Err(Error::InvalidParameter(format!(
            "need 4 <= n_max <= {ENUMERATION_CAP} and d_max >= 1"
        )));
    }
    let objectives = [ClusterObjective::Center, ClusterObjective::Mean];
    let per_trial: Vec<([f64; 2], Vec<String>)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::sim::rng::mix_seed(&[seed, t]));
            let n: usize = rng.random_range(4..=n_max);
            let d: usize = rng.random_range(1..=d_max);
            let f = rng.random_range(0..n.div_ceil(2));
            let set = InstanceGenerator::new(n, f, d, InstanceKind::Mixed)?.instance(seed, t);
            let mut ratios = [0.0; 2];
            let mut bad = Vec::new();
            for (k, &obj) in objectives.iter().enumerate() {
                let approx = approx_cluster(obj, &set)?.cost;
                let exact = exact_cluster(obj, &set)?.cost;
                ratios[k] = if exact > 0.0 {
                    approx / exact
                } else if approx > 0.0 {
                    f64::INFINITY
                } else {
                    1.0
                };
                if approx > 2.0 * exact * (1.0 + 1e-9) {
                    bad.push(format!("trial {t} ({}, n={n} f={f} d={d}): {approx} > 2 x {exact}", obj.name()));
                }
            }
            Ok((ratios, bad))
        })
        .collect::<Result<_>>()?;
    let mut worst_ratio = [0.0f64; 2];
    let mut violations = Vec::new();
    for (r, bad) in per_trial {
        worst_ratio[0] = worst_ratio[0].max(r[0]);
        worst_ratio[1] = worst_ratio[1].max(r[1]);
        violations.extend(bad);
    }
    Ok(ApproxCheck {
        instances: trials,
        worst_ratio,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64], f: usize) -> VectorSet {
        VectorSet::new(xs.iter().map(|&x| vec![x]).collect(), f).unwrap()
    }

    /// Cyclic Jacobi eigenvalue sweep: an independent oracle for the top
    /// eigenvalue of a small symmetric matrix.
    fn jacobi_max_eigenvalue(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i][i]).fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn bound_values() {
        let b = closed_form_bounds(&AggregatorSpec::CenterWo, 8, 2, 3, 0.25).unwrap();
        assert!((b.lambda - (2.0 * 2f64.sqrt() + 1.0) / 3.0).abs() < 1e-12);
        assert!((b.zeta - (18.0 + 8.0 * 2f64.sqrt()) / 2.25 * 0.25).abs() < 1e-12);
        assert!((b.zeta - 3.2571).abs() < 1e-4);
        let b = closed_form_bounds(&AggregatorSpec::MeanWo, 8, 2, 3, 0.25).unwrap();
        assert!((b.lambda - 1.5).abs() < 1e-12);
        assert!((b.zeta - 9.0).abs() < 1e-12);
        let b = closed_form_bounds(&AggregatorSpec::MeanWo, 10, 2, 3, 0.2).unwrap();
        assert!((b.kappa - 8.0 / 3.0).abs() < 1e-12);
        assert!((b.xi - 8.0).abs() < 1e-12);
        let b = closed_form_bounds(&AggregatorSpec::CenterWo, 10, 2, 3, 0.2).unwrap();
        assert!((b.kappa - 8.0).abs() < 1e-12);
        assert!(matches!(
            closed_form_bounds(&AggregatorSpec::MeanWo, 8, 4, 3, 0.49),
            Err(Error::InvalidOutlierBudget { .. })
        ));
        assert!(matches!(
            closed_form_bounds(&AggregatorSpec::Avg, 8, 2, 3, 0.25),
            Err(Error::NoBounds(_))
        ));
        assert!(matches!(
            closed_form_bounds(&AggregatorSpec::MeanWo, 8, 2, 3, 0.1),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn identical_points_measure_zero() {
        let x = VectorSet::new(vec![vec![0.3, -1.7, 2.2]; 7], 2).unwrap();
        // a single CClip step from the origin cannot reach a point this far out
        for spec in AggregatorSpec::all().into_iter().filter(|s| s.name() != "CClip") {
            let fx = aggregate(&spec, &x).unwrap();
            for m in measure_aggregate(&fx, &x, &Criterion::ALL).unwrap() {
                assert_eq!(m.value, 0.0, "{spec} {}", m.criterion);
            }
        }
    }

    #[test]
    fn avg_is_unbounded_on_degenerate_honest_set() {
        let x = line(&[0.0, 0.0, 0.0, 10.0], 1);
        let (v, w) = measure_lambda(&AggregatorSpec::Avg, &x).unwrap();
        assert!(v.is_infinite());
        assert_eq!(w, vec![0, 1, 2]);
    }

    #[test]
    fn eigenvalue_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..200 {
            let d = 1 + trial % 5;
            let k = 2 + trial % 7;
            let pts: Vec<Vec<f64>> = (0..k).map(|_| gaussian(&mut rng, d)).collect();
            let m = geometry::centroid(&pts).unwrap();
            let mut cov = vec![vec![0.0; d]; d];
            for p in &pts {
                for a in 0..d {
                    for b in 0..d {
                        cov[a][b] += (p[a] - m[a]) * (p[b] - m[b]) / k as f64;
                    }
                }
            }
            let oracle = jacobi_max_eigenvalue(cov);
            let got = top_covariance_eigenvalue(&pts).unwrap();
            assert!((got - oracle).abs() <= 1e-6 * oracle.max(1e-12), "{got} vs {oracle}");
        }
    }

    #[test]
    fn collinear_eigenvalue_is_line_variance() {
        let dir = [0.6, 0.8, 0.0];
        let ts = [-1.0, 0.5, 2.0, 3.5];
        let pts: Vec<Vec<f64>> = ts.iter().map(|t| dir.iter().map(|u| 1.0 + u * t).collect()).collect();
        let mean = ts.iter().sum::<f64>() / 4.0;
        let var = ts.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((top_covariance_eigenvalue(&pts).unwrap() - var).abs() < 1e-12);
    }

    #[test]
    fn witnesses_reproduce_and_scale_covariance() {
        let g = InstanceGenerator::new(9, 3, 3, InstanceKind::Mixed).unwrap();
        for t in 0..20 {
            let x = g.instance(7, t);
            let y = x.scaled(3.7);
            for spec in [AggregatorSpec::CenterWo, AggregatorSpec::MeanWo, AggregatorSpec::Cwtm] {
                let fx = aggregate(&spec, &x).unwrap();
                let fy = aggregate(&spec, &y).unwrap();
                let mx = measure_aggregate(&fx, &x, &Criterion::ALL).unwrap();
                let my = measure_aggregate(&fy, &y, &Criterion::ALL).unwrap();
                for (a, b) in mx.iter().zip(&my) {
                    let again = subset_ratio(a.criterion, &fx, &x, &a.witness).unwrap();
                    assert!((again - a.value).abs() <= 1e-9 * a.value.max(1.0));
                    assert!((a.value - b.value).abs() <= 1e-6 * a.value.max(1.0), "{spec} {}", a.criterion);
                }
            }
        }
    }

    #[test]
    fn small_certifications() {
        let g = InstanceGenerator::new(8, 2, 3, InstanceKind::Mixed).unwrap();
        for rule in [AggregatorSpec::CenterWo, AggregatorSpec::MeanWo] {
            let c = certify(&rule, &rule, &g, 100, 1, None).unwrap();
            assert!(c.all_passed(), "{}", c.to_text());
        }
        let far = InstanceGenerator::new(8, 2, 3, InstanceKind::FarOutliers).unwrap();
        let c = certify(&AggregatorSpec::Avg, &AggregatorSpec::CenterWo, &far, 20, 1, None).unwrap();
        assert_eq!(c.outcomes[0].passed(), Some(false));
        let c = certify(&AggregatorSpec::Krum, &AggregatorSpec::Krum, &g, 5, 1, None).unwrap();
        assert!(c.outcomes.iter().all(|o| o.passed().is_none()));
        assert!(c.to_text().contains("unbounded"));
    }

    #[test]
    fn zero_trials_give_an_empty_report() {
        let g = InstanceGenerator::new(8, 2, 3, InstanceKind::Mixed).unwrap();
        let c = certify(&AggregatorSpec::CenterWo, &AggregatorSpec::CenterWo, &g, 0, 1, None).unwrap();
        assert!(c.outcomes.is_empty());
        assert_eq!(c.to_text().lines().count(), 2);
    }

    #[test]
    fn approximation_suite_finds_no_violations() {
        let r = approx_check(150, 4, 9, 3).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
        assert!(r.worst_ratio.iter().all(|x| (1.0..=2.0 + 1e-9).contains(x)));
        assert!(approx_check(10, 4, 20, 3).is_err());
        assert_eq!("Far".parse::<InstanceKind>().unwrap(), InstanceKind::FarOutliers);
        assert!("nope".parse::<InstanceKind>().is_err());
    }

    #[test]
    fn f_zero_instances_measure_zero_for_mean_rule() {
        let g = InstanceGenerator::new(7, 0, 3, InstanceKind::Gaussian).unwrap();
        let c = certify(&AggregatorSpec::MeanWo, &AggregatorSpec::MeanWo, &g, 20, 3, None).unwrap();
        assert!(c.outcomes.iter().all(|o| o.worst == 0.0));
    }

    #[test]
    fn certification_is_deterministic() {
        let g = InstanceGenerator::new(10, 2, 3, InstanceKind::Mixed).unwrap();
        let a = certify(&AggregatorSpec::MeanWo, &AggregatorSpec::MeanWo, &g, 40, 9, Some(0.45)).unwrap();
        let b = certify(&AggregatorSpec::MeanWo, &AggregatorSpec::MeanWo, &g, 40, 9, Some(0.45)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
    }
}

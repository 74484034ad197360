//! Aggregation rules `F(X) -> R^d`.
//!
//! Every rule reads the outlier budget `f` from the input [`VectorSet`], so a
//! single spec can be reused across inputs with different budgets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterObjective};
use crate::error::{Error, Result};
use crate::geometry::{self, dist, dist_sq, VectorSet};

pub const DEFAULT_CCLIP_TAU: f64 = 0.215771;
const GM_DISTANCE_FLOOR: f64 = 1e-12;

fn one() -> usize {
    1
}

fn default_tau() -> f64 {
    DEFAULT_CCLIP_TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorSpec {
    Avg,
    #[serde(rename = "center_wo")]
    CenterWo,
    #[serde(rename = "mean_wo")]
    MeanWo,
    OuterCenter,
    OuterMean,
    /// Geometric median by Weiszfeld iterations started at the centroid.
    Gm {
        #[serde(default = "one")]
        iterations: usize,
    },
    /// Centered clipping around `center` (the origin when absent).
    #[serde(rename = "cclip")]
    CClip {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default = "one")]
        iterations: usize,
    },
    Cwm,
    Cwtm,
    Krum,
}

impl AggregatorSpec {
    /// All ten rules with default parameters.
    pub fn all() -> Vec<AggregatorSpec> {
        vec![
            AggregatorSpec::Avg,
            AggregatorSpec::CenterWo,
            AggregatorSpec::MeanWo,
            AggregatorSpec::OuterCenter,
            AggregatorSpec::OuterMean,
            AggregatorSpec::gm(),
            AggregatorSpec::cclip(),
            AggregatorSpec::Cwm,
            AggregatorSpec::Cwtm,
            AggregatorSpec::Krum,
        ]
    }

    pub fn gm() -> Self {
        AggregatorSpec::Gm { iterations: 1 }
    }

    pub fn cclip() -> Self {
        AggregatorSpec::CClip {
            center: None,
            tau: DEFAULT_CCLIP_TAU,
            iterations: 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorSpec::Avg => "Avg",
            AggregatorSpec::CenterWo => "CenterwO",
            AggregatorSpec::MeanWo => "MeanwO",
            AggregatorSpec::OuterCenter => "OuterCenter",
            AggregatorSpec::OuterMean => "OuterMean",
            AggregatorSpec::Gm { .. } => "GM",
            AggregatorSpec::CClip { .. } => "CClip",
            AggregatorSpec::Cwm => "CWM",
            AggregatorSpec::Cwtm => "CWTM",
            AggregatorSpec::Krum => "Krum",
        }
    }

    /// Whether the rule discards up to `f` inputs.
    pub fn uses_f(&self) -> bool {
        matches!(
            self,
            AggregatorSpec::CenterWo
                | AggregatorSpec::MeanWo
                | AggregatorSpec::OuterCenter
                | AggregatorSpec::OuterMean
                | AggregatorSpec::Cwtm
                | AggregatorSpec::Krum
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AggregatorSpec::Gm { iterations } if *iterations == 0 => {
                Err(Error::InvalidParameter("GM iterations must be at least 1".into()))
            }
            AggregatorSpec::CClip { tau, iterations, center } => {
                if !(tau.is_finite() && *tau > 0.0) {
                    return Err(Error::InvalidParameter(format!("CClip tau must be positive, got {tau}")));
                }
                if *iterations == 0 {
                    return Err(Error::InvalidParameter("CClip iterations must be at least 1".into()));
                }
                if center.as_ref().is_some_and(|c| c.iter().any(|x| !x.is_finite())) {
                    return Err(Error::InvalidParameter("CClip center must be finite".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Copy with the CClip reference point shifted by `t`; other rules are
    /// returned unchanged.
    pub fn translated(&self, t: &[f64]) -> Self {
        match self {
            AggregatorSpec::CClip { center, tau, iterations } => {
                let c = center.clone().unwrap_or_else(|| vec![0.0; t.len()]);
                AggregatorSpec::CClip {
                    center: Some(geometry::add(&c, t)),
                    tau: *tau,
                    iterations: *iterations,
                }
            }
            other => other.clone(),
        }
    }
}

impl fmt::Display for AggregatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorSpec {
    type Err = Error;

    /// Parses a rule name (case-insensitive, `_` and `-` ignored) into the
    /// rule with default parameters.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        AggregatorSpec::all()
            .into_iter()
            .find(|r| r.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown aggregation rule '{s}'")))
    }
}

pub fn aggregate(spec: &AggregatorSpec, set: &VectorSet) -> Result<Vec<f64>> {
    spec.validate()?;
    let out = match spec {
        AggregatorSpec::Avg => geometry::centroid(set.vectors())?,
        AggregatorSpec::CenterWo => inner(ClusterObjective::Center, set)?,
        AggregatorSpec::MeanWo => inner(ClusterObjective::Mean, set)?,
        AggregatorSpec::OuterCenter => outer(ClusterObjective::Center, set)?,
        AggregatorSpec::OuterMean => outer(ClusterObjective::Mean, set)?,
        AggregatorSpec::Gm { iterations } => weiszfeld(set, *iterations),
        AggregatorSpec::CClip { center, tau, iterations } => {
            if let Some(c) = center {
                if c.len() != set.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: set.dim(),
                        found: c.len(),
                    });
                }
            }
            centered_clip(set, center.as_deref(), *tau, *iterations)
        }
        AggregatorSpec::Cwm => coordinate_median(set),
        AggregatorSpec::Cwtm => trimmed_mean(set)?,
        AggregatorSpec::Krum => set.get(krum_index(set)?).to_vec(),
    };
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("{spec} produced a non-finite aggregate")));
    }
    Ok(out)
}

fn inner(objective: ClusterObjective, set: &VectorSet) -> Result<Vec<f64>> {
    let sol = clustering::approx_cluster(objective, set)?;
    Ok(sol.member_centroid(set))
}

/// Centroid of the points outside the cheapest size-`f` medoid cluster.
fn outer(objective: ClusterObjective, set: &VectorSet) -> Result<Vec<f64>> {
    set.require_honest_majority()?;
    let f = set.f();
    if f == 0 {
        return geometry::centroid(set.vectors());
    }
    let excluded = clustering::medoid_search(objective, set, f)?.members;
    let kept: Vec<usize> = (0..set.len()).filter(|i| excluded.binary_search(i).is_err()).collect();
    geometry::centroid_of(set, &kept)
}

fn weiszfeld(set: &VectorSet, iterations: usize) -> Vec<f64> {
    let mut z = geometry::centroid(set.vectors()).expect("nonempty set");
    for _ in 0..iterations {
        let mut num = vec![0.0; set.dim()];
        let mut den = 0.0;
        for x in set.vectors() {
            let w = 1.0 / dist(x, &z).max(GM_DISTANCE_FLOOR);
            geometry::axpy(&mut num, w, x);
            den += w;
        }
        z = num.into_iter().map(|v| v / den).collect();
    }
    z
}

fn centered_clip(set: &VectorSet, center: Option<&[f64]>, tau: f64, iterations: usize) -> Vec<f64> {
    let mut v = center.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; set.dim()]);
    let n = set.len() as f64;
    for _ in 0..iterations {
        let mut step = vec![0.0; set.dim()];
        for x in set.vectors() {
            let y = geometry::sub(x, &v);
            let r = geometry::norm(&y);
            let s = if r > tau { tau / r } else { 1.0 };
            geometry::axpy(&mut step, s / n, &y);
        }
        geometry::axpy(&mut v, 1.0, &step);
    }
    v
}

fn column(set: &VectorSet, k: usize) -> Vec<f64> {
    set.vectors().iter().map(|x| x[k]).collect()
}

fn coordinate_median(set: &VectorSet) -> Vec<f64> {
    let mid = (set.len() - 1) / 2;
    (0..set.dim())
        .map(|k| {
            let mut col = column(set, k);
            *col.select_nth_unstable_by(mid, f64::total_cmp).1
        })
        .collect()
}

/// Per coordinate, drops the `f` largest and `f` smallest values and averages
/// the rest. Survivors are summed in input order so that `f = 0` matches
/// the plain average bit for bit.
fn trimmed_mean(set: &VectorSet) -> Result<Vec<f64>> {
    set.require_honest_majority()?;
    let n = set.len();
    let f = set.f();
    let kept = (n - 2 * f) as f64;
    Ok((0..set.dim())
        .map(|k| {
            let col = column(set, k);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            let mut keep = vec![false; n];
            for &i in &order[f..n - f] {
                keep[i] = true;
            }
            let sum: f64 = (0..n).filter(|&i| keep[i]).map(|i| col[i]).sum();
            sum / kept
        })
        .collect())
}

/// Index of the Krum choice: the vector whose `n - f - 2` nearest other
/// vectors are closest in total squared distance.
/// Krum score of every vector: the sum of squared distances to its
/// `n - f - 2` nearest other vectors, added in ascending order so the score
/// does not depend on the input order.
pub fn krum_scores(set: &VectorSet) -> Result<Vec<f64>> {
    let n = set.len();
    let f = set.f();
    if n < f + 3 {
        return Err(Error::InvalidOutlierBudget {
            n,
            f,
            reason: "Krum needs n >= f + 3",
        });
    }
    let m = n - f - 2;
    let mut row = Vec::with_capacity(n - 1);
    Ok((0..n)
        .map(|i| {
            row.clear();
            row.extend((0..n).filter(|&j| j != i).map(|j| dist_sq(set.get(i), set.get(j))));
            row.select_nth_unstable_by(m - 1, f64::total_cmp);
            row[..m].sort_unstable_by(f64::total_cmp);
            row[..m].iter().sum()
        })
        .collect())
}

/// Index of the minimal Krum score, lowest index on ties.
pub fn krum_index(set: &VectorSet) -> Result<usize> {
    let scores = krum_scores(set)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn line(xs: &[f64], f: usize) -> VectorSet {
        VectorSet::new(xs.iter().map(|&x| vec![x]).collect(), f).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize, f: usize) -> VectorSet {
        let v = (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        VectorSet::new(v, f).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rule_examples() {
        let agg = |s: AggregatorSpec, x: &VectorSet| aggregate(&s, x).unwrap()[0];
        assert!((agg(AggregatorSpec::CenterWo, &line(&[0.0, 0.1, 10.0], 1)) - 0.05).abs() < 1e-12);
        assert!((agg(AggregatorSpec::MeanWo, &line(&[0.0, 1.0, 2.0, 100.0], 1)) - 1.0).abs() < 1e-12);
        let outer = agg(AggregatorSpec::OuterMean, &line(&[0.0, 1.0, 10.0, 10.1, 10.2], 2));
        assert!((outer - 11.2 / 3.0).abs() < 1e-12, "{outer}");
        assert!((agg(AggregatorSpec::Cwtm, &line(&[1.0, 2.0, 3.0, 4.0, 100.0], 1)) - 3.0).abs() < 1e-12);
        assert_eq!(agg(AggregatorSpec::Cwm, &line(&[4.0, 1.0, 3.0, 2.0], 1)), 2.0);
        assert_eq!(agg(AggregatorSpec::Cwm, &line(&[4.0, 1.0, 3.0], 1)), 3.0);
        assert_eq!(agg(AggregatorSpec::Avg, &line(&[1.0, 2.0, 6.0], 1)), 3.0);
    }

    #[test]
    fn krum_never_picks_far_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut x = random_set(&mut rng, 5, 3, 1).into_vectors();
            let far = rng.random_range(0..5);
            x[far] = vec![50.0, -40.0, 30.0];
            let set = VectorSet::new(x, 1).unwrap();
            let k = krum_index(&set).unwrap();
            assert_ne!(k, far);
            // independent score oracle: full sort of the distances
            let score = |i: usize| {
                let mut d: Vec<f64> = (0..5).filter(|&j| j != i).map(|j| dist_sq(set.get(i), set.get(j))).collect();
                d.sort_by(f64::total_cmp);
                d[..2].iter().sum::<f64>()
            };
            assert!((0..5).all(|i| score(k) <= score(i)));
        }
        assert!(matches!(
            krum_index(&line(&[0.0, 1.0, 2.0], 1)),
            Err(Error::InvalidOutlierBudget { .. })
        ));
    }

    #[test]
    fn gm_converges_to_grid_oracle() {
        let x = VectorSet::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], 0).unwrap();
        let gm = aggregate(&AggregatorSpec::Gm { iterations: 2000 }, &x).unwrap();
        let objective = |p: &[f64]| x.vectors().iter().map(|v| dist(v, p)).sum::<f64>();
        let mut best = (f64::INFINITY, vec![0.0, 0.0]);
        let steps = 1000;
        for i in 0..=steps {
            for j in 0..=steps {
                let p = [i as f64 / steps as f64, j as f64 / steps as f64];
                let v = objective(&p);
                if v < best.0 {
                    best = (v, p.to_vec());
                }
            }
        }
        assert!(dist(&gm, &best.1) < 2e-3, "{gm:?} vs {:?}", best.1);
        assert!(objective(&gm) <= best.0 + 1e-9);
    }

    #[test]
    fn gm_single_iteration_formula() {
        // centroid 2, distances 2, 1, 3
        let x = line(&[0.0, 1.0, 5.0], 0);
        let w = [1.0 / 2.0, 1.0, 1.0 / 3.0];
        let expect = (w[1] * 1.0 + w[2] * 5.0) / (w[0] + w[1] + w[2]);
        assert!((aggregate(&AggregatorSpec::gm(), &x).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn cclip_single_step_formula() {
        let x = VectorSet::new(vec![vec![3.0, 4.0], vec![0.1, 0.0]], 0).unwrap();
        let out = aggregate(&AggregatorSpec::cclip(), &x).unwrap();
        let t = DEFAULT_CCLIP_TAU;
        let expect = [(t * 0.6 + 0.1) / 2.0, (t * 0.8) / 2.0];
        assert!(close(&out, &expect, 1e-12));
    }

    #[test]
    fn unanimity() {
        let p = vec![0.05, -0.1, 0.02];
        for f in [0, 2] {
            let x = VectorSet::new(vec![p.clone(); 7], f).unwrap();
            for spec in AggregatorSpec::all() {
                let out = aggregate(&spec, &x).unwrap();
                assert!(close(&out, &p, 1e-12), "{spec}: {out:?}");
            }
        }
        // outside the clip radius a single CClip step only moves tau toward p
        let far = VectorSet::new(vec![vec![3.0, 4.0]; 5], 1).unwrap();
        let out = aggregate(&AggregatorSpec::cclip(), &far).unwrap();
        assert!((geometry::norm(&out) - DEFAULT_CCLIP_TAU).abs() < 1e-12);
        let many = AggregatorSpec::CClip {
            center: None,
            tau: DEFAULT_CCLIP_TAU,
            iterations: 30,
        };
        assert!(close(&aggregate(&many, &far).unwrap(), &[3.0, 4.0], 1e-12));
    }

    #[test]
    fn f_zero_reduces_to_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = random_set(&mut rng, 8, 4, 0);
            let avg = aggregate(&AggregatorSpec::Avg, &x).unwrap();
            for spec in [
                AggregatorSpec::CenterWo,
                AggregatorSpec::MeanWo,
                AggregatorSpec::OuterCenter,
                AggregatorSpec::OuterMean,
                AggregatorSpec::Cwtm,
            ] {
                assert_eq!(aggregate(&spec, &x).unwrap(), avg, "{spec}");
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let x = random_set(&mut rng, 9, 3, 3);
            let t: Vec<f64> = (0..3).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let y = x.translated(&t);
            for spec in AggregatorSpec::all() {
                let a = aggregate(&spec, &x).unwrap();
                let b = aggregate(&spec.translated(&t), &y).unwrap();
                assert!(close(&geometry::add(&a, &t), &b, 1e-9), "{spec}");
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let x = random_set(&mut rng, 9, 3, 3);
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rng);
            let y = x.permuted(&perm);
            for spec in AggregatorSpec::all() {
                // Center-objective medoids tie structurally; checked below on the mean side only
                if matches!(spec, AggregatorSpec::CenterWo | AggregatorSpec::OuterCenter) {
                    continue;
                }
                let a = aggregate(&spec, &x).unwrap();
                let b = aggregate(&spec, &y).unwrap();
                assert!(close(&a, &b, 1e-9), "{spec}");
            }
        }
    }

    #[test]
    fn center_rules_permutation_invariant_without_ties() {
        // points on a line with distinct gaps have no tied medoid costs
        let xs = [0.0, 0.3, 0.75, 1.4, 2.2, 3.5, 7.0, 12.0, 20.0];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = line(&xs, 3);
        for _ in 0..30 {
            let mut perm: Vec<usize> = (0..xs.len()).collect();
            perm.shuffle(&mut rng);
            let y = x.permuted(&perm);
            for spec in [AggregatorSpec::CenterWo, AggregatorSpec::OuterCenter] {
                let a = aggregate(&spec, &x).unwrap();
                let b = aggregate(&spec, &y).unwrap();
                assert!(close(&a, &b, 1e-9), "{spec}");
            }
        }
    }

    #[test]
    fn preconditions() {
        let x = line(&[0.0, 1.0, 2.0, 3.0], 2);
        for spec in [
            AggregatorSpec::CenterWo,
            AggregatorSpec::MeanWo,
            AggregatorSpec::OuterCenter,
            AggregatorSpec::OuterMean,
            AggregatorSpec::Cwtm,
            AggregatorSpec::Krum,
        ] {
            assert!(matches!(aggregate(&spec, &x), Err(Error::InvalidOutlierBudget { .. })), "{spec}");
        }
        let bad = AggregatorSpec::CClip {
            center: None,
            tau: 0.0,
            iterations: 1,
        };
        assert!(matches!(aggregate(&bad, &x), Err(Error::InvalidParameter(_))));
        assert!(matches!(
            aggregate(&AggregatorSpec::Gm { iterations: 0 }, &x),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn names_and_serde() {
        for spec in AggregatorSpec::all() {
            assert_eq!(spec.name().parse::<AggregatorSpec>().unwrap(), spec);
            let json = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<AggregatorSpec>(&json).unwrap(), spec);
        }
        assert_eq!("center_wo".parse::<AggregatorSpec>().unwrap(), AggregatorSpec::CenterWo);
        assert!("median".parse::<AggregatorSpec>().is_err());
        let spec: AggregatorSpec = toml::from_str("rule = \"gm\"\niterations = 3").unwrap();
        assert_eq!(spec, AggregatorSpec::Gm { iterations: 3 });
        assert!(toml::from_str::<AggregatorSpec>("rule = \"gm\"\niters = 3").is_err());
    }
}

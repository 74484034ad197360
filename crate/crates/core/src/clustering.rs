//! 1-center and 1-mean clustering with outliers.
//!
//! Two families live here: exhaustive oracles that enumerate every candidate
//! member set (only feasible for small `n`), and the medoid heuristics that
//! restrict cluster centres to the input points. The medoid versions are
//! 2-approximations of the exact optima and run in `O(n^2 d)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, binomial, dist_sq, for_each_combination, VectorSet};

/// Largest `n` the exhaustive oracles accept by default.
pub const ENUMERATION_CAP: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterObjective {
    /// Largest distance from the centre to a member.
    Center,
    /// Sum of squared distances from the centre to the members.
    Mean,
}

impl ClusterObjective {
    pub fn name(self) -> &'static str {
        match self {
            ClusterObjective::Center => "center",
            ClusterObjective::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSolution {
    pub objective: ClusterObjective,
    pub center: Vec<f64>,
    /// Member indices in ascending order.
    pub members: Vec<usize>,
    pub cost: f64,
}

impl ClusterSolution {
    /// Centroid of the member vectors.
    pub fn member_centroid(&self, set: &VectorSet) -> Vec<f64> {
        geometry::centroid_of(set, &self.members).expect("solutions have at least one member")
    }
}

/// Result of the medoid loop, with the number of point-to-point distance
/// evaluations it performed.
#[derive(Debug, Clone, PartialEq)]
pub struct MedoidSearch {
    pub medoid: usize,
    pub members: Vec<usize>,
    pub cost: f64,
    pub distance_evaluations: usize,
}

pub fn cluster_cost<P: AsRef<[f64]>>(objective: ClusterObjective, center: &[f64], members: &[P]) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::EmptySet);
    }
    for m in members {
        if m.as_ref().len() != center.len() {
            return Err(Error::DimensionMismatch {
                expected: center.len(),
                found: m.as_ref().len(),
            });
        }
    }
    Ok(cost_unchecked(objective, center, members.iter().map(|m| dist_sq(m.as_ref(), center))))
}

fn cost_unchecked(objective: ClusterObjective, _center: &[f64], sq_dists: impl Iterator<Item = f64>) -> f64 {
    match objective {
        ClusterObjective::Center => sq_dists.fold(0.0, f64::max).sqrt(),
        ClusterObjective::Mean => sq_dists.sum(),
    }
}

/// Indices (ascending) of the `k` vectors closest to `c`. Distance ties go to
/// the lower index.
pub fn knn_of(set: &VectorSet, c: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > set.len() {
        return Err(Error::KOutOfRange { k, n: set.len() });
    }
    if c.len() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            found: c.len(),
        });
    }
    let sq: Vec<f64> = set.vectors().iter().map(|v| dist_sq(v, c)).collect();
    Ok(select_nearest(&sq, k, None))
}

/// Partial selection of the `k` smallest squared distances. `anchor`, when
/// given, is always selected first (a medoid belongs to its own cluster).
fn select_nearest(sq: &[f64], k: usize, anchor: Option<usize>) -> Vec<usize> {
    let key = |i: usize| (anchor != Some(i), sq[i], i);
    let cmp = |a: &usize, b: &usize| {
        let (fa, da, ia) = key(*a);
        let (fb, db, ib) = key(*b);
        fa.cmp(&fb).then(da.total_cmp(&db)).then(ia.cmp(&ib))
    };
    let mut idx: Vec<usize> = (0..sq.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// The medoid loop: for every input point take its `k` nearest points
/// (itself included), score that cluster, and keep the cheapest. Ties go to
/// the lowest medoid index.
pub fn medoid_search(objective: ClusterObjective, set: &VectorSet, k: usize) -> Result<MedoidSearch> {
    let n = set.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let mut best: Option<(usize, Vec<usize>, f64)> = None;
    let mut evaluations = 0usize;
    let mut sq = vec![0.0; n];
    for i in 0..n {
        let xi = set.get(i);
        for (j, s) in sq.iter_mut().enumerate() {
            *s = dist_sq(set.get(j), xi);
        }
        evaluations += n;
        let members = select_nearest(&sq, k, Some(i));
        let cost = cost_unchecked(objective, xi, members.iter().map(|&j| sq[j]));
        let better = match &best {
            None => true,
            Some((_, _, c)) => cost.partial_cmp(c) == Some(Ordering::Less),
        };
        if better {
            best = Some((i, members, cost));
        }
    }
    let (medoid, members, cost) = best.expect("n >= 1");
    Ok(MedoidSearch {
        medoid,
        members,
        cost,
        distance_evaluations: evaluations,
    })
}

/// Medoid 2-approximation of the outlier clustering problem. The returned
/// `center` is the chosen medoid and `members` its `n - f` nearest points.
pub fn approx_cluster(objective: ClusterObjective, set: &VectorSet) -> Result<ClusterSolution> {
    set.require_honest_majority()?;
    let search = medoid_search(objective, set, set.len() - set.f())?;
    Ok(ClusterSolution {
        objective,
        center: set.get(search.medoid).to_vec(),
        members: search.members,
        cost: search.cost,
    })
}

fn check_cap(set: &VectorSet, cap: usize) -> Result<()> {
    if set.len() > cap {
        return Err(Error::EnumerationCapExceeded { n: set.len(), cap });
    }
    Ok(())
}

/// Exact minimum enclosing ball with `f` outliers by enumerating all member
/// sets of size `n - f`. Ties keep the lexicographically first member set.
pub fn exact_center_outliers(set: &VectorSet) -> Result<ClusterSolution> {
    exact_center_outliers_capped(set, ENUMERATION_CAP)
}

pub fn exact_center_outliers_capped(set: &VectorSet, cap: usize) -> Result<ClusterSolution> {
    check_cap(set, cap)?;
    let k = set.len() - set.f();
    let mut best: Option<ClusterSolution> = None;
    let mut buf = Vec::with_capacity(k);
    let mut failure = None;
    for_each_combination(set.len(), k, &mut buf, &mut |members| {
        match geometry::exact_meb(&set.subset(members), 0) {
            Ok(ball) => {
                if best.as_ref().is_none_or(|b| ball.radius < b.cost) {
                    best = Some(ClusterSolution {
                        objective: ClusterObjective::Center,
                        center: ball.center,
                        members: members.to_vec(),
                        cost: ball.radius,
                    });
                }
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    best.ok_or(Error::EmptySet)
}

/// Exact 1-mean with `f` outliers. For a fixed member set the optimal centre
/// is its centroid, so the optimum is the member set of least scatter.
pub fn exact_mean_outliers(set: &VectorSet) -> Result<ClusterSolution> {
    exact_mean_outliers_capped(set, ENUMERATION_CAP)
}

pub fn exact_mean_outliers_capped(set: &VectorSet, cap: usize) -> Result<ClusterSolution> {
    check_cap(set, cap)?;
    let k = set.len() - set.f();
    let mut best: Option<ClusterSolution> = None;
    let mut buf = Vec::with_capacity(k);
    for_each_combination(set.len(), k, &mut buf, &mut |members| {
        let pts = set.subset(members);
        let c = geometry::centroid(&pts).expect("k >= 1");
        let cost: f64 = pts.iter().map(|p| dist_sq(p, &c)).sum();
        if best.as_ref().is_none_or(|b| cost < b.cost) {
            best = Some(ClusterSolution {
                objective: ClusterObjective::Mean,
                center: c,
                members: members.to_vec(),
                cost,
            });
        }
    });
    best.ok_or(Error::EmptySet)
}

pub fn exact_cluster(objective: ClusterObjective, set: &VectorSet) -> Result<ClusterSolution> {
    match objective {
        ClusterObjective::Center => exact_center_outliers(set),
        ClusterObjective::Mean => exact_mean_outliers(set),
    }
}

/// Number of member sets the exhaustive oracles visit.
pub fn enumeration_size(set: &VectorSet) -> usize {
    binomial(set.len(), set.len() - set.f())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
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

    #[test]
    fn knn_examples() {
        let x = line(&[0.0, 1.0, 10.0], 0);
        assert_eq!(knn_of(&x, &[0.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(knn_of(&x, &[0.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(knn_of(&x, &[0.0], 0), Err(Error::KOutOfRange { k: 0, n: 3 }));
        assert_eq!(knn_of(&x, &[0.0], 4), Err(Error::KOutOfRange { k: 4, n: 3 }));
        // equidistant candidates: lower index wins
        let x = line(&[1.0, -1.0, 1.0, -1.0], 0);
        assert_eq!(knn_of(&x, &[0.0], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn knn_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = random_set(&mut rng, 9, 3, 0);
            let c: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut all: Vec<(f64, usize)> = x
                .vectors()
                .iter()
                .enumerate()
                .map(|(i, v)| (v.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut expect: Vec<usize> = all[..5].iter().map(|p| p.1).collect();
            expect.sort();
            assert_eq!(knn_of(&x, &c, 5).unwrap(), expect);
        }
    }

    #[test]
    fn cost_examples() {
        let s = [vec![3.0], vec![-4.0]];
        assert_eq!(cluster_cost(ClusterObjective::Center, &[0.0], &s).unwrap(), 4.0);
        assert_eq!(cluster_cost(ClusterObjective::Mean, &[0.0], &s).unwrap(), 25.0);
        let empty: [Vec<f64>; 0] = [];
        assert_eq!(cluster_cost(ClusterObjective::Mean, &[0.0], &empty), Err(Error::EmptySet));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_set(&mut rng, 7, 2, 0);
        let c = geometry::centroid(x.vectors()).unwrap();
        let at_centroid = cluster_cost(ClusterObjective::Mean, &c, x.vectors()).unwrap();
        for v in x.vectors() {
            assert!(at_centroid <= cluster_cost(ClusterObjective::Mean, v, x.vectors()).unwrap());
        }
    }

    #[test]
    fn exact_center_examples() {
        let sol = exact_center_outliers(&line(&[0.0, 0.1, 10.0], 1)).unwrap();
        assert_eq!(sol.members, vec![0, 1]);
        assert!((sol.center[0] - 0.05).abs() < 1e-12);
        assert!((sol.cost - 0.05).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_set(&mut rng, 7, 3, 0);
        let meb = geometry::exact_meb(x.vectors(), 0).unwrap();
        let sol = exact_center_outliers(&x).unwrap();
        assert!((sol.cost - meb.radius).abs() < 1e-12);

        let same = VectorSet::new(vec![vec![2.0, 2.0]; 6], 2).unwrap();
        assert_eq!(exact_center_outliers(&same).unwrap().cost, 0.0);

        let big = random_set(&mut rng, 15, 2, 3);
        assert_eq!(
            exact_center_outliers(&big),
            Err(Error::EnumerationCapExceeded { n: 15, cap: 14 })
        );
    }

    #[test]
    fn exact_mean_examples() {
        let sol = exact_mean_outliers(&line(&[0.0, 1.0, 2.0, 100.0], 1)).unwrap();
        assert_eq!(sol.members, vec![0, 1, 2]);
        assert!((sol.center[0] - 1.0).abs() < 1e-12);
        assert!((sol.cost - 2.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_set(&mut rng, 6, 2, 0);
        let sol = exact_mean_outliers(&x).unwrap();
        assert_eq!(sol.center, geometry::centroid(x.vectors()).unwrap());

        // {-1, 0, 1} with f = 1: {-1, 0} and {0, 1} both cost 0.5; first in lexicographic order wins
        let sol = exact_mean_outliers(&line(&[-1.0, 0.0, 1.0], 1)).unwrap();
        assert_eq!(sol.cost, 0.5);
        assert_eq!(sol.members, vec![0, 1]);
    }

    #[test]
    fn approx_examples() {
        let sol = approx_cluster(ClusterObjective::Center, &line(&[0.0, 0.1, 10.0], 1)).unwrap();
        assert_eq!(sol.center, vec![0.0]);
        assert_eq!(sol.members, vec![0, 1]);
        assert!((sol.cost - 0.1).abs() < 1e-12);

        let sol = approx_cluster(ClusterObjective::Mean, &line(&[0.0, 1.0, 2.0, 100.0], 1)).unwrap();
        assert_eq!(sol.center, vec![1.0]);
        assert_eq!(sol.members, vec![0, 1, 2]);
        assert!((sol.cost - 2.0).abs() < 1e-12);
        assert_eq!(sol.member_centroid(&line(&[0.0, 1.0, 2.0, 100.0], 1)), vec![1.0]);

        let bad = line(&[0.0, 1.0, 2.0, 3.0], 2);
        assert!(matches!(
            approx_cluster(ClusterObjective::Mean, &bad),
            Err(Error::InvalidOutlierBudget { .. })
        ));
    }

    #[test]
    fn medoid_loop_is_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let small = random_set(&mut rng, 10, 3, 2);
        let large = random_set(&mut rng, 20, 3, 4);
        let a = medoid_search(ClusterObjective::Center, &small, 8).unwrap();
        let b = medoid_search(ClusterObjective::Center, &large, 16).unwrap();
        assert_eq!(a.distance_evaluations, 100);
        assert_eq!(b.distance_evaluations, 4 * a.distance_evaluations);
    }

    fn instance() -> impl Strategy<Value = VectorSet> {
        (4usize..11, 1usize..4)
            .prop_flat_map(|(n, d)| {
                (
                    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n),
                    0..n.div_ceil(2),
                )
            })
            .prop_map(|(v, f)| VectorSet::new(v, f).unwrap())
    }

    proptest! {
        #[test]
        fn two_approximation(x in instance()) {
            for obj in [ClusterObjective::Center, ClusterObjective::Mean] {
                let approx = approx_cluster(obj, &x).unwrap();
                let exact = exact_cluster(obj, &x).unwrap();
                prop_assert!(approx.cost <= 2.0 * exact.cost * (1.0 + 1e-9) + 1e-12);
                prop_assert!(exact.cost <= approx.cost * (1.0 + 1e-9) + 1e-12);
                prop_assert_eq!(approx.members.len(), x.len() - x.f());
                let recomputed = cluster_cost(obj, &approx.center, &x.subset(&approx.members)).unwrap();
                prop_assert!((recomputed - approx.cost).abs() <= 1e-9 * (1.0 + approx.cost));
            }
        }

        #[test]
        fn permutation_covariance(x in instance(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..x.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let y = x.permuted(&perm);
            for obj in [ClusterObjective::Center, ClusterObjective::Mean] {
                let a = approx_cluster(obj, &x).unwrap();
                let b = approx_cluster(obj, &y).unwrap();
                prop_assert!((a.cost - b.cost).abs() <= 1e-9 * (1.0 + a.cost));
            }
        }
    }

    #[test]
    fn permutation_covariance_tie_free() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let x = random_set(&mut rng, 9, 3, 3);
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rng);
            let y = x.permuted(&perm);
            // the Center objective ties whenever two medoids are each other's farthest member
            let a = approx_cluster(ClusterObjective::Center, &x).unwrap();
            let b = approx_cluster(ClusterObjective::Center, &y).unwrap();
            assert_eq!(a.cost, b.cost);
            {
                let obj = ClusterObjective::Mean;
                let a = approx_cluster(obj, &x).unwrap();
                let b = approx_cluster(obj, &y).unwrap();
                let mapped: Vec<usize> = {
                    let mut m: Vec<usize> = b.members.iter().map(|&i| perm[i]).collect();
                    m.sort();
                    m
                };
                assert_eq!(mapped, a.members);
                let ca = a.member_centroid(&x);
                let cb = b.member_centroid(&y);
                assert!(geometry::dist(&ca, &cb) < 1e-9);
            }
        }
    }
}

//! Vector arithmetic, centroids, diameters and exact minimum enclosing balls.
//!
//! Point sets are passed as slices of anything that derefs to `[f64]`, so the
//! same functions serve owned vectors (`&[Vec<f64>]`) and borrowed subsets
//! (`&[&[f64]]`).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used for geometric comparisons.
pub const TOL: f64 = 1e-9;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `y += alpha * x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// An ordered collection of `n` finite vectors of a common dimension together
/// with an outlier budget `f < n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVectorSet", into = "RawVectorSet")]
pub struct VectorSet {
    vectors: Vec<Vec<f64>>,
    dim: usize,
    f: usize,
}

#[derive(Serialize, Deserialize)]
struct RawVectorSet {
    vectors: Vec<Vec<f64>>,
    f: usize,
}

impl TryFrom<RawVectorSet> for VectorSet {
    type Error = Error;
    fn try_from(raw: RawVectorSet) -> Result<Self> {
        VectorSet::new(raw.vectors, raw.f)
    }
}

impl From<VectorSet> for RawVectorSet {
    fn from(set: VectorSet) -> Self {
        RawVectorSet {
            vectors: set.vectors,
            f: set.f,
        }
    }
}

impl VectorSet {
    pub fn new(vectors: Vec<Vec<f64>>, f: usize) -> Result<Self> {
        let first = vectors.first().ok_or(Error::EmptySet)?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidParameter("vectors must have dimension >= 1".into()));
        }
        for (index, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }
        if f >= vectors.len() {
            return Err(Error::InvalidOutlierBudget {
                n: vectors.len(),
                f,
                reason: "need f < n",
            });
        }
        Ok(Self { vectors, dim, f })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The outlier budget `f`.
    pub fn f(&self) -> usize {
        self.f
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn into_vectors(self) -> Vec<Vec<f64>> {
        self.vectors
    }

    pub fn with_f(mut self, f: usize) -> Result<Self> {
        if f >= self.vectors.len() {
            return Err(Error::InvalidOutlierBudget {
                n: self.vectors.len(),
                f,
                reason: "need f < n",
            });
        }
        self.f = f;
        Ok(self)
    }

    /// Errors unless `2f < n`, the honest-majority condition of every
    /// f-parameterised aggregation rule.
    pub fn require_honest_majority(&self) -> Result<()> {
        if 2 * self.f >= self.len() {
            return Err(Error::InvalidOutlierBudget {
                n: self.len(),
                f: self.f,
                reason: "need f < n/2",
            });
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&[f64]> {
        indices.iter().map(|&i| self.vectors[i].as_slice()).collect()
    }

    pub fn translated(&self, t: &[f64]) -> Self {
        Self {
            vectors: self.vectors.iter().map(|v| add(v, t)).collect(),
            dim: self.dim,
            f: self.f,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            vectors: self.vectors.iter().map(|v| scale(v, s)).collect(),
            dim: self.dim,
            f: self.f,
        }
    }

    /// Reorders the vectors so that position `i` holds the old vector `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            vectors: perm.iter().map(|&i| self.vectors[i].clone()).collect(),
            dim: self.dim,
            f: self.f,
        }
    }
}

/// A closed Euclidean ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        dist(&self.center, p) <= self.radius + tol
    }
}

fn check_dims<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    let dim = points.first().ok_or(Error::EmptySet)?.as_ref().len();
    for p in points {
        if p.as_ref().len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: p.as_ref().len(),
            });
        }
    }
    Ok(dim)
}

/// Coordinate-wise arithmetic mean, summed in input order.
pub fn centroid<P: AsRef<[f64]>>(points: &[P]) -> Result<Vec<f64>> {
    let dim = check_dims(points)?;
    let mut sum = vec![0.0; dim];
    for p in points {
        for (s, x) in sum.iter_mut().zip(p.as_ref()) {
            *s += x;
        }
    }
    let n = points.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Centroid of the vectors of `set` at `indices`.
pub fn centroid_of(set: &VectorSet, indices: &[usize]) -> Result<Vec<f64>> {
    centroid(&set.subset(indices))
}

/// Largest pairwise Euclidean distance; zero for a singleton.
pub fn diameter<P: AsRef<[f64]>>(points: &[P]) -> Result<f64> {
    check_dims(points)?;
    Ok(max_pairwise_dist_sq(points).sqrt())
}

pub(crate) fn max_pairwise_dist_sq<P: AsRef<[f64]>>(points: &[P]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.max(dist_sq(points[i].as_ref(), points[j].as_ref()));
        }
    }
    best
}

/// Exact minimum enclosing ball via Welzl's support-set recursion.
///
/// Points are visited in an order shuffled by `seed`; the radius does not
/// depend on the seed. The result is verified to contain every point and, if a
/// numerically degenerate support set slips through, the computation is
/// retried with fresh orders before falling back to exhaustive support-set
/// enumeration.
pub fn exact_meb<P: AsRef<[f64]>>(points: &[P], seed: u64) -> Result<Ball> {
    let dim = check_dims(points)?;
    let pts: Vec<&[f64]> = points.iter().map(|p| p.as_ref()).collect();
    let scale = pts
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1.0);
    let tol = 1e-12 * scale;

    for attempt in 0..4u64 {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)));
        order.shuffle(&mut rng);
        let mut support = Vec::with_capacity(dim + 1);
        let ball = welzl(&pts, &order, order.len(), &mut support, dim, tol);
        if let Some(ball) = ball {
            if pts.iter().all(|p| ball.contains(p, 1e-9 * scale)) {
                return Ok(ball);
            }
        }
    }
    Ok(meb_by_support_enumeration(&pts, dim, tol))
}

fn welzl(
    pts: &[&[f64]],
    order: &[usize],
    remaining: usize,
    support: &mut Vec<usize>,
    dim: usize,
    tol: f64,
) -> Option<Ball> {
    if remaining == 0 || support.len() == dim + 1 {
        return ball_on_boundary(pts, support);
    }
    let p = order[remaining - 1];
    let ball = welzl(pts, order, remaining - 1, support, dim, tol);
    if let Some(b) = &ball {
        if b.contains(pts[p], tol) {
            return ball;
        }
    }
    support.push(p);
    let ball = welzl(pts, order, remaining - 1, support, dim, tol);
    support.pop();
    ball
}

/// Smallest ball with every support point on its boundary: the circumcentre
/// within the affine hull of the support. Affinely dependent support points
/// are dropped.
fn ball_on_boundary(pts: &[&[f64]], support: &[usize]) -> Option<Ball> {
    let (&first, rest) = support.split_first()?;
    let origin = pts[first];
    if rest.is_empty() {
        return Some(Ball {
            center: origin.to_vec(),
            radius: 0.0,
        });
    }

    let mut edges: Vec<Vec<f64>> = Vec::with_capacity(rest.len());
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rest.len());
    for &i in rest {
        let v = sub(pts[i], origin);
        let mut r = v.clone();
        for q in &basis {
            let c = dot(&r, q);
            axpy(&mut r, -c, q);
        }
        let rn = norm(&r);
        if rn > 1e-10 * norm(&v).max(1e-300) && rn > 0.0 {
            basis.push(scale(&r, 1.0 / rn));
            edges.push(v);
        }
    }
    if edges.is_empty() {
        return Some(Ball {
            center: origin.to_vec(),
            radius: 0.0,
        });
    }

    // Solve G λ = b / 2 with G the Gram matrix of the edges.
    let k = edges.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = dot(&edges[i], &edges[j]);
        }
        a[i][k] = 0.5 * dot(&edges[i], &edges[i]);
    }
    let lambda = solve_linear(a)?;
    let mut center = origin.to_vec();
    for (l, e) in lambda.iter().zip(&edges) {
        axpy(&mut center, *l, e);
    }
    let radius = dist(&center, origin);
    radius.is_finite().then_some(Ball { center, radius })
}

/// Gaussian elimination with partial pivoting on an augmented `k x (k+1)` matrix.
pub(crate) fn solve_linear(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let k = a.len();
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        for row in (col + 1)..k {
            let factor = a[row][col] / a[col][col];
            if factor != 0.0 {
                for c in col..=k {
                    a[row][c] -= factor * a[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; k];
    for row in (0..k).rev() {
        let mut s = a[row][k];
        for c in (row + 1)..k {
            s -= a[row][c] * x[c];
        }
        x[row] = s / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn meb_by_support_enumeration(pts: &[&[f64]], dim: usize, tol: f64) -> Ball {
    let n = pts.len();
    let max_support = (dim + 1).min(n);
    let mut best: Option<Ball> = None;
    let mut support = Vec::with_capacity(max_support);
    for size in 1..=max_support {
        for_each_combination(n, size, &mut support, &mut |s| {
            if let Some(ball) = ball_on_boundary(pts, s) {
                let better = best.as_ref().is_none_or(|b| ball.radius < b.radius);
                if better && pts.iter().all(|p| ball.contains(p, tol.max(1e-9))) {
                    best = Some(ball);
                }
            }
        });
    }
    best.unwrap_or_else(|| {
        // Unreachable for finite input: the ball through the diametral pair
        // always exists. Kept total for safety.
        let center = centroid(pts).unwrap_or_default();
        let radius = pts.iter().map(|p| dist(&center, p)).fold(0.0, f64::max);
        Ball { center, radius }
    })
}

/// Calls `visit` with every strictly increasing index tuple of length `k`
/// drawn from `0..n`, in lexicographic order.
pub fn for_each_combination(n: usize, k: usize, buf: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    buf.clear();
    if k > n {
        return;
    }
    if k == 0 {
        visit(buf);
        return;
    }
    buf.extend(0..k);
    loop {
        visit(buf);
        let mut i = k;
        while i > 0 && buf[i - 1] == i - 1 + n - k {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        i -= 1;
        buf[i] += 1;
        for j in (i + 1)..k {
            buf[j] = buf[j - 1] + 1;
        }
    }
}

/// Binomial coefficient, saturating on overflow.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

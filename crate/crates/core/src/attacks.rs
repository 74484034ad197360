//! Byzantine update generators and voting behaviour.
//!
//! The adversary is omniscient: every attack sees the honest updates of the
//! round and the updates its own workers would have sent had they been
//! honest (their "true" updates).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregators::{aggregate, AggregatorSpec};
use crate::error::{Error, Result};
use crate::geometry::{self, VectorSet};
use crate::sim::data::Dataset;
use crate::sim::rng::mix_seed;

fn default_empire_factor() -> f64 {
    -0.1
}
fn default_sv_shift() -> f64 {
    20.0
}
fn default_sneak_scale() -> f64 {
    0.8
}
fn default_siege_min() -> f64 {
    1.2
}
fn default_siege_max() -> f64 {
    1.5
}
fn default_siege_angle() -> f64 {
    60.0
}
fn default_pga_evaluations() -> usize {
    50
}
fn default_pga_range() -> f64 {
    10.0
}

/// Which true updates the omniscient attack averages as its baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmnBaseline {
    /// Honest updates together with the Byzantine workers' true updates.
    #[default]
    AllWorkers,
    /// Honest updates only.
    HonestOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    /// Byzantine workers send their true updates.
    None,
    /// Each Byzantine worker sends the negative of its true update.
    Sf,
    /// Random Gaussian direction with the norm of the replaced update. With a
    /// seed the draws are independent of the run's random streams.
    Gauss {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Baseline average minus `2n/f` times the Byzantine true average, so that
    /// the plain average of all `n` vectors lands near the negated baseline.
    Omn {
        #[serde(default)]
        baseline: OmnBaseline,
    },
    /// `factor` times the honest average.
    Empire {
        #[serde(default = "default_empire_factor")]
        factor: f64,
    },
    /// Mean of all workers shifted by `shift` standard deviations per coordinate.
    Sv {
        #[serde(default = "default_sv_shift")]
        shift: f64,
    },
    /// All Byzantine vectors at one point inside the honest ball: `scale`
    /// times the honest radius from the honest mean along `direction`
    /// (default: against the honest mean).
    Sneak {
        #[serde(default = "default_sneak_scale")]
        scale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        direction: Option<Vec<f64>>,
    },
    /// Byzantine vectors spread around the honest cloud at `scale_min` to
    /// `scale_max` times the honest radius, within `angle_deg` of `direction`.
    Siege {
        #[serde(default = "default_siege_min")]
        scale_min: f64,
        #[serde(default = "default_siege_max")]
        scale_max: f64,
        #[serde(default = "default_siege_angle")]
        angle_deg: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        direction: Option<Vec<f64>>,
    },
    /// Honest average pushed along its own sign pattern by a step chosen to
    /// displace the target aggregator the most.
    Pga {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<AggregatorSpec>,
        #[serde(default = "default_pga_evaluations")]
        evaluations: usize,
        #[serde(default = "default_pga_range")]
        range_factor: f64,
    },
    /// Data-level attack: Byzantine workers train on labels mapped through
    /// `permutation` (default `y -> C - 1 - y`) and send those updates.
    LabelFlip {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        permutation: Option<Vec<usize>>,
    },
}

impl AttackSpec {
    pub fn gauss() -> Self {
        AttackSpec::Gauss { seed: None }
    }
    pub fn omn() -> Self {
        AttackSpec::Omn {
            baseline: OmnBaseline::AllWorkers,
        }
    }
    pub fn empire() -> Self {
        AttackSpec::Empire {
            factor: default_empire_factor(),
        }
    }
    pub fn sv() -> Self {
        AttackSpec::Sv {
            shift: default_sv_shift(),
        }
    }
    pub fn sneak() -> Self {
        AttackSpec::Sneak {
            scale: default_sneak_scale(),
            direction: None,
        }
    }
    pub fn siege() -> Self {
        AttackSpec::Siege {
            scale_min: default_siege_min(),
            scale_max: default_siege_max(),
            angle_deg: default_siege_angle(),
            direction: None,
        }
    }
    pub fn pga() -> Self {
        AttackSpec::Pga {
            target: None,
            evaluations: default_pga_evaluations(),
            range_factor: default_pga_range(),
        }
    }
    pub fn label_flip() -> Self {
        AttackSpec::LabelFlip { permutation: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "None",
            AttackSpec::Sf => "SF",
            AttackSpec::Gauss { .. } => "Gauss",
            AttackSpec::Omn { .. } => "Omn",
            AttackSpec::Empire { .. } => "Empire",
            AttackSpec::Sv { .. } => "SV",
            AttackSpec::Sneak { .. } => "Sneak",
            AttackSpec::Siege { .. } => "Siege",
            AttackSpec::Pga { .. } => "PGA",
            AttackSpec::LabelFlip { .. } => "LF",
        }
    }

    /// All kinds with default parameters.
    pub fn all() -> Vec<AttackSpec> {
        vec![
            AttackSpec::None,
            AttackSpec::Sf,
            AttackSpec::gauss(),
            AttackSpec::omn(),
            AttackSpec::empire(),
            AttackSpec::sv(),
            AttackSpec::sneak(),
            AttackSpec::siege(),
            AttackSpec::pga(),
            AttackSpec::label_flip(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match self {
            AttackSpec::Empire { factor } if !factor.is_finite() => bad("Empire factor must be finite".into()),
            AttackSpec::Sv { shift } if !shift.is_finite() => bad("SV shift must be finite".into()),
            AttackSpec::Sneak { scale, .. } if !(scale.is_finite() && *scale >= 0.0) => {
                bad(format!("Sneak scale must be non-negative, got {scale}"))
            }
            AttackSpec::Siege {
                scale_min,
                scale_max,
                angle_deg,
                ..
            } => {
                if !(scale_min.is_finite() && scale_max.is_finite() && *scale_min > 0.0 && scale_min <= scale_max) {
                    return bad(format!("Siege scales must satisfy 0 < min <= max, got {scale_min}..{scale_max}"));
                }
                if !(angle_deg.is_finite() && (0.0..=180.0).contains(angle_deg)) {
                    return bad(format!("Siege angle must lie in [0, 180], got {angle_deg}"));
                }
                Ok(())
            }
            AttackSpec::Pga {
                evaluations,
                range_factor,
                target,
            } => {
                if *evaluations < 2 {
                    return bad("PGA needs at least 2 evaluations".into());
                }
                if !(range_factor.is_finite() && *range_factor >= 0.0) {
                    return bad(format!("PGA range factor must be non-negative, got {range_factor}"));
                }
                if let Some(t) = target {
                    t.validate()?;
                }
                Ok(())
            }
            AttackSpec::LabelFlip { permutation: Some(p) } => check_permutation(p),
            _ => Ok(()),
        }
    }

    /// Whether Byzantine workers must train on flipped labels.
    pub fn is_data_level(&self) -> bool {
        matches!(self, AttackSpec::LabelFlip { .. })
    }
}

impl std::fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackSpec {
    type Err = Error;

    /// Parses an attack name (case-insensitive, `_` and `-` ignored) into the
    /// attack with default parameters. `labelflip` is accepted for `LF`.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['_', '-'], "");
        if key == "labelflip" {
            return Ok(AttackSpec::label_flip());
        }
        AttackSpec::all()
            .into_iter()
            .find(|a| a.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown attack '{s}'")))
    }
}

/// What the adversary sees in a round.
pub struct AttackContext<'a> {
    pub honest: &'a [Vec<f64>],
    /// True updates of the `f` Byzantine workers. When empty, slot `i`
    /// mirrors honest update `i mod h`.
    pub byzantine_true: &'a [Vec<f64>],
    pub f: usize,
    /// Budget the server passes to its aggregator.
    pub server_f: usize,
    /// Aggregator attacked by PGA when the attack names none.
    pub target: Option<&'a AggregatorSpec>,
    pub round: u64,
    pub rng: &'a mut ChaCha8Rng,
}

impl AttackContext<'_> {
    fn dim(&self) -> usize {
        self.honest[0].len()
    }

    fn true_update(&self, i: usize) -> &[f64] {
        if self.byzantine_true.len() == self.f {
            &self.byzantine_true[i]
        } else {
            &self.honest[i % self.honest.len()]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.honest.is_empty() {
            return Err(Error::EmptySet);
        }
        let d = self.dim();
        for v in self.honest.iter().chain(self.byzantine_true) {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                });
            }
        }
        if !self.byzantine_true.is_empty() && self.byzantine_true.len() != self.f {
            return Err(Error::InvalidParameter(format!(
                "expected {} Byzantine true updates, got {}",
                self.f,
                self.byzantine_true.len()
            )));
        }
        let n = self.honest.len() + self.f;
        if 2 * self.f >= n {
            return Err(Error::InvalidOutlierBudget {
                n,
                f: self.f,
                reason: "attacks need f < n/2",
            });
        }
        Ok(())
    }
}

/// The `f` Byzantine vectors of one round.
pub fn craft(spec: &AttackSpec, ctx: &mut AttackContext<'_>) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    ctx.validate()?;
    let f = ctx.f;
    if f == 0 {
        return Ok(Vec::new());
    }
    let d = ctx.dim();
    let honest_mean = geometry::centroid(ctx.honest)?;
    let out = match spec {
        AttackSpec::None | AttackSpec::LabelFlip { .. } => (0..f).map(|i| ctx.true_update(i).to_vec()).collect(),
        AttackSpec::Sf => (0..f).map(|i| geometry::scale(ctx.true_update(i), -1.0)).collect(),
        AttackSpec::Gauss { seed } => {
            let norms: Vec<f64> = (0..f).map(|i| geometry::norm(ctx.true_update(i))).collect();
            let mut own;
            let rng: &mut ChaCha8Rng = match seed {
                Some(s) => {
                    own = ChaCha8Rng::seed_from_u64(mix_seed(&[*s, ctx.round]));
                    &mut own
                }
                None => ctx.rng,
            };
            let mut out = Vec::with_capacity(f);
            for target in norms {
                let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let len = geometry::norm(&g);
                out.push(if len > 0.0 { geometry::scale(&g, target / len) } else { g });
            }
            out
        }
        AttackSpec::Omn { baseline } => {
            let corrupted: Vec<&[f64]> = (0..f).map(|i| ctx.true_update(i)).collect();
            let corrupted_mean = geometry::centroid(&corrupted)?;
            let base = match baseline {
                OmnBaseline::HonestOnly => honest_mean.clone(),
                OmnBaseline::AllWorkers => {
                    let all: Vec<&[f64]> = ctx.honest.iter().map(Vec::as_slice).chain(corrupted).collect();
                    geometry::centroid(&all)?
                }
            };
            let n = (ctx.honest.len() + f) as f64;
            let mut b = base;
            geometry::axpy(&mut b, -2.0 * n / f as f64, &corrupted_mean);
            vec![b; f]
        }
        AttackSpec::Empire { factor } => vec![geometry::scale(&honest_mean, *factor); f],
        AttackSpec::Sv { shift } => {
            let all: Vec<&[f64]> = ctx
                .honest
                .iter()
                .map(Vec::as_slice)
                .chain((0..f).map(|i| ctx.true_update(i)))
                .collect();
            let mean = geometry::centroid(&all)?;
            let count = all.len() as f64;
            let b: Vec<f64> = (0..d)
                .map(|k| {
                    let var = all.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / count;
                    mean[k] + shift * var.sqrt()
                })
                .collect();
            vec![b; f]
        }
        AttackSpec::Sneak { scale, direction } => {
            let u = attack_direction(direction.as_deref(), &honest_mean, d)?;
            let mut b = honest_mean.clone();
            geometry::axpy(&mut b, scale * honest_radius(ctx.honest, &honest_mean), &u);
            vec![b; f]
        }
        AttackSpec::Siege {
            scale_min,
            scale_max,
            angle_deg,
            direction,
        } => {
            let u = attack_direction(direction.as_deref(), &honest_mean, d)?;
            let radius = honest_radius(ctx.honest, &honest_mean);
            siege_placement(&honest_mean, &u, radius, f, *scale_min, *scale_max, angle_deg.to_radians())
        }
        AttackSpec::Pga {
            target,
            evaluations,
            range_factor,
        } => {
            let target = target
                .as_ref()
                .or(ctx.target)
                .cloned()
                .unwrap_or(AggregatorSpec::Avg);
            let (b, _) = pga_search(ctx, &target, &honest_mean, *evaluations, *range_factor)?;
            vec![b; f]
        }
    };
    if out.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("{} produced a non-finite vector", spec.name())));
    }
    Ok(out)
}

fn honest_radius(honest: &[Vec<f64>], mean: &[f64]) -> f64 {
    honest.iter().map(|x| geometry::dist(x, mean)).fold(0.0, f64::max)
}

/// Unit attack direction: the configured one, else against the honest
/// mean, else the first coordinate axis.
fn attack_direction(configured: Option<&[f64]>, honest_mean: &[f64], d: usize) -> Result<Vec<f64>> {
    let raw = match configured {
        Some(v) if v.len() != d => {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.len(),
            })
        }
        Some(v) => v.to_vec(),
        None => geometry::scale(honest_mean, -1.0),
    };
    let len = geometry::norm(&raw);
    if len > 0.0 && len.is_finite() {
        Ok(geometry::scale(&raw, 1.0 / len))
    } else {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        Ok(e)
    }
}

/// Orthonormal vectors perpendicular to unit `u`, by Gram-Schmidt over the
/// coordinate axes.
fn orthonormal_complement(u: &[f64], count: usize) -> Vec<Vec<f64>> {
    let d = u.len();
    let mut basis: Vec<Vec<f64>> = vec![u.to_vec()];
    for axis in 0..d {
        if basis.len() > count {
            break;
        }
        let mut e = vec![0.0; d];
        e[axis] = 1.0;
        for b in &basis {
            let p = geometry::dot(&e, b);
            geometry::axpy(&mut e, -p, b);
        }
        let len = geometry::norm(&e);
        if len > 1e-6 {
            basis.push(geometry::scale(&e, 1.0 / len));
        }
    }
    basis.remove(0);
    basis
}

fn siege_placement(
    mean: &[f64],
    u: &[f64],
    radius: f64,
    f: usize,
    scale_min: f64,
    scale_max: f64,
    angle: f64,
) -> Vec<Vec<f64>> {
    let d = u.len();
    let step = |k: usize| if f > 1 { k as f64 / (f - 1) as f64 } else { 0.0 };
    if d == 1 {
        return (0..f)
            .map(|k| geometry::add(mean, &geometry::scale(u, radius * (scale_min + (scale_max - scale_min) * step(k)))))
            .collect();
    }
    // one perpendicular per vector when there is room, otherwise a fan in a plane
    let spread = if d > f {
        orthonormal_complement(u, f)
    } else {
        vec![orthonormal_complement(u, 1)[0].clone(); f]
    };
    (0..f)
        .map(|k| {
            let r = radius * (scale_min + (scale_max - scale_min) * step(k));
            let phi = if d > f {
                angle
            } else {
                -angle + 2.0 * angle * step(k)
            };
            let dir: Vec<f64> = u
                .iter()
                .zip(&spread[k])
                .map(|(a, b)| phi.cos() * a + phi.sin() * b)
                .collect();
            geometry::add(mean, &geometry::scale(&dir, r))
        })
        .collect()
}

/// Step search for PGA. Evaluates a uniform grid over
/// `[0, range_factor * ||mean||]`, then spends the remaining evaluations on a
/// golden-section refinement around the best grid point. Returns the vector
/// and the displacement it achieves.
fn pga_search(
    ctx: &AttackContext<'_>,
    target: &AggregatorSpec,
    honest_mean: &[f64],
    evaluations: usize,
    range_factor: f64,
) -> Result<(Vec<f64>, f64)> {
    let sign = |x: f64| if x == 0.0 { 0.0 } else { x.signum() };
    let w: Vec<f64> = honest_mean.iter().map(|&x| -sign(x)).collect();
    let candidate = |gamma: f64| {
        let mut b = honest_mean.to_vec();
        geometry::axpy(&mut b, -gamma, &w);
        b
    };
    let displacement = |gamma: f64| -> Result<f64> {
        let b = candidate(gamma);
        let mut all = ctx.honest.to_vec();
        all.extend(std::iter::repeat_n(b, ctx.f));
        let set = VectorSet::new(all, ctx.server_f)?;
        Ok(geometry::dist(&aggregate(target, &set)?, honest_mean))
    };
    let hi = range_factor * geometry::norm(honest_mean);
    let grid = (evaluations * 3 / 5).max(2);
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut values = Vec::with_capacity(grid);
    for k in 0..grid {
        let g = hi * k as f64 / (grid - 1) as f64;
        let v = displacement(g)?;
        values.push(v);
        if v > best.0 {
            best = (v, g);
        }
    }
    let spacing = hi / (grid - 1) as f64;
    let (mut a, mut b) = ((best.1 - spacing).max(0.0), (best.1 + spacing).min(hi));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut remaining = evaluations.saturating_sub(grid);
    if remaining >= 2 && b > a {
        let mut c = b - ratio * (b - a);
        let mut e = a + ratio * (b - a);
        let mut vc = displacement(c)?;
        let mut ve = displacement(e)?;
        remaining -= 2;
        for (g, v) in [(c, vc), (e, ve)] {
            if v > best.0 {
                best = (v, g);
            }
        }
        while remaining > 0 {
            if vc >= ve {
                b = e;
                e = c;
                ve = vc;
                c = b - ratio * (b - a);
                vc = displacement(c)?;
                if vc > best.0 {
                    best = (vc, c);
                }
            } else {
                a = c;
                c = e;
                vc = ve;
                e = a + ratio * (b - a);
                ve = displacement(e)?;
                if ve > best.0 {
                    best = (ve, e);
                }
            }
            remaining -= 1;
        }
    }
    Ok((candidate(best.1), best.0))
}

/// Choice between the two proposals of the voting phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    First,
    Second,
}

/// Byzantine vote: the proposal with the larger loss, the second one on
/// ties. NaN losses count as infinite.
pub fn byzantine_vote(first_loss: f64, second_loss: f64) -> Vote {
    let clean = |x: f64| if x.is_nan() { f64::INFINITY } else { x };
    if clean(first_loss) > clean(second_loss) {
        Vote::First
    } else {
        Vote::Second
    }
}

pub fn check_permutation(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::NotABijection(perm.len()));
        }
        seen[p] = true;
    }
    Ok(())
}

/// The default flipping permutation `y -> C - 1 - y`.
pub fn reversal(classes: usize) -> Vec<usize> {
    (0..classes).rev().collect()
}

/// Copy of `dataset` with every label `y` replaced by `perm[y]`.
pub fn label_flip(dataset: &Dataset, perm: &[usize]) -> Result<Dataset> {
    check_permutation(perm)?;
    if perm.len() != dataset.classes {
        return Err(Error::NotABijection(dataset.classes));
    }
    let mut out = dataset.clone();
    for y in &mut out.labels {
        *y = perm[*y];
    }
    Ok(out)
}

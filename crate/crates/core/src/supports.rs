//! Conic-representable support families in the embedded uncertainty space:
//! bounding boxes, eta functions (maximal partial l1 mass), maximum grid
//! distances, and permutation-invariant circumscriptions.

use crate::program::{ConicProgram, RowSense, RowTag, Sense};
use crate::solver;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SupportError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("norm order must satisfy p >= 1, got {0}")]
    BadNormOrder(f64),
    #[error("radius must be positive")]
    BadRadius,
    #[error("box bounds are reversed in dim {dim}")]
    BadBox { dim: usize },
    #[error("eta list is empty or lengths differ")]
    BadEtaList,
    #[error("eta must start at zero and be nondecreasing")]
    BadEta,
    #[error("rectangle entry is negative")]
    NegativeRectangle,
    #[error("rectangle entries must be sorted nondecreasing")]
    UnsortedRectangle,
    #[error("eta function is not flagged permutation invariant")]
    NotPermutationInvariant,
    #[error("support set is unbounded")]
    Unbounded,
    #[error("membership rows are unavailable for this support kind")]
    UnsupportedKind,
    #[error("rejection sampler failed to hit the set")]
    SampleFailed,
    #[error("solver error while bounding a polytope: {0}")]
    Solver(#[from] solver::SolverError),
}

/// Norm order for ball supports. `Other` is usable for eta computations but
/// has no exact conic rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PNorm {
    One,
    Two,
    Inf,
    Other(f64),
}

impl PNorm {
    fn order(&self) -> f64 {
        match self {
            PNorm::One => 1.0,
            PNorm::Two => 2.0,
            PNorm::Inf => f64::INFINITY,
            PNorm::Other(p) => *p,
        }
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        match self {
            PNorm::One => v.iter().map(|x| x.abs()).sum(),
            PNorm::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            PNorm::Inf => v.iter().map(|x| x.abs()).fold(0.0, f64::max),
            PNorm::Other(p) => v.iter().map(|x| x.abs().powf(*p)).sum::<f64>().powf(1.0 / p),
        }
    }
}

/// A compact conic-representable subset of the embedded space.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SupportSet {
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    NormBall {
        p: PNorm,
        radius: f64,
        center: Vec<f64>,
    },
    /// `{theta : a theta <= b}` with each row of `a` stored densely.
    Polytope {
        rows: Vec<Vec<f64>>,
        rhs: Vec<f64>,
        dim: usize,
    },
    Intersection {
        members: Vec<SupportSet>,
    },
}

impl SupportSet {
    pub fn ball(p: PNorm, radius: f64, dim: usize) -> Result<Self, SupportError> {
        if p.order() < 1.0 {
            return Err(SupportError::BadNormOrder(p.order()));
        }
        if radius <= 0.0 {
            return Err(SupportError::BadRadius);
        }
        Ok(SupportSet::NormBall {
            p,
            radius,
            center: vec![0.0; dim],
        })
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, SupportError> {
        for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if l > u {
                return Err(SupportError::BadBox { dim: i });
            }
        }
        Ok(SupportSet::Box { lower, upper })
    }

    pub fn dim(&self) -> usize {
        match self {
            SupportSet::Box { lower, .. } => lower.len(),
            SupportSet::NormBall { center, .. } => center.len(),
            SupportSet::Polytope { dim, .. } => *dim,
            SupportSet::Intersection { members } => members.first().map_or(0, |m| m.dim()),
        }
    }

    pub fn contains(&self, theta: &[f64], tol: f64) -> bool {
        match self {
            SupportSet::Box { lower, upper } => theta
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(&t, (&l, &u))| t >= l - tol && t <= u + tol),
            SupportSet::NormBall { p, radius, center } => {
                let d: Vec<f64> = theta.iter().zip(center).map(|(t, c)| t - c).collect();
                p.norm(&d) <= radius + tol
            }
            SupportSet::Polytope { rows, rhs, .. } => rows.iter().zip(rhs).all(|(a, &b)| {
                a.iter().zip(theta).map(|(x, y)| x * y).sum::<f64>() <= b + tol
            }),
            SupportSet::Intersection { members } => {
                members.iter().all(|m| m.contains(theta, tol))
            }
        }
    }

    /// Draw a point of the set. Balls and boxes sample uniformly; polytopes
    /// and intersections use rejection from the bounding box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Vec<f64>, SupportError> {
        match self {
            SupportSet::Box { lower, upper } => Ok(lower
                .iter()
                .zip(upper)
                .map(|(&l, &u)| if l == u { l } else { rng.gen_range(l..u) })
                .collect()),
            SupportSet::NormBall { p, radius, center } => {
                let n = center.len();
                let dir: Vec<f64> = match p {
                    PNorm::Inf => {
                        return Ok(center
                            .iter()
                            .map(|c| c + radius * rng.gen_range(-1.0..1.0))
                            .collect());
                    }
                    PNorm::Two => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
                    PNorm::One => (0..n)
                        .map(|_| {
                            let e: f64 = rand_distr::Exp1.sample(rng);
                            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                            sign * e
                        })
                        .collect(),
                    PNorm::Other(ord) => {
                        let gamma = Gamma::new(1.0 / ord, 1.0).expect("valid gamma");
                        (0..n)
                            .map(|_| {
                                let g: f64 = gamma.sample(rng);
                                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                                sign * g.powf(1.0 / ord)
                            })
                            .collect()
                    }
                };
                let nrm = p.norm(&dir).max(1e-300);
                let r = radius * rng.gen_range(0.0f64..1.0).powf(1.0 / n as f64);
                Ok(center
                    .iter()
                    .zip(&dir)
                    .map(|(c, d)| c + r * d / nrm)
                    .collect())
            }
            SupportSet::Polytope { .. } | SupportSet::Intersection { .. } => {
                let (lo, hi) = self.bounding_box()?;
                for _ in 0..20_000 {
                    let cand: Vec<f64> = lo
                        .iter()
                        .zip(&hi)
                        .map(|(&l, &u)| if l == u { l } else { rng.gen_range(l..u) })
                        .collect();
                    if self.contains(&cand, 1e-12) {
                        return Ok(cand);
                    }
                }
                Err(SupportError::SampleFailed)
            }
        }
    }

    /// Tight componentwise bounds: closed form for boxes and balls, a pair
    /// of LPs per dimension for polytopes, and the (possibly loose)
    /// intersection of member boxes otherwise.
    pub fn bounding_box(&self) -> Result<(Vec<f64>, Vec<f64>), SupportError> {
        match self {
            SupportSet::Box { lower, upper } => Ok((lower.clone(), upper.clone())),
            SupportSet::NormBall { radius, center, .. } => Ok((
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            )),
            SupportSet::Polytope { rows, rhs, dim } => {
                let mut lo = vec![0.0; *dim];
                let mut hi = vec![0.0; *dim];
                for k in 0..*dim {
                    for (sense, out) in [(Sense::Minimize, &mut lo), (Sense::Maximize, &mut hi)] {
                        let mut p = ConicProgram::new(sense);
                        for j in 0..*dim {
                            p.add_var(format!("t{j}"), false);
                        }
                        p.set_obj(k, 1.0);
                        for (a, &b) in rows.iter().zip(rhs) {
                            let coeffs = a
                                .iter()
                                .enumerate()
                                .filter(|(_, v)| v.abs() > 0.0)
                                .map(|(j, &v)| (j, v))
                                .collect();
                            p.add_row(coeffs, RowSense::Le, b, RowTag::General);
                        }
                        let r = solver::bundled_lp_solve(&p)?;
                        match r.status {
                            solver::SolveStatus::Optimal => out[k] = r.primal[k],
                            solver::SolveStatus::Unbounded => {
                                return Err(SupportError::Unbounded)
                            }
                            s => return Err(SupportError::Solver(
                                solver::SolverError::NotOptimal(s),
                            )),
                        }
                    }
                }
                Ok((lo, hi))
            }
            SupportSet::Intersection { members } => {
                let mut lo = vec![f64::NEG_INFINITY; self.dim()];
                let mut hi = vec![f64::INFINITY; self.dim()];
                for m in members {
                    let (ml, mh) = m.bounding_box()?;
                    for i in 0..lo.len() {
                        lo[i] = lo[i].max(ml[i]);
                        hi[i] = hi[i].min(mh[i]);
                    }
                }
                for i in 0..lo.len() {
                    if lo[i] > hi[i] || !lo[i].is_finite() || !hi[i].is_finite() {
                        return Err(SupportError::BadBox { dim: i });
                    }
                }
                Ok((lo, hi))
            }
        }
    }

    /// Eta function of the set when a closed form is known: balls, boxes
    /// that are origin-symmetric cubes, and intersections of such.
    pub fn eta(&self, dims: usize) -> Option<EtaFunction> {
        match self {
            SupportSet::NormBall { p, radius, center } => {
                if center.iter().any(|c| c.abs() > 1e-12) {
                    return None;
                }
                eta_norm_ball(*p, *radius, dims).ok()
            }
            SupportSet::Box { lower, upper } => {
                let a = upper[0];
                let uniform = lower
                    .iter()
                    .zip(upper)
                    .all(|(&l, &u)| (l + a).abs() < 1e-12 && (u - a).abs() < 1e-12);
                if uniform && a > 0.0 {
                    eta_norm_ball(PNorm::Inf, a, dims).ok()
                } else {
                    None
                }
            }
            SupportSet::Intersection { members } => {
                let etas: Option<Vec<EtaFunction>> =
                    members.iter().map(|m| m.eta(dims)).collect();
                eta_intersection(&etas?).ok()
            }
            SupportSet::Polytope { .. } => None,
        }
    }

    /// Outer polyhedral approximation of a 2-norm ball by tangent planes in
    /// every coordinate 2-plane, for backends without second-order cones.
    pub fn polyhedral_ball_approx(&self, facets: usize) -> Result<SupportSet, SupportError> {
        let SupportSet::NormBall {
            p: PNorm::Two,
            radius,
            center,
        } = self
        else {
            return Err(SupportError::UnsupportedKind);
        };
        let n = center.len();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        if n == 1 {
            rows.push(vec![1.0]);
            rhs.push(center[0] + radius);
            rows.push(vec![-1.0]);
            rhs.push(-(center[0] - radius));
        }
        for i1 in 0..n {
            for i2 in (i1 + 1)..n {
                for k in 0..facets {
                    let ang = 2.0 * std::f64::consts::PI * k as f64 / facets as f64;
                    let (s, c) = ang.sin_cos();
                    let mut row = vec![0.0; n];
                    row[i1] = c;
                    row[i2] = s;
                    rhs.push(radius + c * center[i1] + s * center[i2]);
                    rows.push(row);
                }
            }
        }
        Ok(SupportSet::Polytope { rows, rhs, dim: n })
    }
}

/// Maximal l1 mass of the first `i` components over a support set,
/// `eta(0) = 0`. When flagged permutation invariant its increments are
/// nonincreasing, which the exact separation algorithm relies on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaFunction {
    values: Vec<f64>,
    perm_invariant: bool,
}

impl EtaFunction {
    pub fn new(values: Vec<f64>, perm_invariant: bool) -> Result<Self, SupportError> {
        if values.is_empty() || values[0] != 0.0 {
            return Err(SupportError::BadEta);
        }
        for w in values.windows(2) {
            if w[1] < w[0] - 1e-12 {
                return Err(SupportError::BadEta);
            }
        }
        if perm_invariant {
            for i in 1..values.len() - 1 {
                let d1 = values[i] - values[i - 1];
                let d2 = values[i + 1] - values[i];
                if d2 > d1 + 1e-9 {
                    return Err(SupportError::NotPermutationInvariant);
                }
            }
        }
        Ok(EtaFunction {
            values,
            perm_invariant,
        })
    }

    /// Number of stored values, i.e. `I + 1`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.values.len() - 1
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn increment(&self, i: usize) -> f64 {
        self.values[i] - self.values[i - 1]
    }

    pub fn is_permutation_invariant(&self) -> bool {
        self.perm_invariant
    }

    /// Strictly decreasing increments, the condition under which square
    /// cuts alone solve the separation problem.
    pub fn has_strictly_decreasing_increments(&self) -> bool {
        (1..self.dims()).all(|i| self.increment(i + 1) < self.increment(i) - 1e-12)
    }
}

/// Eta function of a p-norm ball: `eta(i) = i^(1 - 1/p) * radius`.
pub fn eta_norm_ball(p: PNorm, radius: f64, dims: usize) -> Result<EtaFunction, SupportError> {
    let ord = p.order();
    if ord < 1.0 {
        return Err(SupportError::BadNormOrder(ord));
    }
    if radius <= 0.0 {
        return Err(SupportError::BadRadius);
    }
    let expo = if ord.is_infinite() { 1.0 } else { 1.0 - 1.0 / ord };
    let values = (0..=dims)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                (i as f64).powf(expo) * radius
            }
        })
        .collect();
    EtaFunction::new(values, true)
}

/// Pointwise minimum of eta functions (the eta of the intersection).
pub fn eta_intersection(etas: &[EtaFunction]) -> Result<EtaFunction, SupportError> {
    let Some(first) = etas.first() else {
        return Err(SupportError::BadEtaList);
    };
    if etas.iter().any(|e| e.len() != first.len()) {
        return Err(SupportError::BadEtaList);
    }
    let values = (0..first.len())
        .map(|i| {
            etas.iter()
                .map(|e| e.value(i))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let flag = etas.iter().all(|e| e.is_permutation_invariant());
    EtaFunction::new(values, flag)
}

/// Eta of the permutation-invariant circumscription of a box: sort the
/// per-dimension absolute reaches descending and prefix-sum them. The
/// resulting set (all points whose sorted absolute values are dominated by
/// the sorted reaches) contains the box and has nonincreasing increments by
/// construction.
pub fn eta_box_circumscription(lower: &[f64], upper: &[f64]) -> EtaFunction {
    let mut reach: Vec<f64> = lower
        .iter()
        .zip(upper)
        .map(|(&l, &u)| l.abs().max(u.abs()))
        .collect();
    reach.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut values = Vec::with_capacity(reach.len() + 1);
    values.push(0.0);
    let mut acc = 0.0;
    for r in reach {
        acc += r;
        values.push(acc);
    }
    EtaFunction::new(values, true).expect("prefix sums of sorted reaches are a valid eta")
}

/// Maximum l1 distance from a symmetric support (given by eta) to the
/// origin-symmetric rectangle `[-zplus, zplus]` with nondecreasing entries.
pub fn dbar_symmetric(eta: &EtaFunction, zplus_sorted: &[f64]) -> Result<f64, SupportError> {
    if !eta.is_permutation_invariant() {
        return Err(SupportError::NotPermutationInvariant);
    }
    if zplus_sorted.len() != eta.dims() {
        return Err(SupportError::DimMismatch {
            expected: eta.dims(),
            got: zplus_sorted.len(),
        });
    }
    if zplus_sorted.iter().any(|&z| z < 0.0) {
        return Err(SupportError::NegativeRectangle);
    }
    if zplus_sorted.windows(2).any(|w| w[1] < w[0]) {
        return Err(SupportError::UnsortedRectangle);
    }
    let mut best = f64::NEG_INFINITY;
    let mut prefix = 0.0;
    for i in 1..=eta.dims() {
        prefix += zplus_sorted[i - 1];
        best = best.max(eta.value(i) - prefix);
    }
    Ok(best)
}

/// Exact maximum l1 distance from a permutation-invariant support to an
/// arbitrary grid rectangle `[zminus, zplus]`.
///
/// Per coordinate the farthest sign choice contributes
/// `(|theta_i| - min(zplus_i, -zminus_i))_+`, so the maximum over the set is
/// `max_n eta(n) - (sum of the n smallest of those thresholds)`, including
/// the empty selection.
pub fn dbar_perm_invariant(
    eta: &EtaFunction,
    zminus: &[f64],
    zplus: &[f64],
) -> Result<f64, SupportError> {
    if !eta.is_permutation_invariant() {
        return Err(SupportError::NotPermutationInvariant);
    }
    if zminus.len() != eta.dims() || zplus.len() != eta.dims() {
        return Err(SupportError::DimMismatch {
            expected: eta.dims(),
            got: zminus.len(),
        });
    }
    let mut thresholds: Vec<f64> = zplus
        .iter()
        .zip(zminus)
        .map(|(&zp, &zm)| zp.min(-zm))
        .collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = 0.0_f64;
    let mut prefix = 0.0;
    for n in 1..=eta.dims() {
        prefix += thresholds[n - 1];
        best = best.max(eta.value(n) - prefix);
    }
    Ok(best)
}

/// Exact maximum l1 distance from a box support to a rectangle, separable
/// per dimension.
pub fn dbar_box(
    box_lower: &[f64],
    box_upper: &[f64],
    rect_lower: &[f64],
    rect_upper: &[f64],
) -> Result<f64, SupportError> {
    if box_lower.len() != rect_lower.len() {
        return Err(SupportError::DimMismatch {
            expected: box_lower.len(),
            got: rect_lower.len(),
        });
    }
    Ok(box_lower
        .iter()
        .zip(box_upper)
        .zip(rect_lower.iter().zip(rect_upper))
        .map(|((&l, &u), (&zl, &zu))| (u - zu).max(0.0).max((zl - l).max(0.0)))
        .sum())
}

/// A family of embedded support subsets with their bounding boxes and the
/// componentwise union box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportFamily {
    subsets: Vec<SupportSet>,
    boxes: Vec<(Vec<f64>, Vec<f64>)>,
    global_lower: Vec<f64>,
    global_upper: Vec<f64>,
}

impl SupportFamily {
    pub fn new(subsets: Vec<SupportSet>) -> Result<Self, SupportError> {
        if subsets.is_empty() {
            return Err(SupportError::BadEtaList);
        }
        let dim = subsets[0].dim();
        let mut boxes = Vec::with_capacity(subsets.len());
        let mut global_lower = vec![f64::INFINITY; dim];
        let mut global_upper = vec![f64::NEG_INFINITY; dim];
        for s in &subsets {
            if s.dim() != dim {
                return Err(SupportError::DimMismatch {
                    expected: dim,
                    got: s.dim(),
                });
            }
            let (lo, hi) = s.bounding_box()?;
            for i in 0..dim {
                global_lower[i] = global_lower[i].min(lo[i]);
                global_upper[i] = global_upper[i].max(hi[i]);
            }
            boxes.push((lo, hi));
        }
        Ok(SupportFamily {
            subsets,
            boxes,
            global_lower,
            global_upper,
        })
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.global_lower.len()
    }

    pub fn subset(&self, g: usize) -> &SupportSet {
        &self.subsets[g]
    }

    pub fn subset_box(&self, g: usize) -> (&[f64], &[f64]) {
        (&self.boxes[g].0, &self.boxes[g].1)
    }

    pub fn global_bounds(&self) -> (&[f64], &[f64]) {
        (&self.global_lower, &self.global_upper)
    }

    /// Exact maximum grid distance of subset `g` to a rectangle, available
    /// for box supports and centered permutation-invariant ones.
    pub fn exact_dbar(
        &self,
        g: usize,
        rect_lower: &[f64],
        rect_upper: &[f64],
    ) -> Result<f64, SupportError> {
        match &self.subsets[g] {
            SupportSet::Box { lower, upper } => dbar_box(lower, upper, rect_lower, rect_upper),
            set => {
                let eta = set.eta(self.dim()).ok_or(SupportError::UnsupportedKind)?;
                dbar_perm_invariant(&eta, rect_lower, rect_upper)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eta_norm_ball_examples() {
        let e = eta_norm_ball(PNorm::Two, 1.0, 4).unwrap();
        assert!((e.value(4) - 2.0).abs() < 1e-12);
        let e = eta_norm_ball(PNorm::One, 5.0, 3).unwrap();
        assert!((e.value(3) - 5.0).abs() < 1e-12);
        let e = eta_norm_ball(PNorm::Inf, 1.0, 2).unwrap();
        assert!((e.value(2) - 2.0).abs() < 1e-12);
        assert!(eta_norm_ball(PNorm::Other(0.5), 1.0, 2).is_err());
    }

    #[test]
    fn eta_intersection_examples() {
        let a = eta_norm_ball(PNorm::Two, 1.0, 1).unwrap();
        let b = eta_norm_ball(PNorm::Inf, 0.9, 1).unwrap();
        let e = eta_intersection(&[a, b]).unwrap();
        assert!((e.value(1) - 0.9).abs() < 1e-12);

        let a = eta_norm_ball(PNorm::One, 5.0, 4).unwrap();
        let b = eta_norm_ball(PNorm::Two, 1.0, 4).unwrap();
        let e = eta_intersection(&[a, b]).unwrap();
        assert!((e.value(4) - 2.0).abs() < 1e-12);

        let solo = eta_norm_ball(PNorm::Two, 1.0, 3).unwrap();
        assert_eq!(eta_intersection(&[solo.clone()]).unwrap(), solo);
        assert!(eta_intersection(&[]).is_err());
    }

    #[test]
    fn eta_increments_nonincreasing_for_p_family() {
        for p in [PNorm::One, PNorm::Other(1.5), PNorm::Two, PNorm::Other(3.0), PNorm::Inf] {
            let e = eta_norm_ball(p, 1.3, 6).unwrap();
            for i in 1..6 {
                assert!(e.increment(i + 1) <= e.increment(i) + 1e-12, "{p:?}");
            }
        }
    }

    #[test]
    fn bounding_boxes() {
        let ball = SupportSet::ball(PNorm::Two, 1.0, 2).unwrap();
        let (lo, hi) = ball.bounding_box().unwrap();
        assert_eq!(lo, vec![-1.0, -1.0]);
        assert_eq!(hi, vec![1.0, 1.0]);

        let b = SupportSet::boxed(vec![0.0, 2.0], vec![1.0, 3.0]).unwrap();
        let (lo, hi) = b.bounding_box().unwrap();
        assert_eq!((lo, hi), (vec![0.0, 2.0], vec![1.0, 3.0]));

        // Simplex {theta1 + theta2 <= 1, theta >= 0} -> [0,1]^2 via LPs.
        let poly = SupportSet::Polytope {
            rows: vec![vec![1.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]],
            rhs: vec![1.0, 0.0, 0.0],
            dim: 2,
        };
        let (lo, hi) = poly.bounding_box().unwrap();
        assert!(lo.iter().all(|v| v.abs() < 1e-9));
        assert!(hi.iter().all(|v| (v - 1.0).abs() < 1e-9));

        // Unbounded polytope is an error.
        let open = SupportSet::Polytope {
            rows: vec![vec![-1.0, 0.0]],
            rhs: vec![0.0],
            dim: 2,
        };
        assert!(matches!(
            open.bounding_box(),
            Err(SupportError::Unbounded)
        ));
    }

    #[test]
    fn bounding_box_contains_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sets = vec![
            SupportSet::ball(PNorm::Two, 1.5, 3).unwrap(),
            SupportSet::ball(PNorm::One, 2.0, 3).unwrap(),
            SupportSet::ball(PNorm::Inf, 0.7, 3).unwrap(),
            SupportSet::boxed(vec![-1.0, 0.0, 2.0], vec![1.0, 0.5, 2.5]).unwrap(),
            SupportSet::Intersection {
                members: vec![
                    SupportSet::ball(PNorm::Two, 1.0, 3).unwrap(),
                    SupportSet::ball(PNorm::Inf, 0.8, 3).unwrap(),
                ],
            },
        ];
        for set in &sets {
            let (lo, hi) = set.bounding_box().unwrap();
            for _ in 0..1000 {
                let x = set.sample(&mut rng).unwrap();
                assert!(set.contains(&x, 1e-9));
                for i in 0..x.len() {
                    assert!(x[i] >= lo[i] - 1e-9 && x[i] <= hi[i] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn dbar_symmetric_examples() {
        let e2 = eta_norm_ball(PNorm::Two, 1.0, 2).unwrap();
        let v = dbar_symmetric(&e2, &[0.0, 0.0]).unwrap();
        assert!((v - 2.0_f64.sqrt()).abs() < 1e-12);

        let einf = eta_norm_ball(PNorm::Inf, 1.0, 2).unwrap();
        assert!(dbar_symmetric(&einf, &[1.0, 1.0]).unwrap().abs() < 1e-12);

        let einf3 = eta_norm_ball(PNorm::Inf, 1.0, 3).unwrap();
        let v = dbar_symmetric(&einf3, &[0.0, 0.0, 1.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);

        assert!(dbar_symmetric(&einf, &[-0.1, 1.0]).is_err());
        assert!(dbar_symmetric(&einf, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn dbar_symmetric_matches_dense_samples() {
        // Never underestimates the sampled max, and comes within 1e-3 of it.
        let eta = eta_norm_ball(PNorm::Two, 1.0, 2).unwrap();
        for zp in [[0.0, 0.0], [0.0, 0.5], [0.3, 0.9]] {
            let formula = dbar_symmetric(&eta, &zp).unwrap();
            let mut best = f64::NEG_INFINITY;
            let n = 200_000;
            for k in 0..n {
                let ang = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let (s, c) = ang.sin_cos();
                let d: f64 = [c, s]
                    .iter()
                    .zip(&zp)
                    .map(|(&t, &z): (&f64, &f64)| {
                        (t - z).max(0.0) + (-z - t).max(0.0)
                    })
                    .sum();
                best = best.max(d);
            }
            assert!(best <= formula + 1e-9, "sample exceeded formula");
            assert!(best >= formula - 1e-3, "formula too loose: {formula} vs {best}");
        }
    }

    #[test]
    fn dbar_box_examples() {
        let v = dbar_box(&[0.0, 0.0], &[2.0, 2.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let v = dbar_box(&[0.0, 0.0], &[1.0, 1.0], &[-1.0, -1.0], &[2.0, 2.0]).unwrap();
        assert!(v.abs() < 1e-12);
        let v = dbar_box(&[-1.0, -1.0], &[-1.0, -1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dbar_box_sound_and_tight_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        for _ in 0..50 {
            let l: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..0.0)).collect();
            let u: Vec<f64> = l.iter().map(|x| x + rng.gen_range(0.0..3.0)).collect();
            let zl: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..1.0)).collect();
            let zu: Vec<f64> = zl.iter().map(|x| x + rng.gen_range(0.0..2.0)).collect();
            let d = dbar_box(&l, &u, &zl, &zu).unwrap();
            let set = SupportSet::boxed(l.clone(), u.clone()).unwrap();
            let mut attained = 0.0_f64;
            for _ in 0..500 {
                let x = set.sample(&mut rng).unwrap();
                let dist: f64 = x
                    .iter()
                    .zip(zl.iter().zip(&zu))
                    .map(|(&t, (&a, &b))| (a - t).max(0.0) + (t - b).max(0.0))
                    .sum();
                assert!(dist <= d + 1e-9);
                attained = attained.max(dist);
            }
            // A corner attains the max exactly.
            let corner: Vec<f64> = l
                .iter()
                .zip(&u)
                .zip(zl.iter().zip(&zu))
                .map(|((&li, &ui), (&a, &b))| {
                    if (ui - b).max(0.0) >= (a - li).max(0.0) {
                        ui
                    } else {
                        li
                    }
                })
                .collect();
            let corner_dist: f64 = corner
                .iter()
                .zip(zl.iter().zip(&zu))
                .map(|(&t, (&a, &b))| (a - t).max(0.0) + (t - b).max(0.0))
                .sum();
            assert!((corner_dist - d).abs() < 1e-9);
            let _ = attained;
        }
    }

    #[test]
    fn dbar_perm_invariant_reduces_to_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        let eta = eta_norm_ball(PNorm::Two, 1.3, 4).unwrap();
        for _ in 0..200 {
            let mut zp: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.3)).collect();
            zp.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let zm: Vec<f64> = zp.iter().map(|z| -z).collect();
            let a = dbar_symmetric(&eta, &zp).unwrap();
            let b = dbar_perm_invariant(&eta, &zm, &zp).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dbar_perm_invariant_matches_dense_samples_on_general_rects() {
        // 2-ball in the plane against off-center rectangles.
        let eta = eta_norm_ball(PNorm::Two, 1.0, 2).unwrap();
        for (zm, zp) in [
            (vec![0.0, -0.5], vec![0.5, 0.5]),
            (vec![0.5, 0.0], vec![1.0, 0.0]),
            (vec![-1.0, 0.3], vec![-0.2, 0.9]),
        ] {
            let formula = dbar_perm_invariant(&eta, &zm, &zp).unwrap();
            let mut best = f64::NEG_INFINITY;
            let n = 400_000;
            for k in 0..n {
                let ang = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let t = [ang.cos(), ang.sin()];
                let d: f64 = t
                    .iter()
                    .zip(zm.iter().zip(&zp))
                    .map(|(&x, (&a, &b))| (a - x).max(0.0) + (x - b).max(0.0))
                    .sum();
                best = best.max(d);
            }
            assert!(best <= formula + 1e-9, "sampled {best} above {formula}");
            assert!(best >= formula - 1e-3, "formula loose: {formula} vs {best}");
        }
    }

    #[test]
    fn eta_box_circumscription_examples() {
        let e = eta_box_circumscription(&[-1.0, -3.0], &[1.0, 3.0]);
        assert_eq!(
            (e.value(0), e.value(1), e.value(2)),
            (0.0, 3.0, 4.0)
        );
        let e = eta_box_circumscription(&[-1.0, -1.0], &[1.0, 1.0]);
        assert_eq!((e.value(1), e.value(2)), (1.0, 2.0));
        let e = eta_box_circumscription(&[0.5, -2.0], &[0.5, -2.0]);
        assert_eq!((e.value(1), e.value(2)), (2.0, 2.5));
    }

    #[test]
    fn circumscription_dominates_sampled_partial_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (l, u) = (vec![-1.0, -0.2, 0.5], vec![0.8, 0.9, 2.0]);
        let eta = eta_box_circumscription(&l, &u);
        let set = SupportSet::boxed(l, u).unwrap();
        for _ in 0..2000 {
            let x = set.sample(&mut rng).unwrap();
            let mut mags: Vec<f64> = x.iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut acc = 0.0;
            for (i, m) in mags.iter().enumerate() {
                acc += m;
                assert!(acc <= eta.value(i + 1) + 1e-9);
            }
        }
    }

    #[test]
    fn eta_brute_force_boundary_sampling() {
        // Formula vs dense boundary maxima for I <= 3.
        for p in [PNorm::One, PNorm::Other(1.5), PNorm::Two, PNorm::Other(3.0), PNorm::Inf] {
            let delta = 1.2;
            for dims in [2usize, 3] {
                let eta = eta_norm_ball(p, delta, dims).unwrap();
                for i in 1..=dims {
                    let mut best = f64::NEG_INFINITY;
                    // Indicator directions are boundary samples too and give
                    // the lattice the resolution the angle grid lacks.
                    for ones in 1..=dims {
                        let mut dir = vec![0.0; dims];
                        dir[..ones].fill(1.0);
                        let scale = delta / p.norm(&dir);
                        let s: f64 = dir[..i].iter().map(|d| d * scale).sum();
                        best = best.max(s);
                    }
                    let n: usize = if dims == 2 { 100_000 } else { 316 };
                    if dims == 2 {
                        for k in 0..n {
                            let ang = std::f64::consts::FRAC_PI_2 * k as f64 / n as f64;
                            let dir = [ang.cos(), ang.sin()];
                            let scale = delta / p.norm(&dir);
                            let s: f64 = dir[..i].iter().map(|d| d * scale).sum();
                            best = best.max(s);
                        }
                    } else {
                        for a in 0..n {
                            for b in 0..n {
                                let u = std::f64::consts::FRAC_PI_2 * a as f64 / n as f64;
                                let v = std::f64::consts::FRAC_PI_2 * b as f64 / n as f64;
                                let dir = [u.cos() * v.cos(), u.sin() * v.cos(), v.sin()];
                                let nrm = p.norm(&dir);
                                if nrm < 1e-9 {
                                    continue;
                                }
                                let scale = delta / nrm;
                                let s: f64 = dir[..i].iter().map(|d| d * scale).sum();
                                best = best.max(s);
                            }
                        }
                    }
                    let formula = eta.value(i);
                    assert!(best <= formula + 1e-9, "{p:?} i={i}");
                    assert!(
                        best >= formula - 1e-3,
                        "{p:?} i={i}: formula {formula} vs sampled {best}"
                    );
                }
            }
        }
    }

    #[test]
    fn family_boxes_nest_in_global() {
        let fam = SupportFamily::new(vec![
            SupportSet::boxed(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            SupportSet::ball(PNorm::Two, 0.5, 2).unwrap(),
        ])
        .unwrap();
        let (gl, gu) = fam.global_bounds();
        for g in 0..fam.len() {
            let (lo, hi) = fam.subset_box(g);
            for i in 0..2 {
                assert!(gl[i] <= lo[i] && hi[i] <= gu[i]);
            }
        }
        assert_eq!(gl, &[-0.5, -0.5]);
        assert_eq!(gu, &[1.0, 1.0]);
    }
}

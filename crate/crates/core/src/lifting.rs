//! Embedding, folding, retraction, and breakpoint-grid machinery, including
//! the polyhedral hull of a folded bounding box.
//!
//! The lifting runs in two steps: an information-preserving affine embedding
//! takes the raw uncertainty `psi in R^K` to `theta in R^I`, then the folding
//! operator splits every embedded coordinate along its breakpoints into
//! per-segment clamped increments. Affine functions of the folded vector are
//! piecewise affine functions of `psi`. Both steps have affine left
//! inverses, so the composition retracts exactly.

use crate::program::RowSense;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LiftingError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("breakpoints for dim {dim} must be strictly increasing inside the bounds")]
    BadBreakpoints { dim: usize },
    #[error("bounds for dim {dim} are empty or reversed")]
    BadBounds { dim: usize },
    #[error("box exceeds the grid bounds in dim {dim}")]
    BoxOutOfBounds { dim: usize },
    #[error("breakpoint count must be at least 1")]
    BadCount,
    #[error("bounds must be symmetric around zero for this construction (dim {dim})")]
    AsymmetricBounds { dim: usize },
    #[error("embedding matrix has no left inverse (rank deficient)")]
    RankDeficient,
    #[error("stage block {stage} reads columns of later stages")]
    NotCausal { stage: usize },
    #[error("autoregressive scale must be nonzero")]
    ZeroScale,
}

/// Per-dimension breakpoint grid over a box of embedded uncertainties.
///
/// The bounds act as sentinel grid values: dimension `i` carries values
/// `z_{i,0} < ... < z_{i,J_i}` where the first and last are the bounds and
/// the interior ones the breakpoints. Segment `s` (0-based) spans
/// `[z_{i,s}, z_{i,s+1}]` and maps to flat lifted index `offsets[i] + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSchema", into = "GridSchema")]
pub struct BreakpointGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    breakpoints: Vec<Vec<f64>>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize, Clone)]
struct GridSchema {
    bounds: Vec<[f64; 2]>,
    breakpoints: Vec<Vec<f64>>,
}

impl From<BreakpointGrid> for GridSchema {
    fn from(g: BreakpointGrid) -> Self {
        GridSchema {
            bounds: g
                .lower
                .iter()
                .zip(&g.upper)
                .map(|(&l, &u)| [l, u])
                .collect(),
            breakpoints: g.breakpoints,
        }
    }
}

impl TryFrom<GridSchema> for BreakpointGrid {
    type Error = LiftingError;
    fn try_from(s: GridSchema) -> Result<Self, LiftingError> {
        let lower = s.bounds.iter().map(|b| b[0]).collect();
        let upper = s.bounds.iter().map(|b| b[1]).collect();
        BreakpointGrid::new(lower, upper, s.breakpoints)
    }
}

impl BreakpointGrid {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        breakpoints: Vec<Vec<f64>>,
    ) -> Result<Self, LiftingError> {
        if lower.len() != upper.len() || lower.len() != breakpoints.len() {
            return Err(LiftingError::DimMismatch {
                expected: lower.len(),
                got: breakpoints.len(),
            });
        }
        for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !(l < u) {
                return Err(LiftingError::BadBounds { dim: i });
            }
            let mut prev = l;
            for &z in &breakpoints[i] {
                if !(z > prev) || !(z < u) {
                    return Err(LiftingError::BadBreakpoints { dim: i });
                }
                prev = z;
            }
        }
        let mut offsets = Vec::with_capacity(lower.len() + 1);
        offsets.push(0);
        for bp in &breakpoints {
            offsets.push(offsets.last().unwrap() + bp.len() + 1);
        }
        Ok(BreakpointGrid {
            lower,
            upper,
            breakpoints,
            offsets,
        })
    }

    /// Grid with no breakpoints; folding is affine within the bounds.
    pub fn trivial(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, LiftingError> {
        let dims = lower.len();
        BreakpointGrid::new(lower, upper, vec![Vec::new(); dims])
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Number of segments J_i in dimension `i`.
    pub fn segments(&self, i: usize) -> usize {
        self.breakpoints[i].len() + 1
    }

    /// Total lifted dimension N'.
    pub fn lifted_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Flat lifted index of segment `s` in dimension `i`.
    pub fn flat(&self, i: usize, s: usize) -> usize {
        debug_assert!(s < self.segments(i));
        self.offsets[i] + s
    }

    /// Grid value `z_{i,j}` for `j` in `0..=J_i` (bounds are sentinels).
    pub fn value(&self, i: usize, j: usize) -> f64 {
        let nseg = self.segments(i);
        debug_assert!(j <= nseg);
        if j == 0 {
            self.lower[i]
        } else if j == nseg {
            self.upper[i]
        } else {
            self.breakpoints[i][j - 1]
        }
    }

    /// All grid values of dimension `i`, bounds included.
    pub fn values(&self, i: usize) -> Vec<f64> {
        (0..=self.segments(i)).map(|j| self.value(i, j)).collect()
    }

    /// Single folded component for dimension `i`, segment `s`.
    pub fn fold_component(&self, i: usize, s: usize, theta_i: f64) -> f64 {
        let lo = self.value(i, s);
        let width = self.value(i, s + 1) - lo;
        (theta_i - lo).clamp(0.0, width)
    }

    /// True when every dimension has the same origin-symmetric grid with an
    /// even number of segments (so zero is a grid value).
    pub fn is_permutation_invariant(&self, tol: f64) -> bool {
        let j = self.segments(0);
        if j % 2 != 0 {
            return false;
        }
        let reference = self.values(0);
        for i in 0..self.dims() {
            if self.segments(i) != j {
                return false;
            }
            let vals = self.values(i);
            for (a, b) in vals.iter().zip(&reference) {
                if (a - b).abs() > tol {
                    return false;
                }
            }
            for k in 0..=j {
                if (vals[k] + vals[j - k]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Folding operator: clamp each embedded coordinate into its segments.
pub fn fold(grid: &BreakpointGrid, theta: &[f64]) -> Result<Vec<f64>, LiftingError> {
    if theta.len() != grid.dims() {
        return Err(LiftingError::DimMismatch {
            expected: grid.dims(),
            got: theta.len(),
        });
    }
    let mut out = Vec::with_capacity(grid.lifted_dim());
    for (i, &t) in theta.iter().enumerate() {
        for s in 0..grid.segments(i) {
            out.push(grid.fold_component(i, s, t));
        }
    }
    Ok(out)
}

/// Summing left inverse of the folding operator.
pub fn fold_plus(grid: &BreakpointGrid, lifted: &[f64]) -> Result<Vec<f64>, LiftingError> {
    if lifted.len() != grid.lifted_dim() {
        return Err(LiftingError::DimMismatch {
            expected: grid.lifted_dim(),
            got: lifted.len(),
        });
    }
    let mut out = Vec::with_capacity(grid.dims());
    for i in 0..grid.dims() {
        let base = grid.offsets[i];
        let sum: f64 = (0..grid.segments(i)).map(|s| lifted[base + s]).sum();
        out.push(grid.lower[i] + sum);
    }
    Ok(out)
}

/// One affine inequality or equality over the lifted space.
#[derive(Debug, Clone)]
pub struct HullRow {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
}

impl HullRow {
    pub fn satisfied(&self, lifted: &[f64], tol: f64) -> bool {
        let lhs: f64 = self.coeffs.iter().map(|&(j, v)| v * lifted[j]).sum();
        match self.sense {
            RowSense::Le => lhs <= self.rhs + tol,
            RowSense::Ge => lhs >= self.rhs - tol,
            RowSense::Eq => (lhs - self.rhs).abs() <= tol,
        }
    }
}

/// Polyhedral description of the convex hull of the folded box.
///
/// Returns the per-segment bound rows plus the chained ratio rows (stored
/// denominator-cleared) for every breakpoint strictly inside the box. A
/// segment whose folded range degenerates to a point contributes an equality
/// and no ratio rows.
pub fn hull_constraints(
    grid: &BreakpointGrid,
    box_lower: &[f64],
    box_upper: &[f64],
) -> Result<Vec<HullRow>, LiftingError> {
    if box_lower.len() != grid.dims() || box_upper.len() != grid.dims() {
        return Err(LiftingError::DimMismatch {
            expected: grid.dims(),
            got: box_lower.len(),
        });
    }
    for i in 0..grid.dims() {
        if box_lower[i] < grid.lower[i] - 1e-9
            || box_upper[i] > grid.upper[i] + 1e-9
            || box_lower[i] > box_upper[i]
        {
            return Err(LiftingError::BoxOutOfBounds { dim: i });
        }
    }
    let mut rows = Vec::new();
    for i in 0..grid.dims() {
        let nseg = grid.segments(i);
        let flo: Vec<f64> = (0..nseg)
            .map(|s| grid.fold_component(i, s, box_lower[i]))
            .collect();
        let fup: Vec<f64> = (0..nseg)
            .map(|s| grid.fold_component(i, s, box_upper[i]))
            .collect();
        for s in 0..nseg {
            let var = grid.flat(i, s);
            if fup[s] - flo[s] <= 1e-14 {
                rows.push(HullRow {
                    coeffs: vec![(var, 1.0)],
                    sense: RowSense::Eq,
                    rhs: flo[s],
                });
            } else {
                rows.push(HullRow {
                    coeffs: vec![(var, 1.0)],
                    sense: RowSense::Ge,
                    rhs: flo[s],
                });
                rows.push(HullRow {
                    coeffs: vec![(var, 1.0)],
                    sense: RowSense::Le,
                    rhs: fup[s],
                });
            }
        }
        for s in 0..nseg - 1 {
            let z = grid.value(i, s + 1);
            if !(box_lower[i] < z && z < box_upper[i]) {
                continue;
            }
            let da = fup[s] - flo[s];
            let db = fup[s + 1] - flo[s + 1];
            if da <= 1e-14 || db <= 1e-14 {
                continue;
            }
            // (psi_s - flo_s)/da >= (psi_{s+1} - flo_{s+1})/db, denominators
            // multiplied out.
            rows.push(HullRow {
                coeffs: vec![(grid.flat(i, s), db), (grid.flat(i, s + 1), -da)],
                sense: RowSense::Ge,
                rhs: flo[s] * db - flo[s + 1] * da,
            });
        }
    }
    Ok(rows)
}

/// Grid with `count` equidistant breakpoints per dimension.
pub fn equidistant_breakpoints(
    lower: Vec<f64>,
    upper: Vec<f64>,
    count: usize,
) -> Result<BreakpointGrid, LiftingError> {
    if count == 0 {
        return Err(LiftingError::BadCount);
    }
    if lower.is_empty() {
        return Err(LiftingError::BadBounds { dim: 0 });
    }
    let mut breakpoints = Vec::with_capacity(lower.len());
    for (&l, &u) in lower.iter().zip(&upper) {
        let step = (u - l) / (count as f64 + 1.0);
        breakpoints.push((1..=count).map(|k| l + step * k as f64).collect());
    }
    BreakpointGrid::new(lower, upper, breakpoints)
}

/// Grid whose breakpoints are the signed increments of an eta function,
/// deduplicated and restricted to the open interval of the bounds.
///
/// With strictly decreasing eta increments this choice makes a-priori square
/// cuts sufficient for exact separation.
pub fn full_breakpoints(
    eta: &crate::supports::EtaFunction,
    lower: Vec<f64>,
    upper: Vec<f64>,
) -> Result<BreakpointGrid, LiftingError> {
    const DEDUP_TOL: f64 = 1e-12;
    for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
        if (l + u).abs() > 1e-9 {
            return Err(LiftingError::AsymmetricBounds { dim: i });
        }
    }
    let mut increments: Vec<f64> = (1..eta.len())
        .map(|i| eta.value(i) - eta.value(i - 1))
        .collect();
    increments.push(0.0);
    let mut breakpoints = Vec::with_capacity(lower.len());
    for (&l, &u) in lower.iter().zip(&upper) {
        let mut pts: Vec<f64> = increments
            .iter()
            .flat_map(|&d| [d, -d])
            .filter(|&z| z > l + DEDUP_TOL && z < u - DEDUP_TOL)
            .collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup_by(|a, b| (*a - *b).abs() <= DEDUP_TOL);
        breakpoints.push(pts);
    }
    BreakpointGrid::new(lower, upper, breakpoints)
}

/// Information-preserving affine embedding of the raw uncertainty.
///
/// Maps `psi` to `theta = matrix * psi + offset`; the stored left inverse
/// undoes it exactly. Stage blocks record which embedded rows and raw
/// columns belong to each time stage; every row block may only read columns
/// of its own or earlier stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "EmbeddingSchema", into = "EmbeddingSchema")]
pub struct Embedding {
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
    left_inverse: DMatrix<f64>,
    stage_dims: Vec<usize>,
    stage_inputs: Vec<usize>,
}

#[derive(Serialize, Deserialize, Clone)]
struct EmbeddingSchema {
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
    stage_dims: Vec<usize>,
    stage_inputs: Vec<usize>,
}

impl From<Embedding> for EmbeddingSchema {
    fn from(e: Embedding) -> Self {
        EmbeddingSchema {
            matrix: e
                .matrix
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            offset: e.offset.iter().copied().collect(),
            stage_dims: e.stage_dims,
            stage_inputs: e.stage_inputs,
        }
    }
}

impl TryFrom<EmbeddingSchema> for Embedding {
    type Error = LiftingError;
    fn try_from(s: EmbeddingSchema) -> Result<Self, LiftingError> {
        let rows = s.matrix.len();
        let cols = s.matrix.first().map_or(0, |r| r.len());
        let matrix = DMatrix::from_fn(rows, cols, |i, j| s.matrix[i][j]);
        Embedding::new(
            matrix,
            DVector::from_vec(s.offset),
            s.stage_dims,
            s.stage_inputs,
        )
    }
}

impl Embedding {
    pub fn new(
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
        stage_dims: Vec<usize>,
        stage_inputs: Vec<usize>,
    ) -> Result<Self, LiftingError> {
        let (rows, cols) = matrix.shape();
        if offset.len() != rows
            || stage_dims.iter().sum::<usize>() != rows
            || stage_inputs.iter().sum::<usize>() != cols
        {
            return Err(LiftingError::DimMismatch {
                expected: rows,
                got: offset.len(),
            });
        }
        // Causality: row block t reads only columns of stages 1..t.
        let mut row_start = 0;
        let mut col_end = 0;
        for (t, (&dr, &dc)) in stage_dims.iter().zip(&stage_inputs).enumerate() {
            col_end += dc;
            for r in row_start..row_start + dr {
                for c in col_end..cols {
                    if matrix[(r, c)].abs() > 1e-12 {
                        return Err(LiftingError::NotCausal { stage: t + 1 });
                    }
                }
            }
            row_start += dr;
        }
        let gram = matrix.transpose() * &matrix;
        let left_inverse = gram
            .try_inverse()
            .ok_or(LiftingError::RankDeficient)?
            * matrix.transpose();
        Ok(Embedding {
            matrix,
            offset,
            left_inverse,
            stage_dims,
            stage_inputs,
        })
    }

    pub fn identity(dims_per_stage: Vec<usize>) -> Self {
        let n: usize = dims_per_stage.iter().sum();
        Embedding::new(
            DMatrix::identity(n, n),
            DVector::zeros(n),
            dims_per_stage.clone(),
            dims_per_stage,
        )
        .expect("identity embedding is always valid")
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn stages(&self) -> usize {
        self.stage_dims.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn left_inverse(&self) -> &DMatrix<f64> {
        &self.left_inverse
    }

    /// 1-based stage of embedded dimension `i`.
    pub fn stage_of_dim(&self, i: usize) -> usize {
        let mut acc = 0;
        for (t, &d) in self.stage_dims.iter().enumerate() {
            acc += d;
            if i < acc {
                return t + 1;
            }
        }
        self.stage_dims.len()
    }

    pub fn embed(&self, psi: &[f64]) -> Result<Vec<f64>, LiftingError> {
        if psi.len() != self.input_dim() {
            return Err(LiftingError::DimMismatch {
                expected: self.input_dim(),
                got: psi.len(),
            });
        }
        let v = &self.matrix * DVector::from_column_slice(psi) + &self.offset;
        Ok(v.iter().copied().collect())
    }

    pub fn unembed(&self, theta: &[f64]) -> Result<Vec<f64>, LiftingError> {
        if theta.len() != self.output_dim() {
            return Err(LiftingError::DimMismatch {
                expected: self.output_dim(),
                got: theta.len(),
            });
        }
        let v = &self.left_inverse * (DVector::from_column_slice(theta) - &self.offset);
        Ok(v.iter().copied().collect())
    }
}

/// Embedding recovering the constituent shocks of the autoregressive demand
/// process `psi_t = mu + nu * (zeta_t + alpha * sum_{t'<t} zeta_{t'})`.
pub fn ar_inverse_embedding(
    stages: usize,
    mu: f64,
    nu: f64,
    alpha: f64,
) -> Result<Embedding, LiftingError> {
    if nu == 0.0 {
        return Err(LiftingError::ZeroScale);
    }
    // zeta_t = (psi_t - mu)/nu - alpha * sum_{t'<t} zeta_{t'}; unroll into a
    // lower triangular linear part plus a constant.
    let mut w = DMatrix::zeros(stages, stages);
    let mut cumulative = DVector::zeros(stages);
    for t in 0..stages {
        let mut row = DVector::zeros(stages);
        row[t] = 1.0 / nu;
        row -= alpha * &cumulative;
        cumulative += &row;
        w.set_row(t, &row.transpose());
    }
    let offset = -(&w * DVector::from_element(stages, mu));
    Embedding::new(w, offset, vec![1; stages], vec![1; stages])
}

/// The lifting `L = F o E` and its retraction `R = E+ o F+`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiftingOperator {
    pub embedding: Embedding,
    pub grid: BreakpointGrid,
}

impl LiftingOperator {
    pub fn new(embedding: Embedding, grid: BreakpointGrid) -> Result<Self, LiftingError> {
        if embedding.output_dim() != grid.dims() {
            return Err(LiftingError::DimMismatch {
                expected: embedding.output_dim(),
                got: grid.dims(),
            });
        }
        Ok(LiftingOperator { embedding, grid })
    }

    pub fn lifted_dim(&self) -> usize {
        self.grid.lifted_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.embedding.input_dim()
    }

    pub fn lift(&self, psi: &[f64]) -> Result<Vec<f64>, LiftingError> {
        fold(&self.grid, &self.embedding.embed(psi)?)
    }

    pub fn retract(&self, lifted: &[f64]) -> Result<Vec<f64>, LiftingError> {
        self.embedding.unembed(&fold_plus(&self.grid, lifted)?)
    }

    /// 1-based stage of lifted component `n`.
    pub fn stage_of_lifted(&self, n: usize) -> usize {
        let mut i = 0;
        while self.grid.offsets[i + 1] <= n {
            i += 1;
        }
        self.embedding.stage_of_dim(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_pm2() -> BreakpointGrid {
        BreakpointGrid::new(vec![-2.0], vec![2.0], vec![vec![0.0]]).unwrap()
    }

    #[test]
    fn fold_case_split() {
        let g = grid_pm2();
        assert_eq!(fold(&g, &[1.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(fold(&g, &[-2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(fold(&g, &[2.0]).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn fold_plus_examples() {
        let g = grid_pm2();
        assert_eq!(fold_plus(&g, &[2.0, 1.0]).unwrap(), vec![1.0]);
        assert_eq!(fold_plus(&g, &[0.0, 0.0]).unwrap(), vec![-2.0]);
        assert_eq!(fold_plus(&g, &[2.0, 2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let g = grid_pm2();
        assert!(fold(&g, &[1.0, 2.0]).is_err());
        assert!(fold_plus(&g, &[1.0]).is_err());
    }

    #[test]
    fn retract_identity_and_scaling() {
        let g = grid_pm2();
        let ident = LiftingOperator::new(Embedding::identity(vec![1]), g.clone()).unwrap();
        assert_eq!(ident.retract(&[2.0, 1.0]).unwrap(), vec![1.0]);

        // theta = 2 psi: the left inverse halves.
        let scale = Embedding::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(1),
            vec![1],
            vec![1],
        )
        .unwrap();
        let op = LiftingOperator::new(scale, g).unwrap();
        assert_eq!(op.retract(&[2.0, 1.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn ar_embedding_examples() {
        let (mu, nu) = (200.0, 0.5);
        let e1 = ar_inverse_embedding(1, mu, nu, 0.25).unwrap();
        let t = e1.embed(&[mu + nu]).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-12);

        let e2 = ar_inverse_embedding(2, mu, nu, 0.25).unwrap();
        // Forward AR at zeta = (1, 1): psi = (mu + nu, mu + nu * 1.25).
        let t = e2.embed(&[mu + nu, mu + nu * 1.25]).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-10 && (t[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ar_round_trip_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (t_max, mu, nu, alpha) = (3usize, 200.0, 0.2, 0.4);
        let emb = ar_inverse_embedding(t_max, mu, nu, alpha).unwrap();
        for _ in 0..1000 {
            let zeta: Vec<f64> = (0..t_max).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut psi = vec![0.0; t_max];
            for t in 0..t_max {
                let hist: f64 = zeta[..t].iter().sum();
                psi[t] = mu + nu * (zeta[t] + alpha * hist);
            }
            let back = emb.embed(&psi).unwrap();
            for (a, b) in back.iter().zip(&zeta) {
                assert!((a - b).abs() < 1e-10);
            }
            // Full retraction through a lifting.
            let grid = equidistant_breakpoints(vec![-1.5; t_max], vec![1.5; t_max], 1).unwrap();
            let op = LiftingOperator::new(emb.clone(), grid).unwrap();
            let rt = op.retract(&op.lift(&psi).unwrap()).unwrap();
            for (a, b) in rt.iter().zip(&psi) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn left_inverse_identity() {
        let emb = ar_inverse_embedding(4, 200.0, 0.3, 0.25).unwrap();
        let prod = emb.left_inverse() * emb.matrix();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn causality_enforced() {
        // A 2x2 upper-triangular matrix reads stage 2 from stage-1 rows.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let err = Embedding::new(m, DVector::zeros(2), vec![1, 1], vec![1, 1]);
        assert!(matches!(err, Err(LiftingError::NotCausal { stage: 1 })));
    }

    #[test]
    fn equidistant_examples() {
        let g = equidistant_breakpoints(vec![-2.0], vec![2.0], 1).unwrap();
        assert_eq!(g.breakpoints[0], vec![0.0]);
        let g = equidistant_breakpoints(vec![-2.0], vec![2.0], 3).unwrap();
        assert_eq!(g.breakpoints[0], vec![-1.0, 0.0, 1.0]);
        let g = equidistant_breakpoints(vec![0.0], vec![1.0], 1).unwrap();
        assert_eq!(g.breakpoints[0], vec![0.5]);
        assert!(equidistant_breakpoints(vec![0.0], vec![1.0], 0).is_err());
    }

    #[test]
    fn full_breakpoints_examples() {
        use crate::supports::{eta_norm_ball, PNorm};
        // 2-norm unit ball, I = 2: increments {1, sqrt(2)-1}.
        let eta = eta_norm_ball(PNorm::Two, 1.0, 2).unwrap();
        let g = full_breakpoints(&eta, vec![-1.0; 2], vec![1.0; 2]).unwrap();
        let d = 2.0_f64.sqrt() - 1.0;
        let vals = g.values(0);
        assert_eq!(vals.len(), 5);
        for (a, b) in vals.iter().zip([-1.0, -d, 0.0, d, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        // 1-norm ball: increments {delta, 0, 0} collapse to a single zero.
        let eta = eta_norm_ball(PNorm::One, 1.0, 3).unwrap();
        let g = full_breakpoints(&eta, vec![-1.0; 3], vec![1.0; 3]).unwrap();
        assert_eq!(g.values(0), vec![-1.0, 0.0, 1.0]);
        // inf-norm ball: all increments sit on the bounds.
        let eta = eta_norm_ball(PNorm::Inf, 1.0, 2).unwrap();
        let g = full_breakpoints(&eta, vec![-1.0; 2], vec![1.0; 2]).unwrap();
        assert_eq!(g.values(0), vec![-1.0, 0.0, 1.0]);
        // Asymmetric bounds are rejected.
        assert!(full_breakpoints(&eta, vec![0.0; 2], vec![1.0; 2]).is_err());
    }

    #[test]
    fn hull_constraints_symmetric_box() {
        let g = grid_pm2();
        let rows = hull_constraints(&g, &[-2.0], &[2.0]).unwrap();
        let ok = |p: &[f64]| rows.iter().all(|r| r.satisfied(p, 1e-12));
        assert!(ok(&[2.0, 1.0]));
        assert!(!ok(&[1.0, 2.0])); // violates the ratio chain
        assert!(ok(&[0.0, 0.0]) && ok(&[2.0, 2.0]));
        assert!(!ok(&[2.1, 0.0]) && !ok(&[-0.1, 0.0]));
    }

    #[test]
    fn hull_constraints_degenerate_segment() {
        let g = grid_pm2();
        let rows = hull_constraints(&g, &[0.7], &[1.9]).unwrap();
        // Lower segment is pinned to its full width, upper one ranges freely,
        // and the ratio row is dropped.
        let eqs: Vec<_> = rows
            .iter()
            .filter(|r| r.sense == RowSense::Eq)
            .collect();
        assert_eq!(eqs.len(), 1);
        assert_eq!(eqs[0].coeffs, vec![(0, 1.0)]);
        assert!((eqs[0].rhs - 2.0).abs() < 1e-12);
        assert!(rows.iter().all(|r| r.coeffs.len() == 1));
        let ok = |p: &[f64]| rows.iter().all(|r| r.satisfied(p, 1e-12));
        assert!(ok(&[2.0, 0.7]) && ok(&[2.0, 1.9]));
        assert!(!ok(&[2.0, 0.69]) && !ok(&[1.99, 1.0]));
    }

    #[test]
    fn hull_box_outside_bounds_is_error() {
        let g = grid_pm2();
        assert!(matches!(
            hull_constraints(&g, &[-3.0], &[1.0]),
            Err(LiftingError::BoxOutOfBounds { .. })
        ));
    }

    #[test]
    fn telescoping_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = BreakpointGrid::new(
            vec![-2.0, 0.0],
            vec![2.0, 3.0],
            vec![vec![-1.0, 0.5], vec![1.0]],
        )
        .unwrap();
        for _ in 0..500 {
            let theta = [rng.gen_range(-2.0..2.0), rng.gen_range(0.0..3.0)];
            let lifted = fold(&g, &theta).unwrap();
            for i in 0..2 {
                let mut acc = g.lower()[i];
                for s in 0..g.segments(i) {
                    acc += lifted[g.flat(i, s)];
                    let want = theta[i].min(g.value(i, s + 1));
                    assert!((acc - want).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn fold_plus_is_left_inverse(theta in -2.0f64..2.0) {
            let g = grid_pm2();
            let back = fold_plus(&g, &fold(&g, &[theta]).unwrap()).unwrap();
            prop_assert!((back[0] - theta).abs() < 1e-10);
        }

        #[test]
        fn fold_is_monotone(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let g = BreakpointGrid::new(vec![-2.0], vec![2.0], vec![vec![-0.7, 0.3, 1.1]]).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let fa = fold(&g, &[lo]).unwrap();
            let fb = fold(&g, &[hi]).unwrap();
            for (x, y) in fa.iter().zip(&fb) {
                prop_assert!(x <= &(y + 1e-12));
            }
        }

        #[test]
        fn retract_is_affine(a in 0.0f64..1.0, p in -1.8f64..1.8, q in -1.8f64..1.8) {
            let g = grid_pm2();
            let op = LiftingOperator::new(Embedding::identity(vec![1]), g).unwrap();
            let fp = op.lift(&[p]).unwrap();
            let fq = op.lift(&[q]).unwrap();
            let mix: Vec<f64> = fp.iter().zip(&fq).map(|(x, y)| a * x + (1.0 - a) * y).collect();
            let r_mix = op.retract(&mix).unwrap()[0];
            let want = a * op.retract(&fp).unwrap()[0] + (1.0 - a) * op.retract(&fq).unwrap()[0];
            prop_assert!((r_mix - want).abs() < 1e-10);
        }
    }
}

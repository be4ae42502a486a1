//! Assembly of the dual conic counterpart of lifted affine decision-rule
//! programs, lifted moment estimation, and policy extraction from shadow
//! prices.
//!
//! The dual maximizes the negated, scale-homogenized constraint prices: one
//! lifted block `(psi_gk, s_gk)` per constraint row and support subset,
//! tied together by moment-matching equalities whose multipliers are the
//! affine policy coefficients. Each block carries the scaled membership,
//! linkage, and folded-hull rows of its subset; distance cuts are appended
//! later by the constraint-generation loop.

use crate::lifting::{hull_constraints, LiftingError, LiftingOperator};
use crate::program::{AffineExpr, ConicProgram, RowSense, RowTag, Sense};
use crate::separation::{Cut, Rectangle};
use crate::solver::{SolveResult, SolveStatus};
use crate::supports::{PNorm, SupportError, SupportFamily, SupportSet};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("builder requires exactly one support subset, got {0}")]
    NeedSingleSubset(usize),
    #[error("constraint block count {blocks} differs from subset count {subsets}")]
    BlockCount { blocks: usize, subsets: usize },
    #[error("decision {0} of stage {stage} exceeds the problem horizon", stage = .1)]
    BadStage(String, usize),
    #[error("uncertainty-dependent objective coefficients need moment data")]
    MissingMoments,
    #[error("robust and data-driven builders require constant objective coefficients")]
    UncertainCost,
    #[error("negative perturbation radius {0}")]
    NegativeRadius(f64),
    #[error("support kind has no exact conic rows (try a polyhedral approximation)")]
    UnsupportedSupport,
    #[error("solution carries no dual multipliers")]
    MissingDuals,
    #[error("solution status {0:?} is not optimal")]
    NotOptimal(SolveStatus),
    #[error(transparent)]
    Lifting(#[from] LiftingError),
    #[error(transparent)]
    Support(#[from] SupportError),
}

/// One scalar decision of the multistage problem. Stage 0 decisions are
/// here-and-now; stage `t >= 1` decisions may read the uncertainty revealed
/// up to and including stage `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionVar {
    pub name: String,
    pub stage: usize,
}

/// Affine constraint row `decision_coeffs . x  <=  rhs_const + rhs_psi . psi`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineRow {
    pub decision_coeffs: Vec<f64>,
    pub rhs_const: f64,
    pub rhs_psi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintBlock {
    pub rows: Vec<AffineRow>,
}

/// Multi-stage decision problem with affine uncertainty in the right-hand
/// sides and objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultistageProblem {
    pub stages: usize,
    pub uncertainty_dim: usize,
    pub decisions: Vec<DecisionVar>,
    /// One constraint block per support subset.
    pub blocks: Vec<ConstraintBlock>,
    /// Constant objective coefficient per decision.
    pub cost_const: Vec<f64>,
    /// Uncertainty-linear objective coefficient per decision (row of length
    /// `uncertainty_dim`), empty when the cost is constant.
    pub cost_psi: Vec<Vec<f64>>,
}

impl MultistageProblem {
    pub fn num_decisions(&self) -> usize {
        self.decisions.len()
    }

    pub fn validate(&self) -> Result<(), BuildError> {
        let nd = self.decisions.len();
        if self.cost_const.len() != nd {
            return Err(BuildError::DimMismatch {
                expected: nd,
                got: self.cost_const.len(),
            });
        }
        for d in &self.decisions {
            if d.stage > self.stages {
                return Err(BuildError::BadStage(d.name.clone(), d.stage));
            }
        }
        for block in &self.blocks {
            for row in &block.rows {
                if row.decision_coeffs.len() != nd {
                    return Err(BuildError::DimMismatch {
                        expected: nd,
                        got: row.decision_coeffs.len(),
                    });
                }
                if row.rhs_psi.len() != self.uncertainty_dim {
                    return Err(BuildError::DimMismatch {
                        expected: self.uncertainty_dim,
                        got: row.rhs_psi.len(),
                    });
                }
            }
        }
        if !self.cost_psi.is_empty() {
            if self.cost_psi.len() != nd {
                return Err(BuildError::DimMismatch {
                    expected: nd,
                    got: self.cost_psi.len(),
                });
            }
            for c in &self.cost_psi {
                if c.len() != self.uncertainty_dim {
                    return Err(BuildError::DimMismatch {
                        expected: self.uncertainty_dim,
                        got: c.len(),
                    });
                }
            }
        }
        Ok(())
    }

    fn cost_is_constant(&self) -> bool {
        self.cost_psi.is_empty()
            || self
                .cost_psi
                .iter()
                .all(|row| row.iter().all(|v| v.abs() < 1e-15))
    }

    /// Objective coefficient vector at a concrete uncertainty realization.
    pub fn cost_at(&self, psi: &[f64]) -> Vec<f64> {
        let mut c = self.cost_const.clone();
        if !self.cost_psi.is_empty() {
            for (cd, row) in c.iter_mut().zip(&self.cost_psi) {
                *cd += row.iter().zip(psi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        c
    }
}

/// Monte Carlo estimates of the lifted moment terms entering the dual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentData {
    pub mean_lifted: Vec<f64>,
    /// `cross[d][n] = E[ cost_d(R(xi')) * xi'_n ]`.
    pub cross: Vec<Vec<f64>>,
    pub mean_cost: Vec<f64>,
    pub sample_count: usize,
    pub seed: u64,
}

/// Seeded Monte Carlo estimation of the lifted moments; deterministic in
/// `(seed, samples)`.
pub fn estimate_moments<F>(
    problem: &MultistageProblem,
    lifting: &LiftingOperator,
    mut sampler: F,
    samples: usize,
    seed: u64,
) -> Result<MomentData, BuildError>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
{
    assert!(samples >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = problem.num_decisions();
    let nl = lifting.lifted_dim();
    let mut mean_lifted = vec![0.0; nl];
    let mut cross = vec![vec![0.0; nl]; nd];
    let mut mean_cost = vec![0.0; nd];
    for _ in 0..samples {
        let psi = sampler(&mut rng);
        let lifted = lifting.lift(&psi)?;
        let cost = problem.cost_at(&lifting.retract(&lifted)?);
        for n in 0..nl {
            mean_lifted[n] += lifted[n];
        }
        for d in 0..nd {
            mean_cost[d] += cost[d];
            if cost[d] != 0.0 {
                for n in 0..nl {
                    cross[d][n] += cost[d] * lifted[n];
                }
            }
        }
    }
    let inv = 1.0 / samples as f64;
    mean_lifted.iter_mut().for_each(|v| *v *= inv);
    mean_cost.iter_mut().for_each(|v| *v *= inv);
    cross
        .iter_mut()
        .for_each(|row| row.iter_mut().for_each(|v| *v *= inv));
    Ok(MomentData {
        mean_lifted,
        cross,
        mean_cost,
        sample_count: samples,
        seed,
    })
}

/// The assembled dual program plus the bookkeeping needed to insert cuts
/// and read policies back out of the shadow prices.
pub struct DualProgram {
    pub program: ConicProgram,
    pub lifting: LiftingOperator,
    pub family: SupportFamily,
    pub problem: MultistageProblem,
    /// `psi_vars[g][k][n]`: program variable of lifted component `n` in
    /// block `(g, k)`.
    pub psi_vars: Vec<Vec<Vec<usize>>>,
    pub s_vars: Vec<Vec<usize>>,
    /// Which lifted components each decision may read.
    pub mask: Vec<Vec<bool>>,
    matrix_rows: HashMap<(usize, usize), usize>,
    vector_rows: Vec<usize>,
    pub cuts: Vec<Cut>,
    cut_keys: HashSet<(usize, Rectangle)>,
}

impl DualProgram {
    /// Append the cut's rows, one per constraint of its subset; duplicate
    /// `(subset, rectangle)` pairs are ignored. Returns whether it was new.
    pub fn add_cut(&mut self, cut: Cut) -> bool {
        let key = (cut.subset, cut.rect.clone());
        if !self.cut_keys.insert(key) {
            return false;
        }
        let g = cut.subset;
        let id = self.cuts.len();
        for k in 0..self.psi_vars[g].len() {
            let mut coeffs: Vec<(usize, f64)> = cut
                .coeff_psi
                .iter()
                .map(|&(n, v)| (self.psi_vars[g][k][n], v))
                .collect();
            if cut.coeff_s != 0.0 {
                coeffs.push((self.s_vars[g][k], cut.coeff_s));
            }
            self.program
                .add_row(coeffs, RowSense::Le, 0.0, RowTag::Cut { g, k, id });
        }
        self.cuts.push(cut);
        true
    }

    pub fn cut_count(&self) -> usize {
        self.cuts.len()
    }

    pub fn has_cut(&self, g: usize, rect: &Rectangle) -> bool {
        self.cut_keys.contains(&(g, rect.clone()))
    }
}

/// Shared assembly of the dual conic program.
///
/// `moments` may be omitted only when the objective coefficients are
/// constant and carried entirely by here-and-now decisions, in which case
/// every moment term either vanishes or is masked.
pub fn build_dual(
    problem: MultistageProblem,
    lifting: LiftingOperator,
    family: SupportFamily,
    moments: Option<&MomentData>,
) -> Result<DualProgram, BuildError> {
    problem.validate()?;
    let nl = lifting.lifted_dim();
    let nd = problem.num_decisions();
    let dim_embedded = lifting.grid.dims();
    let dim_raw = lifting.input_dim();
    if family.dim() != dim_embedded {
        return Err(BuildError::DimMismatch {
            expected: dim_embedded,
            got: family.dim(),
        });
    }
    if problem.uncertainty_dim != dim_raw {
        return Err(BuildError::DimMismatch {
            expected: dim_raw,
            got: problem.uncertainty_dim,
        });
    }
    if problem.blocks.len() != family.len() {
        return Err(BuildError::BlockCount {
            blocks: problem.blocks.len(),
            subsets: family.len(),
        });
    }

    // Moment terms; absent data is only allowed when they reduce to
    // constants on here-and-now decisions.
    let (cross, mean_cost): (Vec<Vec<f64>>, Vec<f64>) = match moments {
        Some(m) => {
            if m.mean_lifted.len() != nl || m.mean_cost.len() != nd {
                return Err(BuildError::DimMismatch {
                    expected: nl,
                    got: m.mean_lifted.len(),
                });
            }
            (m.cross.clone(), m.mean_cost.clone())
        }
        None => {
            let movable = problem.cost_is_constant()
                && problem
                    .decisions
                    .iter()
                    .zip(&problem.cost_const)
                    .all(|(d, &c)| c == 0.0 || d.stage == 0);
            if !movable {
                return Err(BuildError::MissingMoments);
            }
            (vec![vec![0.0; nl]; nd], problem.cost_const.clone())
        }
    };

    // Non-anticipativity mask in the lifted space.
    let mask: Vec<Vec<bool>> = problem
        .decisions
        .iter()
        .map(|d| {
            (0..nl)
                .map(|n| lifting.stage_of_lifted(n) <= d.stage)
                .collect()
        })
        .collect();

    let mut prog = ConicProgram::new(Sense::Maximize);
    let need_witness = lifting.embedding.output_dim() != lifting.embedding.input_dim();

    // Per-block variables.
    let mut psi_vars: Vec<Vec<Vec<usize>>> = Vec::with_capacity(family.len());
    let mut s_vars: Vec<Vec<usize>> = Vec::with_capacity(family.len());
    let mut u_vars: Vec<Vec<Vec<usize>>> = Vec::with_capacity(family.len());
    for (g, block) in problem.blocks.iter().enumerate() {
        let mut psi_g = Vec::with_capacity(block.rows.len());
        let mut s_g = Vec::with_capacity(block.rows.len());
        let mut u_g = Vec::with_capacity(block.rows.len());
        for k in 0..block.rows.len() {
            psi_g.push(
                (0..nl)
                    .map(|n| prog.add_var(format!("psi[{g}][{k}][{n}]"), false))
                    .collect::<Vec<_>>(),
            );
            s_g.push(prog.add_var(format!("s[{g}][{k}]"), true));
            u_g.push(if need_witness {
                (0..dim_raw)
                    .map(|j| prog.add_var(format!("u[{g}][{k}][{j}]"), false))
                    .collect()
            } else {
                Vec::new()
            });
        }
        psi_vars.push(psi_g);
        s_vars.push(s_g);
        u_vars.push(u_g);
    }

    // Moment-matching equalities. Matrix rows exist only for unmasked
    // (decision, lifted) pairs; their multipliers become the policy slopes.
    let mut matrix_rows = HashMap::new();
    for d in 0..nd {
        for n in 0..nl {
            if !mask[d][n] {
                continue;
            }
            let mut coeffs = Vec::new();
            for (g, block) in problem.blocks.iter().enumerate() {
                for (k, row) in block.rows.iter().enumerate() {
                    let a = row.decision_coeffs[d];
                    if a != 0.0 {
                        coeffs.push((psi_vars[g][k][n], a));
                    }
                }
            }
            let idx = prog.add_row(
                coeffs,
                RowSense::Eq,
                -cross[d][n],
                RowTag::MomentMatrix { dec: d, lifted: n },
            );
            matrix_rows.insert((d, n), idx);
        }
    }
    let mut vector_rows = Vec::with_capacity(nd);
    for d in 0..nd {
        let mut coeffs = Vec::new();
        for (g, block) in problem.blocks.iter().enumerate() {
            for (k, row) in block.rows.iter().enumerate() {
                let a = row.decision_coeffs[d];
                if a != 0.0 {
                    coeffs.push((s_vars[g][k], a));
                }
            }
        }
        vector_rows.push(prog.add_row(
            coeffs,
            RowSense::Eq,
            -mean_cost[d],
            RowTag::MomentVector { dec: d },
        ));
    }

    // Per-block geometry: hull rows, witness linkage, scaled membership,
    // and the objective contribution.
    let grid = &lifting.grid;
    let emb = &lifting.embedding;
    let theta_floor: Vec<f64> = grid.lower().to_vec();
    let retract_zero: Vec<f64> = emb.unembed(&theta_floor)?;
    for (g, block) in problem.blocks.iter().enumerate() {
        let (box_lo, box_hi) = family.subset_box(g);
        let hull = hull_constraints(grid, box_lo, box_hi)?;
        for (k, row) in block.rows.iter().enumerate() {
            let psis = &psi_vars[g][k];
            let s = s_vars[g][k];

            for hr in &hull {
                let mut coeffs: Vec<(usize, f64)> =
                    hr.coeffs.iter().map(|&(n, v)| (psis[n], v)).collect();
                coeffs.push((s, -hr.rhs));
                prog.add_row(coeffs, hr.sense, 0.0, RowTag::Hull { g, k });
            }

            // theta-hat_i = sum_s psi[i][s] + s * floor_i, the scaled
            // embedded point this block encodes.
            let theta_expr = |i: usize| -> Vec<(usize, f64)> {
                let mut e: Vec<(usize, f64)> = (0..grid.segments(i))
                    .map(|seg| (psis[grid.flat(i, seg)], 1.0))
                    .collect();
                e.push((s, theta_floor[i]));
                e
            };

            if need_witness {
                // theta-hat must lie in the scaled affine range of the
                // embedding: theta-hat = E u-hat + s * offset.
                let us = &u_vars[g][k];
                for i in 0..dim_embedded {
                    let mut coeffs = theta_expr(i);
                    coeffs.push((s, -emb.offset()[i]));
                    for j in 0..dim_raw {
                        let w = emb.matrix()[(i, j)];
                        if w.abs() > 0.0 {
                            coeffs.push((us[j], -w));
                        }
                    }
                    prog.add_row(coeffs, RowSense::Eq, 0.0, RowTag::Link { g, k, dim: i });
                }
            }

            add_scaled_support_rows(
                &mut prog,
                family.subset(g),
                &theta_expr,
                s,
                RowTag::Support { g, k },
            )?;

            // Objective: maximize -(b(R(psi)) + (s - 1) b(R(0))) per block.
            // With q = rhs_psi' E+ the linear parts collapse to
            // -q_i on each lifted component and -b(R(0)) on s.
            let q = DVector::from_column_slice(&row.rhs_psi).transpose() * emb.left_inverse();
            let b_r0: f64 = row.rhs_const
                + row
                    .rhs_psi
                    .iter()
                    .zip(&retract_zero)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            for i in 0..dim_embedded {
                if q[i] != 0.0 {
                    for seg in 0..grid.segments(i) {
                        prog.add_obj(psis[grid.flat(i, seg)], -q[i]);
                    }
                }
            }
            prog.add_obj(s, -b_r0);
        }
    }

    Ok(DualProgram {
        program: prog,
        lifting,
        family,
        problem,
        psi_vars,
        s_vars,
        mask,
        matrix_rows,
        vector_rows,
        cuts: Vec::new(),
        cut_keys: HashSet::new(),
    })
}

/// Emit rows enforcing `theta-hat in s * set` on homogeneous expressions.
fn add_scaled_support_rows(
    prog: &mut ConicProgram,
    set: &SupportSet,
    theta_expr: &dyn Fn(usize) -> Vec<(usize, f64)>,
    s: usize,
    tag: RowTag,
) -> Result<(), BuildError> {
    match set {
        SupportSet::Box { lower, upper } => {
            for i in 0..lower.len() {
                let mut up = theta_expr(i);
                up.push((s, -upper[i]));
                prog.add_row(up, RowSense::Le, 0.0, tag);
                let mut lo = theta_expr(i);
                lo.push((s, -lower[i]));
                prog.add_row(lo, RowSense::Ge, 0.0, tag);
            }
        }
        SupportSet::Polytope { rows, rhs, .. } => {
            for (a, &b) in rows.iter().zip(rhs) {
                let mut coeffs = Vec::new();
                for (i, &ai) in a.iter().enumerate() {
                    if ai != 0.0 {
                        for (var, v) in theta_expr(i) {
                            coeffs.push((var, ai * v));
                        }
                    }
                }
                coeffs.push((s, -b));
                prog.add_row(coeffs, RowSense::Le, 0.0, tag);
            }
        }
        SupportSet::NormBall { p, radius, center } => match p {
            PNorm::Inf => {
                for (i, &c) in center.iter().enumerate() {
                    let mut up = theta_expr(i);
                    up.push((s, -(c + radius)));
                    prog.add_row(up, RowSense::Le, 0.0, tag);
                    let mut lo = theta_expr(i);
                    lo.push((s, -(c - radius)));
                    prog.add_row(lo, RowSense::Ge, 0.0, tag);
                }
            }
            PNorm::One => {
                // Auxiliary magnitudes w_i >= |theta-hat_i - s c_i| with
                // total mass at most s * radius.
                let ws: Vec<usize> = (0..center.len())
                    .map(|i| prog.add_var(format!("l1aux[{i}]@r{}", prog.num_rows()), true))
                    .collect();
                let mut total: Vec<(usize, f64)> = ws.iter().map(|&w| (w, 1.0)).collect();
                total.push((s, -radius));
                prog.add_row(total, RowSense::Le, 0.0, tag);
                for (i, &c) in center.iter().enumerate() {
                    let mut up = theta_expr(i);
                    up.push((s, -c));
                    up.push((ws[i], -1.0));
                    prog.add_row(up, RowSense::Le, 0.0, tag);
                    let mut lo = theta_expr(i);
                    lo.push((s, -c));
                    lo.push((ws[i], 1.0));
                    prog.add_row(lo, RowSense::Ge, 0.0, tag);
                }
            }
            PNorm::Two => {
                let mut exprs = Vec::with_capacity(center.len() + 1);
                exprs.push(AffineExpr {
                    coeffs: vec![(s, *radius)],
                    constant: 0.0,
                });
                for (i, &c) in center.iter().enumerate() {
                    let mut coeffs = theta_expr(i);
                    if c != 0.0 {
                        coeffs.push((s, -c));
                    }
                    exprs.push(AffineExpr {
                        coeffs,
                        constant: 0.0,
                    });
                }
                prog.add_soc(exprs, tag);
            }
            PNorm::Other(_) => return Err(BuildError::UnsupportedSupport),
        },
        SupportSet::Intersection { members } => {
            for m in members {
                add_scaled_support_rows(prog, m, theta_expr, s, tag)?;
            }
        }
    }
    Ok(())
}

/// Build the dual of a stochastic program (single support subset).
pub fn build_stochastic(
    problem: MultistageProblem,
    lifting: LiftingOperator,
    family: SupportFamily,
    moments: &MomentData,
) -> Result<DualProgram, BuildError> {
    if family.len() != 1 {
        return Err(BuildError::NeedSingleSubset(family.len()));
    }
    build_dual(problem, lifting, family, Some(moments))
}

/// Robust counterpart: add a worst-case epigraph decision, move the
/// objective onto it, and build the dual. The lifted distribution drops out
/// because the epigraph variable is here-and-now.
pub fn build_robust(
    problem: MultistageProblem,
    lifting: LiftingOperator,
    family: SupportFamily,
) -> Result<DualProgram, BuildError> {
    if family.len() != 1 {
        return Err(BuildError::NeedSingleSubset(family.len()));
    }
    let epi = epigraph_form(problem, 1)?;
    build_dual(epi, lifting, family, None)
}

/// Wasserstein data-driven counterpart: one perturbation box per historical
/// sample, one epigraph decision per box, averaged in the objective.
///
/// `problem` must carry a single constraint block; it is replicated per
/// sample. `samples` are raw-uncertainty paths and `radius` the sup-norm
/// perturbation radius.
pub fn build_data_driven(
    problem: MultistageProblem,
    lifting: LiftingOperator,
    samples: &[Vec<f64>],
    radius: f64,
) -> Result<DualProgram, BuildError> {
    if radius < 0.0 {
        return Err(BuildError::NegativeRadius(radius));
    }
    if problem.blocks.len() != 1 {
        return Err(BuildError::NeedSingleSubset(problem.blocks.len()));
    }
    if samples.is_empty() {
        return Err(BuildError::NeedSingleSubset(0));
    }
    let mut replicated = problem;
    let base = replicated.blocks[0].clone();
    replicated.blocks = vec![base; samples.len()];
    let epi = epigraph_form(replicated, samples.len())?;
    let family = embedded_sample_boxes(&lifting, samples, radius)?;
    build_dual(epi, lifting, family, None)
}

/// Embedded images of sup-norm boxes around raw-space sample paths.
pub fn embedded_sample_boxes(
    lifting: &LiftingOperator,
    samples: &[Vec<f64>],
    radius: f64,
) -> Result<SupportFamily, BuildError> {
    let emb = &lifting.embedding;
    let dim_raw = emb.input_dim();
    let mut subsets = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.len() != dim_raw {
            return Err(BuildError::DimMismatch {
                expected: dim_raw,
                got: sample.len(),
            });
        }
        if radius == 0.0 {
            let point = emb.embed(sample)?;
            subsets.push(SupportSet::boxed(point.clone(), point)?);
            continue;
        }
        // |(E+ (theta - offset))_t - sample_t| <= radius as polytope rows.
        let dim_embedded = emb.output_dim();
        let c0 = emb.unembed(&vec![0.0; dim_embedded])?; // -E+ offset
        let mut rows = Vec::with_capacity(2 * dim_raw);
        let mut rhs = Vec::with_capacity(2 * dim_raw);
        for t in 0..dim_raw {
            let a: Vec<f64> = (0..dim_embedded)
                .map(|i| emb.left_inverse()[(t, i)])
                .collect();
            rows.push(a.clone());
            rhs.push(sample[t] + radius - c0[t]);
            rows.push(a.iter().map(|v| -v).collect());
            rhs.push(-(sample[t] - radius) + c0[t]);
        }
        subsets.push(SupportSet::Polytope {
            rows,
            rhs,
            dim: dim_embedded,
        });
    }
    Ok(SupportFamily::new(subsets)?)
}

/// Augment a problem with per-subset worst-case epigraph decisions carrying
/// the whole objective.
fn epigraph_form(
    mut problem: MultistageProblem,
    subsets: usize,
) -> Result<MultistageProblem, BuildError> {
    problem.validate()?;
    if !problem.cost_is_constant() {
        return Err(BuildError::UncertainCost);
    }
    if problem.blocks.len() != subsets {
        return Err(BuildError::BlockCount {
            blocks: problem.blocks.len(),
            subsets,
        });
    }
    let nd = problem.num_decisions();
    let total = nd + subsets;
    let cost = problem.cost_const.clone();
    for block in problem.blocks.iter_mut() {
        for row in block.rows.iter_mut() {
            row.decision_coeffs.resize(total, 0.0);
        }
    }
    for g in 0..subsets {
        // c'x - tau_g <= 0 appended to block g.
        let mut coeffs = cost.clone();
        coeffs.resize(total, 0.0);
        coeffs[nd + g] = -1.0;
        problem.blocks[g].rows.push(AffineRow {
            decision_coeffs: coeffs,
            rhs_const: 0.0,
            rhs_psi: vec![0.0; problem.uncertainty_dim],
        });
        problem.decisions.push(DecisionVar {
            name: format!("worst_case[{g}]"),
            stage: 0,
        });
    }
    problem.cost_const = vec![0.0; total];
    problem.cost_const[nd..].fill(1.0 / subsets as f64);
    problem.cost_psi = Vec::new();
    Ok(problem)
}

/// Affine decision rule in the lifted space, evaluable on raw realizations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PiecewiseAffinePolicy {
    pub slopes: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub lifting: LiftingOperator,
}

impl PiecewiseAffinePolicy {
    pub fn evaluate(&self, psi: &[f64]) -> Result<Vec<f64>, LiftingError> {
        let lifted = self.lifting.lift(psi)?;
        Ok(self
            .slopes
            .iter()
            .zip(&self.intercepts)
            .map(|(row, &b)| row.iter().zip(&lifted).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect())
    }

    /// Expected objective of the policy under the moment data.
    pub fn moment_objective(&self, moments: &MomentData) -> f64 {
        let mut total = 0.0;
        for (d, row) in self.slopes.iter().enumerate() {
            total += self.intercepts[d] * moments.mean_cost[d];
            total += row
                .iter()
                .zip(&moments.cross[d])
                .map(|(a, c)| a * c)
                .sum::<f64>();
        }
        total
    }
}

/// Read the affine policy out of the shadow prices of the moment-matching
/// rows. Masked slope entries have no rows and stay zero, which realizes
/// the non-anticipativity padding exactly.
pub fn extract_policy(
    dual: &DualProgram,
    solution: &SolveResult,
) -> Result<PiecewiseAffinePolicy, BuildError> {
    if solution.status != SolveStatus::Optimal {
        return Err(BuildError::NotOptimal(solution.status));
    }
    if solution.duals.len() != dual.program.num_rows() {
        return Err(BuildError::MissingDuals);
    }
    let nd = dual.problem.num_decisions();
    let nl = dual.lifting.lifted_dim();
    let mut slopes = vec![vec![0.0; nl]; nd];
    for (&(d, n), &row) in &dual.matrix_rows {
        slopes[d][n] = solution.duals[row];
    }
    let intercepts: Vec<f64> = dual
        .vector_rows
        .iter()
        .map(|&row| solution.duals[row])
        .collect();
    Ok(PiecewiseAffinePolicy {
        slopes,
        intercepts,
        lifting: dual.lifting.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::{equidistant_breakpoints, BreakpointGrid, Embedding, LiftingOperator};
    use crate::solver::{solve_with, Backend};
    use rand::Rng;

    fn one_stage_toy() -> (MultistageProblem, LiftingOperator, SupportFamily) {
        // min E[psi * x] s.t. x >= psi, psi uniform on [0, 1].
        let problem = MultistageProblem {
            stages: 1,
            uncertainty_dim: 1,
            decisions: vec![DecisionVar {
                name: "x".into(),
                stage: 1,
            }],
            blocks: vec![ConstraintBlock {
                rows: vec![AffineRow {
                    decision_coeffs: vec![-1.0],
                    rhs_const: 0.0,
                    rhs_psi: vec![-1.0],
                }],
            }],
            cost_const: vec![0.0],
            cost_psi: vec![vec![1.0]],
        };
        let grid = BreakpointGrid::trivial(vec![0.0], vec![1.0]).unwrap();
        let lifting = LiftingOperator::new(Embedding::identity(vec![1]), grid).unwrap();
        let family =
            SupportFamily::new(vec![SupportSet::boxed(vec![0.0], vec![1.0]).unwrap()]).unwrap();
        (problem, lifting, family)
    }

    fn uniform01(rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![rng.gen_range(0.0..1.0)]
    }

    #[test]
    fn one_stage_duality_and_policy() {
        let (problem, lifting, family) = one_stage_toy();
        let moments =
            estimate_moments(&problem, &lifting, uniform01, 200_000, 42).unwrap();
        // E[psi] ~ 1/2, E[psi^2] ~ 1/3.
        assert!((moments.mean_cost[0] - 0.5).abs() < 5e-3);
        assert!((moments.cross[0][0] - 1.0 / 3.0).abs() < 5e-3);

        let dual = build_stochastic(problem, lifting, family, &moments).unwrap();
        for backend in [Backend::Bundled, Backend::Clarabel] {
            let r = solve_with(&dual.program, backend).unwrap();
            assert_eq!(r.status, SolveStatus::Optimal);
            assert!(
                (r.objective - moments.cross[0][0]).abs() < 1e-6,
                "{backend:?}: {} vs {}",
                r.objective,
                moments.cross[0][0]
            );
            // Extracted policy is x(psi) = psi.
            let pol = extract_policy(&dual, &r).unwrap();
            assert!((pol.slopes[0][0] - 1.0).abs() < 1e-6, "{backend:?}");
            assert!(pol.intercepts[0].abs() < 1e-6);
            assert!((pol.moment_objective(&moments) - r.objective).abs() < 1e-7);
        }
    }

    #[test]
    fn moments_are_deterministic_and_in_hull() {
        let (problem, _, _) = one_stage_toy();
        // Identity embedding on [-1, 1] with a breakpoint at zero.
        let grid = equidistant_breakpoints(vec![-1.0], vec![1.0], 1).unwrap();
        let lifting = LiftingOperator::new(Embedding::identity(vec![1]), grid.clone()).unwrap();
        let sampler = |rng: &mut ChaCha8Rng| vec![rng.gen_range(-1.0..1.0)];
        let m1 = estimate_moments(&problem, &lifting, sampler, 100_000, 7).unwrap();
        let m2 = estimate_moments(&problem, &lifting, sampler, 100_000, 7).unwrap();
        assert_eq!(m1.mean_lifted, m2.mean_lifted);
        assert_eq!(m1.cross, m2.cross);
        // E[min(psi + 1, 1)] = 3/4 for psi uniform on [-1, 1].
        assert!((m1.mean_lifted[0] - 0.75).abs() < 5e-3);
        // Convexity: the mean lies in the folded hull of the box.
        let rows = hull_constraints(&grid, grid.lower(), grid.upper()).unwrap();
        assert!(rows.iter().all(|r| r.satisfied(&m1.mean_lifted, 1e-9)));
    }

    #[test]
    fn constant_cost_cross_is_rank_one() {
        let (mut problem, lifting, _) = one_stage_toy();
        problem.cost_psi = Vec::new();
        problem.cost_const = vec![2.5];
        let m = estimate_moments(&problem, &lifting, uniform01, 50_000, 3).unwrap();
        for n in 0..lifting.lifted_dim() {
            assert!((m.cross[0][n] - 2.5 * m.mean_lifted[n]).abs() < 1e-12);
        }
        // Point-mass sampler pins the lifted mean exactly.
        let m = estimate_moments(&problem, &lifting, |_| vec![0.3], 10, 0).unwrap();
        assert!((m.mean_lifted[0] - lifting.lift(&[0.3]).unwrap()[0]).abs() < 1e-15);
    }

    #[test]
    fn robust_epigraph_of_constant() {
        // min tau s.t. psi - tau <= 0 over psi in [0, 1]: optimum 1.
        let problem = MultistageProblem {
            stages: 1,
            uncertainty_dim: 1,
            decisions: vec![DecisionVar {
                name: "slack".into(),
                stage: 1,
            }],
            blocks: vec![ConstraintBlock {
                rows: vec![AffineRow {
                    // slack >= psi, and the objective prices the slack.
                    decision_coeffs: vec![-1.0],
                    rhs_const: 0.0,
                    rhs_psi: vec![-1.0],
                }],
            }],
            cost_const: vec![1.0],
            cost_psi: Vec::new(),
        };
        let grid = BreakpointGrid::trivial(vec![0.0], vec![1.0]).unwrap();
        let lifting = LiftingOperator::new(Embedding::identity(vec![1]), grid).unwrap();
        let family =
            SupportFamily::new(vec![SupportSet::boxed(vec![0.0], vec![1.0]).unwrap()]).unwrap();
        let dual = build_robust(problem, lifting, family).unwrap();
        let r = solve_with(&dual.program, Backend::Bundled).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.objective - 1.0).abs() < 1e-7, "{}", r.objective);
    }

    #[test]
    fn robust_toy_affine_rule() {
        // min tau s.t. x(psi) >= psi, tau >= 0.1 x(psi), psi in [0, 1].
        let problem = MultistageProblem {
            stages: 1,
            uncertainty_dim: 1,
            decisions: vec![DecisionVar {
                name: "x".into(),
                stage: 1,
            }],
            blocks: vec![ConstraintBlock {
                rows: vec![AffineRow {
                    decision_coeffs: vec![-1.0],
                    rhs_const: 0.0,
                    rhs_psi: vec![-1.0],
                }],
            }],
            cost_const: vec![0.1],
            cost_psi: Vec::new(),
        };
        let grid = BreakpointGrid::trivial(vec![0.0], vec![1.0]).unwrap();
        let lifting = LiftingOperator::new(Embedding::identity(vec![1]), grid).unwrap();
        let family =
            SupportFamily::new(vec![SupportSet::boxed(vec![0.0], vec![1.0]).unwrap()]).unwrap();
        let dual = build_robust(problem, lifting, family).unwrap();
        let r = solve_with(&dual.program, Backend::Bundled).unwrap();
        assert!((r.objective - 0.1).abs() < 1e-7, "{}", r.objective);
        let pol = extract_policy(&dual, &r).unwrap();
        // Worst-case certificate: max over support of 0.1 x(psi) <= tau*.
        for psi in [0.0, 0.25, 0.5, 1.0] {
            let x = pol.evaluate(&[psi]).unwrap()[0];
            assert!(x >= psi - 1e-7);
            assert!(0.1 * x <= r.objective + 1e-6);
        }
    }

    #[test]
    fn scaled_rows_describe_the_scaled_set() {
        // A point (psi-hat, s) satisfies the block rows iff psi-hat/s lies
        // in the unscaled outer approximation.
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let grid = equidistant_breakpoints(vec![-1.0; 2], vec![1.0; 2], 1).unwrap();
        let lifting = LiftingOperator::new(Embedding::identity(vec![1, 1]), grid.clone()).unwrap();
        let ball = SupportSet::ball(PNorm::Two, 1.0, 2).unwrap();
        let family = SupportFamily::new(vec![ball.clone()]).unwrap();
        let problem = MultistageProblem {
            stages: 2,
            uncertainty_dim: 2,
            decisions: vec![DecisionVar {
                name: "x".into(),
                stage: 2,
            }],
            blocks: vec![ConstraintBlock {
                rows: vec![AffineRow {
                    decision_coeffs: vec![1.0],
                    rhs_const: 1.0,
                    rhs_psi: vec![0.0, 0.0],
                }],
            }],
            cost_const: vec![0.0],
            cost_psi: Vec::new(),
        };
        let dual = build_robust(problem, lifting.clone(), family).unwrap();

        let block_rows: Vec<_> = dual
            .program
            .rows
            .iter()
            .filter(|r| matches!(r.tag, RowTag::Hull { g: 0, k: 0 } | RowTag::Support { g: 0, k: 0 }))
            .cloned()
            .collect();
        let socs: Vec<_> = dual
            .program
            .socs
            .iter()
            .filter(|b| matches!(b.tag, RowTag::Support { g: 0, k: 0 }))
            .cloned()
            .collect();
        assert!(!block_rows.is_empty() && !socs.is_empty());

        let check = |lifted: &[f64], s: f64| -> bool {
            let mut x = vec![0.0; dual.program.num_vars()];
            for (n, &v) in lifted.iter().enumerate() {
                x[dual.psi_vars[0][0][n]] = v * s;
            }
            x[dual.s_vars[0][0]] = s;
            let rows_ok = block_rows.iter().all(|r| {
                let lhs: f64 = r.coeffs.iter().map(|&(j, v)| v * x[j]).sum();
                match r.sense {
                    RowSense::Le => lhs <= 1e-9,
                    RowSense::Ge => lhs >= -1e-9,
                    RowSense::Eq => lhs.abs() <= 1e-9,
                }
            });
            let socs_ok = socs.iter().all(|b| {
                let t = b.exprs[0].eval(&x);
                let nrm: f64 = b.exprs[1..]
                    .iter()
                    .map(|e| e.eval(&x).powi(2))
                    .sum::<f64>()
                    .sqrt();
                nrm <= t + 1e-9
            });
            rows_ok && socs_ok
        };

        let unscaled_member = |lifted: &[f64]| -> bool {
            let hull = hull_constraints(&grid, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
            hull.iter().all(|r| r.satisfied(lifted, 1e-9))
                && ball.contains(&crate::lifting::fold_plus(&grid, lifted).unwrap(), 1e-9)
        };

        for _ in 0..300 {
            let s = rng.gen_range(0.1..3.0);
            let lifted: Vec<f64> = (0..grid.lifted_dim())
                .map(|_| rng.gen_range(-0.2..1.2))
                .collect();
            assert_eq!(check(&lifted, s), unscaled_member(&lifted), "s={s}");
        }
    }
}

//! Bundled dense two-phase revised simplex.
//!
//! Maintains an explicit basis inverse with periodic refactorization.
//! Dantzig pricing by default; Bland's rule engages after a streak of
//! degenerate pivots and guarantees termination. Duals come from the final
//! basis as `y = c_B B^-1`.

use super::{SolveOptions, SolveResult, SolveStatus, SolverError};
use crate::program::{ConicProgram, RowSense, Sense};

const PIVOT_TOL: f64 = 1e-10;
const RCOST_TOL: f64 = 1e-9;
const DEGENERATE_STREAK: usize = 40;
const MAX_DENSE_CELLS: usize = 40_000_000;

struct Standard {
    m: usize,
    cols: Vec<Vec<(usize, f64)>>, // column-wise sparse A
    b: Vec<f64>,                  // >= 0
    cost: Vec<f64>,               // phase-2 costs
    row_sign: Vec<f64>,           // program row -> +-1 after normalization
    kept_rows: Vec<usize>,        // standard row -> program row index
    var_map: Vec<(usize, Option<usize>)>, // program var -> (plus col, minus col)
    artificial_start: usize,
}

fn build_standard(p: &ConicProgram) -> Result<Standard, SolverError> {
    let mut cols: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut cost: Vec<f64> = Vec::new();
    let sense_mult = match p.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };

    // Variable columns (free variables split into a difference).
    let mut var_map = Vec::with_capacity(p.num_vars());
    for j in 0..p.num_vars() {
        let plus = cols.len();
        cols.push(Vec::new());
        cost.push(sense_mult * p.obj[j]);
        let minus = if p.nonneg[j] {
            None
        } else {
            cols.push(Vec::new());
            cost.push(-sense_mult * p.obj[j]);
            Some(plus + 1)
        };
        var_map.push((plus, minus));
    }

    // Rows: drop empty ones (their duals are zero), normalize rhs >= 0.
    let mut kept_rows = Vec::new();
    let mut row_sign = Vec::new();
    let mut b = Vec::new();
    let mut slack_cols: Vec<Option<(usize, f64)>> = Vec::new();
    for (i, row) in p.rows.iter().enumerate() {
        let maxc = row
            .coeffs
            .iter()
            .map(|&(_, v)| v.abs())
            .fold(0.0_f64, f64::max);
        if maxc < 1e-13 {
            let ok = match row.sense {
                RowSense::Le => row.rhs >= -1e-9,
                RowSense::Ge => row.rhs <= 1e-9,
                RowSense::Eq => row.rhs.abs() <= 1e-9,
            };
            if !ok {
                return Err(SolverError::Numerical(format!(
                    "empty row {i} with unsatisfiable rhs {}",
                    row.rhs
                )));
            }
            continue;
        }
        let std_row = b.len();
        let sign = if row.rhs < 0.0 { -1.0 } else { 1.0 };
        kept_rows.push(i);
        row_sign.push(sign);
        b.push(sign * row.rhs);
        for &(j, v) in &row.coeffs {
            let (plus, minus) = var_map[j];
            cols[plus].push((std_row, sign * v));
            if let Some(mcol) = minus {
                cols[mcol].push((std_row, -sign * v));
            }
        }
        let slack = match row.sense {
            RowSense::Le => Some(sign),
            RowSense::Ge => Some(-sign),
            RowSense::Eq => None,
        };
        slack_cols.push(slack.map(|s| (std_row, s)));
    }

    let m = b.len();
    for entry in slack_cols.into_iter().flatten() {
        cols.push(vec![entry]);
        cost.push(0.0);
    }

    let artificial_start = cols.len();
    let n_before = cols.len();
    if (m + 1) * (n_before + m + 1) > MAX_DENSE_CELLS {
        return Err(SolverError::TooLarge {
            rows: m,
            cols: n_before,
        });
    }

    Ok(Standard {
        m,
        cols,
        b,
        cost,
        row_sign,
        kept_rows,
        var_map,
        artificial_start,
    })
}

struct Tableau {
    m: usize,
    binv: Vec<f64>, // row-major m x m
    basis: Vec<usize>,
    xb: Vec<f64>,
    in_basis: Vec<bool>,
}

impl Tableau {
    fn col_times_binv(&self, col: &[(usize, f64)]) -> Vec<f64> {
        let mut w = vec![0.0; self.m];
        for &(i, v) in col {
            let row = &self.binv[..];
            for r in 0..self.m {
                w[r] += row[r * self.m + i] * v;
            }
        }
        w
    }

    fn pivot(&mut self, leave_pos: usize, enter: usize, w: &[f64]) {
        let m = self.m;
        let piv = w[leave_pos];
        let old = self.basis[leave_pos];
        self.in_basis[old] = false;
        self.in_basis[enter] = true;
        self.basis[leave_pos] = enter;

        // Row-reduce the inverse: new_binv = E * binv.
        let inv_piv = 1.0 / piv;
        for j in 0..m {
            self.binv[leave_pos * m + j] *= inv_piv;
        }
        self.xb[leave_pos] *= inv_piv;
        for r in 0..m {
            if r == leave_pos {
                continue;
            }
            let f = w[r];
            if f.abs() < 1e-14 {
                continue;
            }
            for j in 0..m {
                self.binv[r * m + j] -= f * self.binv[leave_pos * m + j];
            }
            self.xb[r] -= f * self.xb[leave_pos];
        }
    }

    fn refactorize(&mut self, std: &Standard) -> Result<(), SolverError> {
        let m = self.m;
        // Gauss-Jordan on [B | I], then recompute xb = binv * b.
        let mut work = vec![0.0; m * 2 * m];
        for (pos, &bj) in self.basis.iter().enumerate() {
            for &(i, v) in &std.cols[bj] {
                work[i * 2 * m + pos] = v;
            }
        }
        for i in 0..m {
            work[i * 2 * m + m + i] = 1.0;
        }
        for c in 0..m {
            let mut best = c;
            let mut bestv = work[c * 2 * m + c].abs();
            for r in (c + 1)..m {
                let v = work[r * 2 * m + c].abs();
                if v > bestv {
                    best = r;
                    bestv = v;
                }
            }
            if bestv < 1e-12 {
                return Err(SolverError::Numerical("singular basis".into()));
            }
            if best != c {
                for j in 0..2 * m {
                    work.swap(c * 2 * m + j, best * 2 * m + j);
                }
            }
            let piv = work[c * 2 * m + c];
            for j in 0..2 * m {
                work[c * 2 * m + j] /= piv;
            }
            for r in 0..m {
                if r == c {
                    continue;
                }
                let f = work[r * 2 * m + c];
                if f == 0.0 {
                    continue;
                }
                for j in c..2 * m {
                    work[r * 2 * m + j] -= f * work[c * 2 * m + j];
                }
            }
        }
        for r in 0..m {
            for j in 0..m {
                self.binv[r * m + j] = work[r * 2 * m + m + j];
            }
        }
        for r in 0..m {
            let mut v = 0.0;
            for i in 0..m {
                v += self.binv[r * m + i] * std.b[i];
            }
            self.xb[r] = v;
        }
        Ok(())
    }

    fn duals(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (pos, &bj) in self.basis.iter().enumerate() {
            let cb = cost[bj];
            if cb == 0.0 {
                continue;
            }
            for i in 0..m {
                y[i] += cb * self.binv[pos * m + i];
            }
        }
        y
    }
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
    IterationLimit,
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    std: &Standard,
    tab: &mut Tableau,
    cost: &[f64],
    banned: &[bool],
    opts: &SolveOptions,
    iters: &mut usize,
) -> Result<PhaseOutcome, SolverError> {
    let mut bland = false;
    let mut streak = 0usize;
    let mut since_refactor = 0usize;
    let refactor_every = 200.max(std.m / 2);

    loop {
        if *iters >= opts.max_iter {
            return Ok(PhaseOutcome::IterationLimit);
        }
        *iters += 1;

        let y = tab.duals(cost);
        // Price nonbasic columns.
        let mut enter: Option<usize> = None;
        let mut best = -RCOST_TOL;
        for j in 0..std.cols.len() {
            if tab.in_basis[j] || banned[j] {
                continue;
            }
            let mut d = cost[j];
            for &(i, v) in &std.cols[j] {
                d -= y[i] * v;
            }
            if d < -RCOST_TOL {
                if bland {
                    enter = Some(j);
                    break;
                }
                if d < best {
                    best = d;
                    enter = Some(j);
                }
            }
        }
        let Some(enter) = enter else {
            return Ok(PhaseOutcome::Optimal);
        };

        let w = tab.col_times_binv(&std.cols[enter]);
        // Ratio test; ties resolved by smallest basic index (Bland-safe).
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for r in 0..std.m {
            if w[r] > PIVOT_TOL {
                let ratio = tab.xb[r].max(0.0) / w[r];
                let better = match leave {
                    None => true,
                    Some(lr) => {
                        ratio < best_ratio - 1e-12
                            || (ratio < best_ratio + 1e-12 && tab.basis[r] < tab.basis[lr])
                    }
                };
                if better {
                    best_ratio = ratio;
                    leave = Some(r);
                }
            }
        }
        let Some(leave) = leave else {
            return Ok(PhaseOutcome::Unbounded);
        };

        if best_ratio <= 1e-12 {
            streak += 1;
            if streak > DEGENERATE_STREAK {
                bland = true;
            }
        } else {
            streak = 0;
            bland = false;
        }

        tab.pivot(leave, enter, &w);
        since_refactor += 1;
        if since_refactor >= refactor_every {
            tab.refactorize(std)?;
            since_refactor = 0;
        }
    }
}

pub(super) fn solve(p: &ConicProgram, opts: &SolveOptions) -> Result<SolveResult, SolverError> {
    let mut std = build_standard(p)?;
    let m = std.m;

    // Initial basis: slacks entering with +1 where available, artificials
    // elsewhere. Columns are laid out [vars | slacks]; artificials follow.
    let mut basis_of_row: Vec<Option<usize>> = vec![None; m];
    let var_cols = std
        .var_map
        .iter()
        .map(|&(plus, minus)| minus.unwrap_or(plus) + 1)
        .max()
        .unwrap_or(0);
    for j in var_cols..std.artificial_start {
        let (i, v) = std.cols[j][0];
        if v > 0.5 && basis_of_row[i].is_none() {
            basis_of_row[i] = Some(j);
        }
    }
    let mut artificials = Vec::new();
    for (i, slot) in basis_of_row.iter_mut().enumerate() {
        if slot.is_none() {
            let j = std.cols.len();
            std.cols.push(vec![(i, 1.0)]);
            std.cost.push(0.0);
            artificials.push(j);
            *slot = Some(j);
        }
    }
    let ncols = std.cols.len();
    let mut in_basis = vec![false; ncols];
    let basis: Vec<usize> = basis_of_row.into_iter().map(|s| s.unwrap()).collect();
    for &j in &basis {
        in_basis[j] = true;
    }
    let mut tab = Tableau {
        m,
        binv: {
            let mut id = vec![0.0; m * m];
            for i in 0..m {
                id[i * m + i] = 1.0;
            }
            id
        },
        basis,
        xb: std.b.clone(),
        in_basis,
    };

    let mut iters = 0usize;
    let banned_none = vec![false; ncols];

    // Phase 1: minimize the artificial mass.
    if !artificials.is_empty() {
        let mut c1 = vec![0.0; ncols];
        for &j in &artificials {
            c1[j] = 1.0;
        }
        match run_phase(&std, &mut tab, &c1, &banned_none, opts, &mut iters)? {
            PhaseOutcome::Optimal => {}
            PhaseOutcome::IterationLimit => {
                return Ok(SolveResult::failed(SolveStatus::IterationLimit))
            }
            PhaseOutcome::Unbounded => {
                return Err(SolverError::Numerical("phase 1 unbounded".into()))
            }
        }
        let infeas: f64 = tab
            .basis
            .iter()
            .zip(&tab.xb)
            .filter(|(j, _)| artificials.contains(j))
            .map(|(_, v)| v.max(0.0))
            .sum();
        let scale = 1.0 + std.b.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if infeas > opts.feas_tol * scale {
            return Ok(SolveResult::failed(SolveStatus::Infeasible));
        }
    }

    // Phase 2: artificials may stay basic at zero but never re-enter.
    let mut banned = vec![false; ncols];
    for &j in &artificials {
        banned[j] = true;
    }
    let mut c2 = std.cost.clone();
    c2.resize(ncols, 0.0);
    for &j in &artificials {
        c2[j] = 0.0;
    }
    let outcome = run_phase(&std, &mut tab, &c2, &banned, opts, &mut iters)?;
    match outcome {
        PhaseOutcome::Optimal => {}
        PhaseOutcome::Unbounded => return Ok(SolveResult::failed(SolveStatus::Unbounded)),
        PhaseOutcome::IterationLimit => {
            return Ok(SolveResult::failed(SolveStatus::IterationLimit))
        }
    }

    tab.refactorize(&std)?;

    // Recover the primal point.
    let mut xstd = vec![0.0; ncols];
    for (pos, &j) in tab.basis.iter().enumerate() {
        xstd[j] = tab.xb[pos];
    }
    let mut primal = vec![0.0; p.num_vars()];
    for (v, &(plus, minus)) in std.var_map.iter().enumerate() {
        primal[v] = xstd[plus] - minus.map_or(0.0, |mc| xstd[mc]);
    }

    // Duals for the kept rows, mapped back through normalization signs.
    let y = tab.duals(&c2);
    let mut duals = vec![0.0; p.rows.len()];
    for (std_row, &prog_row) in std.kept_rows.iter().enumerate() {
        duals[prog_row] = std.row_sign[std_row] * y[std_row];
    }

    let min_obj: f64 = c2.iter().zip(&xstd).map(|(c, x)| c * x).sum();
    let objective = match p.sense {
        Sense::Minimize => min_obj + p.obj_const,
        Sense::Maximize => -min_obj + p.obj_const,
    };
    let dual_obj: f64 = std.b.iter().zip(&y).map(|(b, y)| b * y).sum();

    Ok(SolveResult {
        status: SolveStatus::Optimal,
        primal,
        duals,
        objective,
        gap: Some((min_obj - dual_obj).abs()),
        iterations: iters,
    })
}

//! Clarabel interior-point backend (linear + second-order cones).

use super::{SolveOptions, SolveResult, SolveStatus, SolverError};
use crate::program::{ConicProgram, RowSense, Sense};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

pub(super) fn solve(p: &ConicProgram, opts: &SolveOptions) -> Result<SolveResult, SolverError> {
    let n = p.num_vars();
    let sense_mult = match p.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let q: Vec<f64> = p.obj.iter().map(|c| sense_mult * c).collect();

    // Constraint layout: equalities (zero cone), then inequalities and
    // variable nonnegativity (nonnegative cone), then SOC blocks.
    #[derive(Clone, Copy)]
    enum RowOrigin {
        Program { idx: usize, flip: bool },
        VarBound,
        Soc,
    }
    let mut a_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut b = Vec::new();
    let mut origin = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

    let push_row = |rows: &mut Vec<Vec<(usize, f64)>>,
                        b: &mut Vec<f64>,
                        origin: &mut Vec<RowOrigin>,
                        coeffs: Vec<(usize, f64)>,
                        rhs: f64,
                        org: RowOrigin| {
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(coeffs.len());
        let mut sorted = coeffs;
        sorted.sort_by_key(|&(j, _)| j);
        for (j, v) in sorted {
            if let Some(last) = merged.last_mut() {
                if last.0 == j {
                    last.1 += v;
                    continue;
                }
            }
            merged.push((j, v));
        }
        rows.push(merged);
        b.push(rhs);
        origin.push(org);
    };

    let mut n_eq = 0;
    for (idx, row) in p.rows.iter().enumerate() {
        if row.sense == RowSense::Eq {
            push_row(
                &mut a_rows,
                &mut b,
                &mut origin,
                row.coeffs.clone(),
                row.rhs,
                RowOrigin::Program { idx, flip: false },
            );
            n_eq += 1;
        }
    }
    if n_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_eq));
    }

    let mut n_ineq = 0;
    for (idx, row) in p.rows.iter().enumerate() {
        match row.sense {
            RowSense::Le => {
                push_row(
                    &mut a_rows,
                    &mut b,
                    &mut origin,
                    row.coeffs.clone(),
                    row.rhs,
                    RowOrigin::Program { idx, flip: false },
                );
                n_ineq += 1;
            }
            RowSense::Ge => {
                let coeffs = row.coeffs.iter().map(|&(j, v)| (j, -v)).collect();
                push_row(
                    &mut a_rows,
                    &mut b,
                    &mut origin,
                    coeffs,
                    -row.rhs,
                    RowOrigin::Program { idx, flip: true },
                );
                n_ineq += 1;
            }
            RowSense::Eq => {}
        }
    }
    for (j, &nn) in p.nonneg.iter().enumerate() {
        if nn {
            push_row(
                &mut a_rows,
                &mut b,
                &mut origin,
                vec![(j, -1.0)],
                0.0,
                RowOrigin::VarBound,
            );
            n_ineq += 1;
        }
    }
    if n_ineq > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_ineq));
    }

    for soc in &p.socs {
        for expr in &soc.exprs {
            let coeffs = expr.coeffs.iter().map(|&(j, v)| (j, -v)).collect();
            push_row(
                &mut a_rows,
                &mut b,
                &mut origin,
                coeffs,
                expr.constant,
                RowOrigin::Soc,
            );
        }
        cones.push(SupportedConeT::SecondOrderConeT(soc.exprs.len()));
    }

    let m = a_rows.len();
    let mut col_entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in a_rows.iter().enumerate() {
        for &(j, v) in row {
            if v != 0.0 {
                col_entries[j].push((i, v));
            }
        }
    }
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for entries in &col_entries {
        for &(i, v) in entries {
            rowval.push(i);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    let a = CscMatrix::new(m, n, colptr, rowval, nzval);
    let pmat = CscMatrix::<f64>::zeros((n, n));

    let settings = DefaultSettingsBuilder::default()
        .verbose(opts.verbose)
        .max_iter(500)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-9)
        .build()
        .map_err(|e| SolverError::Numerical(format!("settings: {e}")))?;

    let mut solver = DefaultSolver::new(&pmat, &q, &a, &b, &cones, settings);
    solver.solve();
    let sol = &solver.solution;

    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::IterationLimit,
        _ => SolveStatus::NumericalFailure,
    };
    if status != SolveStatus::Optimal {
        return Ok(SolveResult {
            status,
            primal: Vec::new(),
            duals: Vec::new(),
            objective: f64::NAN,
            gap: None,
            iterations: solver.info.iterations as usize,
        });
    }

    let primal = sol.x.clone();
    let mut duals = vec![0.0; p.rows.len()];
    for (i, org) in origin.iter().enumerate() {
        if let RowOrigin::Program { idx, flip } = org {
            // Clarabel: L = q'x + z'(Ax - b); textbook min-form dual is -z,
            // with the sign cancelling on flipped (>=) rows.
            duals[*idx] = if *flip { sol.z[i] } else { -sol.z[i] };
        }
    }
    let min_obj = sol.obj_val;
    let objective = match p.sense {
        Sense::Minimize => min_obj + p.obj_const,
        Sense::Maximize => -min_obj + p.obj_const,
    };
    Ok(SolveResult {
        status,
        primal,
        duals,
        objective,
        gap: Some((sol.obj_val - sol.obj_val_dual).abs()),
        iterations: solver.info.iterations as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{AffineExpr, ConicProgram, RowSense, RowTag, Sense};

    /// min x + y s.t. ||(x - 1, y)||_2 <= 0.5: optimum at x = 0.5, y = -0.5.
    #[test]
    fn small_socp() {
        let mut p = ConicProgram::new(Sense::Minimize);
        let x = p.add_var("x", false);
        let y = p.add_var("y", false);
        p.set_obj(x, 1.0);
        p.set_obj(y, 1.0);
        p.add_soc(
            vec![
                AffineExpr {
                    coeffs: vec![],
                    constant: 0.5,
                },
                AffineExpr {
                    coeffs: vec![(x, 1.0)],
                    constant: -1.0,
                },
                AffineExpr {
                    coeffs: vec![(y, 1.0)],
                    constant: 0.0,
                },
            ],
            RowTag::General,
        );
        let r = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        let expect = 1.0 - 0.5 * (2.0_f64).sqrt();
        assert!((r.objective - expect).abs() < 1e-7, "{}", r.objective);
    }

    /// The bundled simplex and Clarabel agree on an LP with all row senses.
    #[test]
    fn agrees_with_bundled_on_mixed_rows() {
        let mut p = ConicProgram::new(Sense::Maximize);
        let x = p.add_var("x", true);
        let y = p.add_var("y", false);
        p.set_obj(x, 3.0);
        p.set_obj(y, -1.0);
        p.add_row(vec![(x, 1.0), (y, 1.0)], RowSense::Le, 4.0, RowTag::General);
        p.add_row(vec![(x, 1.0), (y, -1.0)], RowSense::Ge, -2.0, RowTag::General);
        p.add_row(vec![(x, 2.0), (y, 1.0)], RowSense::Eq, 5.0, RowTag::General);
        p.add_row(vec![(x, 1.0)], RowSense::Le, 2.0, RowTag::General);
        let rc = solve(&p, &SolveOptions::default()).unwrap();
        let rb = crate::solver::bundled_lp_solve(&p).unwrap();
        assert!((rc.objective - rb.objective).abs() < 1e-6);
        for (a, b) in rc.duals.iter().zip(&rb.duals) {
            assert!((a - b).abs() < 1e-5, "duals {a} vs {b}");
        }
    }
}

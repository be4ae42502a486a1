//! Pluggable conic-solve interface with a bundled simplex backend.
//!
//! Two backends ship with the crate:
//!
//! * [`Backend::Bundled`] — a dense two-phase revised simplex with Bland's
//!   rule as an anti-cycling fallback and exact dual extraction from the
//!   final basis. Linear (nonnegative-cone) rows only.
//! * [`Backend::Clarabel`] — the Clarabel interior-point solver, which also
//!   advertises second-order cone capability.
//!
//! Dual convention: `SolveResult::duals` holds one multiplier per linear row
//! of the program, reported for the *minimization* form of the problem
//! (maximize programs are solved as `min -c`). They satisfy the textbook
//! identities for that form: `min-obj = b' y` at optimality, `y <= 0` on
//! `<=` rows and `y >= 0` on `>=` rows.

mod clarabel_backend;
mod simplex;

use crate::program::{ConicProgram, Sense};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which solver implementation handles a [`SolveRequest`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    Bundled,
    Clarabel,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Bundled => "bundled",
            Backend::Clarabel => "clarabel",
        }
    }

    /// Whether the backend accepts second-order cone blocks.
    pub fn supports_soc(&self) -> bool {
        matches!(self, Backend::Clarabel)
    }

    pub fn from_name(name: &str) -> Option<Backend> {
        match name.to_ascii_lowercase().as_str() {
            "bundled" | "simplex" => Some(Backend::Bundled),
            "clarabel" => Some(Backend::Clarabel),
            _ => None,
        }
    }

    /// Backend named by the `PADR_SOLVER` environment variable, defaulting
    /// to Clarabel.
    pub fn from_env() -> Backend {
        std::env::var("PADR_SOLVER")
            .ok()
            .and_then(|s| Backend::from_name(&s))
            .unwrap_or(Backend::Clarabel)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptions {
    pub feas_tol: f64,
    pub max_iter: usize,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            feas_tol: 1e-8,
            max_iter: 200_000,
            verbose: false,
        }
    }
}

/// A program handle plus solve options.
pub struct SolveRequest<'a> {
    pub program: &'a ConicProgram,
    pub backend: Backend,
    pub options: SolveOptions,
}

impl<'a> SolveRequest<'a> {
    pub fn new(program: &'a ConicProgram) -> Self {
        SolveRequest {
            program,
            backend: Backend::from_env(),
            options: SolveOptions::default(),
        }
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Primal values for every program variable (valid when `Optimal`).
    pub primal: Vec<f64>,
    /// Min-form dual multiplier per linear row (see module docs).
    pub duals: Vec<f64>,
    /// Objective in the program's own sense.
    pub objective: f64,
    /// Reported duality gap, when the backend certifies one.
    pub gap: Option<f64>,
    pub iterations: usize,
}

impl SolveResult {
    fn failed(status: SolveStatus) -> Self {
        SolveResult {
            status,
            primal: Vec::new(),
            duals: Vec::new(),
            objective: f64::NAN,
            gap: None,
            iterations: 0,
        }
    }

    /// Check the optimality certificates against the program: primal
    /// feasibility residual and (for pure LPs) the duality gap.
    pub fn verify(&self, program: &ConicProgram) -> Result<(), SolverError> {
        if self.status != SolveStatus::Optimal {
            return Err(SolverError::NotOptimal(self.status));
        }
        let bmax = program
            .rows
            .iter()
            .map(|r| r.rhs.abs())
            .fold(0.0_f64, f64::max);
        let resid = program.max_violation(&self.primal);
        if resid > 1e-7 * (1.0 + bmax) {
            return Err(SolverError::ResidualTooLarge(resid));
        }
        if !program.has_socs() {
            let min_obj = match program.sense {
                Sense::Minimize => self.objective - program.obj_const,
                Sense::Maximize => -(self.objective - program.obj_const),
            };
            let dual_obj: f64 = program
                .rows
                .iter()
                .zip(&self.duals)
                .map(|(r, y)| r.rhs * y)
                .sum();
            // Nonnegative variables contribute reduced-cost slack terms;
            // bound the gap from the dual side only when it is meaningful.
            let gap = (min_obj - dual_obj).abs();
            if gap > 1e-6 * (1.0 + min_obj.abs()) {
                return Err(SolverError::GapTooLarge(gap));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("backend '{backend}' does not support second-order cones")]
    UnsupportedCone { backend: &'static str },
    #[error("solve ended with status {0:?}")]
    NotOptimal(SolveStatus),
    #[error("primal residual {0:.3e} exceeds tolerance")]
    ResidualTooLarge(f64),
    #[error("duality gap {0:.3e} exceeds tolerance")]
    GapTooLarge(f64),
    #[error("program too large for the bundled backend ({rows} rows x {cols} cols)")]
    TooLarge { rows: usize, cols: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Solve a request on its selected backend.
pub fn solve(request: &SolveRequest) -> Result<SolveResult, SolverError> {
    if request.program.has_socs() && !request.backend.supports_soc() {
        return Err(SolverError::UnsupportedCone {
            backend: request.backend.name(),
        });
    }
    match request.backend {
        Backend::Bundled => simplex::solve(request.program, &request.options),
        Backend::Clarabel => clarabel_backend::solve(request.program, &request.options),
    }
}

/// Solve with the bundled simplex backend (nonnegative cones only).
pub fn bundled_lp_solve(program: &ConicProgram) -> Result<SolveResult, SolverError> {
    if program.has_socs() {
        return Err(SolverError::UnsupportedCone { backend: "bundled" });
    }
    simplex::solve(program, &SolveOptions::default())
}

/// Convenience: solve on a backend with default options.
pub fn solve_with(program: &ConicProgram, backend: Backend) -> Result<SolveResult, SolverError> {
    solve(&SolveRequest {
        program,
        backend,
        options: SolveOptions::default(),
    })
}

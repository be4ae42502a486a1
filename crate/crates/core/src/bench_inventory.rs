//! Multi-period inventory replenishment benchmark: instance construction,
//! policy building, out-of-sample simulation, experiment sweeps, and
//! cross-validation of the perturbation radius.
//!
//! The decision maker pre-commits replenishment quantities `y_t` before any
//! demand is seen and reorders `x_t` reactively, paying reorder, holding,
//! and backlog costs, with an optional service-level cap on total backlog.
//! Demands follow an autoregressive process whose constituent shocks live
//! on a unit 2-norm ball or sup-norm square.

use crate::lifting::{
    ar_inverse_embedding, equidistant_breakpoints, full_breakpoints, BreakpointGrid,
    LiftingError, LiftingOperator,
};
use crate::reformulation::{
    build_data_driven, build_robust, build_stochastic, embedded_sample_boxes,
    estimate_moments, extract_policy, AffineRow, BuildError, ConstraintBlock, DecisionVar,
    DualProgram, MomentData, MultistageProblem, PiecewiseAffinePolicy,
};
use crate::separation::{cut_loop, CutLogEntry, LoopError, SeparationMode};
use crate::solver::{solve_with, Backend, SolveStatus};
use crate::supports::{eta_box_circumscription, EtaFunction, PNorm, SupportError, SupportFamily, SupportSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampled demand went negative; refusing to clip")]
    NegativeDemand,
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Lifting(#[from] LiftingError),
    #[error(transparent)]
    Support(#[from] SupportError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error("solver error: {0}")]
    Solver(#[from] crate::solver::SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Stochastic,
    Robust,
    DataDriven,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Stochastic => "stochastic",
            Variant::Robust => "robust",
            Variant::DataDriven => "data_driven",
        }
    }

    pub fn from_name(s: &str) -> Option<Variant> {
        match s {
            "stochastic" => Some(Variant::Stochastic),
            "robust" => Some(Variant::Robust),
            "data_driven" | "data-driven" => Some(Variant::DataDriven),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstituentKind {
    Ball2,
    SquareInf,
}

/// Parameters of one inventory instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InventoryInstance {
    pub stages: usize,
    pub reorder_cost: Vec<f64>,
    pub holding_cost: Vec<f64>,
    pub backlog_cost: Vec<f64>,
    pub order_cap: Vec<f64>,
    /// Backlog fraction cap; `f64::INFINITY` disables the service row.
    pub service_level: f64,
    pub mu: f64,
    pub nu: f64,
    pub alpha: f64,
    pub initial_inventory: f64,
    pub constituent: ConstituentKind,
}

impl InventoryInstance {
    /// Stochastic benchmark parameters: service level 0.05, terminal-only
    /// backlog priced at the reorder cost, nu = T / sqrt(mu).
    pub fn stochastic(stages: usize, alpha: f64) -> Self {
        let mu = 200.0;
        let c = 0.1;
        let mut backlog = vec![0.0; stages];
        backlog[stages - 1] = c;
        InventoryInstance {
            stages,
            reorder_cost: vec![c; stages],
            holding_cost: vec![0.02; stages],
            backlog_cost: backlog,
            order_cap: vec![260.0; stages],
            service_level: 0.05,
            mu,
            nu: stages as f64 / mu.sqrt(),
            alpha,
            initial_inventory: 0.0,
            constituent: ConstituentKind::Ball2,
        }
    }

    /// Robust variant shares the stochastic parameters.
    pub fn robust(stages: usize, alpha: f64) -> Self {
        InventoryInstance::stochastic(stages, alpha)
    }

    /// Data-driven parameters: no service cap, running backlog 0.2 with a
    /// terminal 2, nu = T / mu, square constituents.
    pub fn data_driven(stages: usize, alpha: f64) -> Self {
        let mu = 200.0;
        let mut backlog = vec![0.2; stages];
        backlog[stages - 1] = 2.0;
        InventoryInstance {
            stages,
            reorder_cost: vec![0.1; stages],
            holding_cost: vec![0.02; stages],
            backlog_cost: backlog,
            order_cap: vec![260.0; stages],
            service_level: f64::INFINITY,
            mu,
            nu: stages as f64 / mu,
            alpha,
            initial_inventory: 0.0,
            constituent: ConstituentKind::SquareInf,
        }
    }

    fn validate(&self, variant: Variant) -> Result<(), BenchError> {
        let t = self.stages;
        if t == 0 {
            return Err(BenchError::Config("need at least one stage".into()));
        }
        for (name, v) in [
            ("reorder_cost", &self.reorder_cost),
            ("holding_cost", &self.holding_cost),
            ("backlog_cost", &self.backlog_cost),
            ("order_cap", &self.order_cap),
        ] {
            if v.len() != t {
                return Err(BenchError::Config(format!("{name} must have length {t}")));
            }
        }
        if self.order_cap.iter().any(|&c| c < 0.0) {
            return Err(BenchError::Config("order caps must be nonnegative".into()));
        }
        if self.nu <= 0.0 {
            return Err(BenchError::Config("nu must be positive".into()));
        }
        match variant {
            Variant::DataDriven => {
                if self.service_level.is_finite() {
                    return Err(BenchError::Config(
                        "data-driven runs use an unbounded service level".into(),
                    ));
                }
            }
            Variant::Stochastic | Variant::Robust => {
                if !self.service_level.is_finite() || self.service_level < 0.0 {
                    return Err(BenchError::Config(
                        "stochastic/robust runs need a finite service level".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn process(&self) -> DemandProcess {
        DemandProcess {
            stages: self.stages,
            mu: self.mu,
            nu: self.nu,
            alpha: self.alpha,
            constituent: self.constituent,
        }
    }

    pub fn embedding(&self) -> Result<crate::lifting::Embedding, LiftingError> {
        ar_inverse_embedding(self.stages, self.mu, self.nu, self.alpha)
    }

    /// Embedded constituent support (a single subset).
    pub fn constituent_support(&self) -> Result<SupportFamily, SupportError> {
        let set = match self.constituent {
            ConstituentKind::Ball2 => SupportSet::ball(PNorm::Two, 1.0, self.stages)?,
            ConstituentKind::SquareInf => SupportSet::ball(PNorm::Inf, 1.0, self.stages)?,
        };
        SupportFamily::new(vec![set])
    }
}

/// Demand process `psi_t = mu + nu (zeta_t + alpha sum_{t'<t} zeta_{t'})`.
#[derive(Debug, Clone)]
pub struct DemandProcess {
    pub stages: usize,
    pub mu: f64,
    pub nu: f64,
    pub alpha: f64,
    pub constituent: ConstituentKind,
}

impl DemandProcess {
    pub fn forward(&self, zeta: &[f64]) -> Vec<f64> {
        let mut psi = Vec::with_capacity(self.stages);
        let mut hist = 0.0;
        for t in 0..self.stages {
            psi.push(self.mu + self.nu * (zeta[t] + self.alpha * hist));
            hist += zeta[t];
        }
        psi
    }

    pub fn sample_constituents<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let set = match self.constituent {
            ConstituentKind::Ball2 => SupportSet::ball(PNorm::Two, 1.0, self.stages),
            ConstituentKind::SquareInf => SupportSet::ball(PNorm::Inf, 1.0, self.stages),
        }
        .expect("unit constituents are valid");
        set.sample(rng).expect("ball samplers cannot fail")
    }

    pub fn sample_path<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let z = self.sample_constituents(rng);
        self.forward(&z)
    }

    /// Sample paths, flagging negative demand instead of clipping it.
    pub fn sample_paths(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, BenchError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let p = self.sample_path(&mut rng);
            if p.iter().any(|&d| d < 0.0) {
                return Err(BenchError::NegativeDemand);
            }
            out.push(p);
        }
        Ok(out)
    }
}

/// Index layout of the inventory decision vector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InventoryLayout {
    pub stages: usize,
    pub y0: usize,
    pub x0: usize,
    pub h0: usize,
    pub e0: usize,
}

/// Assemble the decision-rule form of the inventory problem: committed
/// orders, reactive orders, and epigraph recourse for holding and backlog,
/// with the inventory balance substituted in closed form.
pub fn make_inventory(
    instance: &InventoryInstance,
    variant: Variant,
) -> Result<(MultistageProblem, InventoryLayout), BenchError> {
    instance.validate(variant)?;
    let t_max = instance.stages;
    let layout = InventoryLayout {
        stages: t_max,
        y0: 0,
        x0: t_max,
        h0: 2 * t_max,
        e0: 3 * t_max,
    };
    let nd = 4 * t_max;
    let mut decisions = Vec::with_capacity(nd);
    for t in 0..t_max {
        decisions.push(DecisionVar {
            name: format!("commit[{t}]"),
            stage: 0,
        });
    }
    for (prefix, _) in [("order", 0), ("hold", 0), ("backlog", 0)] {
        for t in 0..t_max {
            decisions.push(DecisionVar {
                name: format!("{prefix}[{t}]"),
                stage: t + 1,
            });
        }
    }

    let mut rows = Vec::new();
    let zero_psi = vec![0.0; t_max];
    for t in 0..t_max {
        // hold_t >= I_t: sum_{u<=t}(y_u + x_u) - h_t <= -I0 + sum_{u<=t} psi_u
        let mut a = vec![0.0; nd];
        for u in 0..=t {
            a[layout.y0 + u] = 1.0;
            a[layout.x0 + u] = 1.0;
        }
        a[layout.h0 + t] = -1.0;
        let mut bp = zero_psi.clone();
        bp[..=t].fill(1.0);
        rows.push(AffineRow {
            decision_coeffs: a,
            rhs_const: -instance.initial_inventory,
            rhs_psi: bp,
        });
        // hold_t >= 0
        let mut a = vec![0.0; nd];
        a[layout.h0 + t] = -1.0;
        rows.push(AffineRow {
            decision_coeffs: a,
            rhs_const: 0.0,
            rhs_psi: zero_psi.clone(),
        });
        // backlog_t >= -I_t
        let mut a = vec![0.0; nd];
        for u in 0..=t {
            a[layout.y0 + u] = -1.0;
            a[layout.x0 + u] = -1.0;
        }
        a[layout.e0 + t] = -1.0;
        let mut bp = zero_psi.clone();
        bp[..=t].fill(-1.0);
        rows.push(AffineRow {
            decision_coeffs: a,
            rhs_const: instance.initial_inventory,
            rhs_psi: bp,
        });
        // backlog_t >= 0
        let mut a = vec![0.0; nd];
        a[layout.e0 + t] = -1.0;
        rows.push(AffineRow {
            decision_coeffs: a,
            rhs_const: 0.0,
            rhs_psi: zero_psi.clone(),
        });
        // 0 <= x_t <= cap
        let mut a = vec![0.0; nd];
        a[layout.x0 + t] = 1.0;
        rows.push(AffineRow {
            decision_coeffs: a,
            rhs_const: instance.order_cap[t],
            rhs_psi: zero_psi.clone(),
        });
        let mut a = vec![0.0; nd];
        a[layout.x0 + t] = -1.0;
        rows.push(AffineRow {
            decision_coeffs: a,
            rhs_const: 0.0,
            rhs_psi: zero_psi.clone(),
        });
        // y_t >= 0
        let mut a = vec![0.0; nd];
        a[layout.y0 + t] = -1.0;
        rows.push(AffineRow {
            decision_coeffs: a,
            rhs_const: 0.0,
            rhs_psi: zero_psi.clone(),
        });
    }
    if instance.service_level.is_finite() {
        // sum_t backlog_t <= s * sum_t psi_t
        let mut a = vec![0.0; nd];
        for t in 0..t_max {
            a[layout.e0 + t] = 1.0;
        }
        rows.push(AffineRow {
            decision_coeffs: a,
            rhs_const: 0.0,
            rhs_psi: vec![instance.service_level; t_max],
        });
    }

    let mut cost = vec![0.0; nd];
    for t in 0..t_max {
        cost[layout.x0 + t] = instance.reorder_cost[t];
        cost[layout.h0 + t] = instance.holding_cost[t];
        cost[layout.e0 + t] = instance.backlog_cost[t];
    }

    let problem = MultistageProblem {
        stages: t_max,
        uncertainty_dim: t_max,
        decisions,
        blocks: vec![ConstraintBlock { rows }],
        cost_const: cost,
        cost_psi: Vec::new(),
    };
    problem.validate()?;
    Ok((problem, layout))
}

/// Policy roster of the experiments: plain affine rules, lifted rules
/// without cuts, and lifted rules with distance cuts, each with one,
/// three, or eta-derived breakpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    Aff,
    Glift1,
    Glift3,
    GliftF,
    Lift1,
    Lift3,
    LiftF,
}

impl Policy {
    pub const ALL: [Policy; 7] = [
        Policy::Aff,
        Policy::Glift1,
        Policy::Glift3,
        Policy::GliftF,
        Policy::Lift1,
        Policy::Lift3,
        Policy::LiftF,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Aff => "AFF",
            Policy::Glift1 => "GLIFT1",
            Policy::Glift3 => "GLIFT3",
            Policy::GliftF => "GLIFTF",
            Policy::Lift1 => "LIFT1",
            Policy::Lift3 => "LIFT3",
            Policy::LiftF => "LIFTF",
        }
    }

    pub fn from_name(s: &str) -> Option<Policy> {
        Policy::ALL.iter().copied().find(|p| p.name() == s)
    }

    pub fn uses_cuts(&self) -> bool {
        matches!(self, Policy::Lift1 | Policy::Lift3 | Policy::LiftF)
    }

    fn breakpoints(&self) -> Breaks {
        match self {
            Policy::Aff => Breaks::None,
            Policy::Glift1 | Policy::Lift1 => Breaks::Count(1),
            Policy::Glift3 | Policy::Lift3 => Breaks::Count(3),
            Policy::GliftF | Policy::LiftF => Breaks::Full,
        }
    }
}

enum Breaks {
    None,
    Count(usize),
    Full,
}

/// Symmetric uniform grid bounds covering the family's global box.
fn symmetric_uniform_bounds(family: &SupportFamily) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = family.global_bounds();
    let m = lo
        .iter()
        .zip(hi)
        .map(|(&l, &u)| l.abs().max(u.abs()))
        .fold(0.0_f64, f64::max)
        .max(1e-9);
    (vec![-m; lo.len()], vec![m; lo.len()])
}

/// Grid for a policy over the family's (symmetrized) bounds, with the full
/// construction driven by the subset eta or the box circumscription.
fn policy_grid(
    policy: Policy,
    family: &SupportFamily,
) -> Result<BreakpointGrid, BenchError> {
    let (lower, upper) = symmetric_uniform_bounds(family);
    match policy.breakpoints() {
        Breaks::None => Ok(BreakpointGrid::trivial(lower, upper)?),
        Breaks::Count(n) => Ok(equidistant_breakpoints(lower, upper, n)?),
        Breaks::Full => {
            let eta = full_grid_eta(family);
            Ok(full_breakpoints(&eta, lower, upper)?)
        }
    }
}

/// Eta used for the full-breakpoint construction: the single subset's own
/// eta when it has one, the circumscription of the global box otherwise.
fn full_grid_eta(family: &SupportFamily) -> EtaFunction {
    if family.len() == 1 {
        if let Some(eta) = family.subset(0).eta(family.dim()) {
            return eta;
        }
    }
    let (lo, hi) = family.global_bounds();
    eta_box_circumscription(lo, hi)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: Variant,
    pub t_values: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Perturbation radii; only read by data-driven runs.
    pub epsilons: Vec<f64>,
    pub policies: Vec<Policy>,
    /// Random instances per configuration (moment seeds or training draws).
    pub instances: usize,
    pub eval_paths: usize,
    pub train_samples: usize,
    pub moment_samples: usize,
    pub cut_tol: f64,
    pub max_rounds: usize,
    pub base_seed: u64,
    pub backend: Backend,
    pub zero_timings: bool,
    pub collect_cut_log: bool,
}

impl ExperimentConfig {
    pub fn new(kind: Variant) -> Self {
        ExperimentConfig {
            kind,
            t_values: vec![3],
            alphas: vec![0.0],
            epsilons: vec![0.1],
            policies: vec![Policy::Aff, Policy::GliftF, Policy::LiftF],
            instances: match kind {
                Variant::Robust => 1,
                _ => 20,
            },
            eval_paths: 2000,
            train_samples: 10,
            moment_samples: 100_000,
            cut_tol: 1e-7,
            max_rounds: 50,
            base_seed: 2024,
            backend: Backend::from_env(),
            zero_timings: false,
            collect_cut_log: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: Variant,
    pub policy: Policy,
    pub stages: usize,
    pub alpha: f64,
    pub epsilon: Option<f64>,
    pub objective: f64,
    pub oos_mean: f64,
    pub oos_q20: f64,
    pub oos_q80: f64,
    pub solve_sec: f64,
    pub cuts: usize,
    pub status: String,
    /// Mean of per-instance objectives normalized by the matching AFF row.
    pub rel_objective: Option<f64>,
    /// Quantiles across per-instance mean out-of-sample costs (the path
    /// quantiles above pool every path of every instance).
    pub oos_instance_q20: Option<f64>,
    pub oos_instance_q80: Option<f64>,
    pub clamp_total: f64,
    pub service_violation_fraction: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub cut_log: Vec<CutLogEntry>,
}

pub const CSV_HEADER: &str =
    "kind,policy,T,alpha,epsilon,objective,oos_mean,oos_q20,oos_q80,solve_sec,cuts,status";

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let eps = r.epsilon.map_or(String::new(), |e| format!("{e:.6}"));
            out.push_str(&format!(
                "{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.3},{},{}\n",
                r.kind.name(),
                r.policy.name(),
                r.stages,
                r.alpha,
                eps,
                r.objective,
                r.oos_mean,
                r.oos_q20,
                r.oos_q80,
                r.solve_sec,
                r.cuts,
                r.status
            ));
        }
        out
    }

    pub fn cut_log_csv(&self) -> String {
        let mut out = String::from("round,g,k,violation,rect\n");
        for e in &self.cut_log {
            let rect = (0..e.rect.dims())
                .map(|i| format!("{}:{}", e.rect.lo_index(i), e.rect.hi_index(i)))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{},{:.6},{}\n",
                e.round, e.subset, e.constraint, e.violation, rect
            ));
        }
        out
    }
}

/// Deterministic seed derivation for nested experiment loops.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        s = s.wrapping_add(t).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        s ^= s >> 31;
    }
    s
}

/// Simulation outcome over a path set.
#[derive(Debug, Clone)]
pub struct SimStats {
    pub costs: Vec<f64>,
    /// Total magnitude clipped off out-of-range orders.
    pub clamp_total: f64,
    /// Fraction of paths whose realized backlog breaks the service cap.
    pub violation_fraction: f64,
}

impl SimStats {
    pub fn mean(&self) -> f64 {
        self.costs.iter().sum::<f64>() / self.costs.len().max(1) as f64
    }
}

/// Roll a policy forward over demand paths with exact plus-part costs;
/// orders are clamped into their bounds and service violations recorded,
/// not penalized.
pub fn simulate_policy(
    policy: &PiecewiseAffinePolicy,
    instance: &InventoryInstance,
    layout: &InventoryLayout,
    paths: &[Vec<f64>],
) -> Result<SimStats, BenchError> {
    let t_max = instance.stages;
    let mut costs = Vec::with_capacity(paths.len());
    let mut clamp_total = 0.0;
    let mut violations = 0usize;
    for path in paths {
        let dec = policy.evaluate(path)?;
        let mut inventory = instance.initial_inventory;
        let mut cost = 0.0;
        let mut backlog_sum = 0.0;
        for t in 0..t_max {
            let y = dec[layout.y0 + t].max(0.0);
            let raw_x = dec[layout.x0 + t];
            let x = raw_x.clamp(0.0, instance.order_cap[t]);
            clamp_total += (raw_x - x).abs();
            inventory += y + x - path[t];
            let holding = inventory.max(0.0);
            let backlog = (-inventory).max(0.0);
            backlog_sum += backlog;
            cost += instance.reorder_cost[t] * x
                + instance.holding_cost[t] * holding
                + instance.backlog_cost[t] * backlog;
        }
        if instance.service_level.is_finite() {
            let cap = instance.service_level * path.iter().sum::<f64>();
            if backlog_sum > cap + 1e-9 {
                violations += 1;
            }
        }
        costs.push(cost);
    }
    Ok(SimStats {
        violation_fraction: violations as f64 / paths.len().max(1) as f64,
        costs,
        clamp_total,
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

struct SolveOutcome {
    objective: f64,
    cuts: usize,
    status: String,
    seconds: f64,
    policy: Option<PiecewiseAffinePolicy>,
    log: Vec<CutLogEntry>,
}

/// Build and solve one instance for one policy, extracting the decision
/// rule when the solve succeeds.
#[allow(clippy::too_many_arguments)]
fn solve_instance(
    config: &ExperimentConfig,
    instance: &InventoryInstance,
    policy: Policy,
    family: &SupportFamily,
    moments_seed: u64,
    samples: Option<&[Vec<f64>]>,
    epsilon: Option<f64>,
) -> Result<SolveOutcome, BenchError> {
    let (problem, _layout) = make_inventory(instance, config.kind)?;
    let grid = policy_grid(policy, family)?;
    let lifting = LiftingOperator::new(instance.embedding()?, grid)?;

    let t0 = std::time::Instant::now();
    let mut dual: DualProgram = match config.kind {
        Variant::Stochastic => {
            let process = instance.process();
            let moments: MomentData = estimate_moments(
                &problem,
                &lifting,
                |rng| process.sample_path(rng),
                config.moment_samples,
                moments_seed,
            )?;
            build_stochastic(problem, lifting, family.clone(), &moments)?
        }
        Variant::Robust => build_robust(problem, lifting, family.clone())?,
        Variant::DataDriven => {
            let samples = samples.expect("data-driven runs carry training samples");
            build_data_driven(
                problem,
                lifting,
                samples,
                epsilon.expect("data-driven runs carry a radius"),
            )?
        }
    };

    let mode = match config.kind {
        Variant::DataDriven => SeparationMode::HeuristicGeneral,
        _ => SeparationMode::ExactSymmetric,
    };
    let (solution, cuts, status, log) = if policy.uses_cuts() {
        let outcome = cut_loop(
            &mut dual,
            mode,
            config.backend,
            config.cut_tol,
            config.max_rounds,
        )?;
        let status = if outcome.converged {
            "ok".to_string()
        } else {
            "rounds_exhausted".to_string()
        };
        (outcome.solution, outcome.cuts_added, status, outcome.log)
    } else {
        let r = solve_with(&dual.program, config.backend)?;
        if r.status != SolveStatus::Optimal {
            return Ok(SolveOutcome {
                objective: f64::NAN,
                cuts: 0,
                status: format!("{:?}", r.status).to_lowercase(),
                seconds: t0.elapsed().as_secs_f64(),
                policy: None,
                log: Vec::new(),
            });
        }
        (r, 0, "ok".to_string(), Vec::new())
    };

    let extracted = extract_policy(&dual, &solution)?;
    Ok(SolveOutcome {
        objective: solution.objective,
        cuts,
        status,
        seconds: t0.elapsed().as_secs_f64(),
        policy: Some(extracted),
        log,
    })
}

/// Run a full experiment sweep and aggregate per-configuration rows.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, BenchError> {
    let mut report = ExperimentReport::default();
    let epsilons: Vec<Option<f64>> = match config.kind {
        Variant::DataDriven => {
            let mut eps = config.epsilons.clone();
            eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            eps.dedup();
            eps.into_iter().map(Some).collect()
        }
        _ => vec![None],
    };
    let instances = match config.kind {
        Variant::Robust => 1,
        _ => config.instances.max(1),
    };

    for (ti, &t) in config.t_values.iter().enumerate() {
        for (ai, &alpha) in config.alphas.iter().enumerate() {
            let instance = match config.kind {
                Variant::Stochastic => InventoryInstance::stochastic(t, alpha),
                Variant::Robust => InventoryInstance::robust(t, alpha),
                Variant::DataDriven => InventoryInstance::data_driven(t, alpha),
            };
            let process = instance.process();

            // Training draws and support families per instance.
            let mut families = Vec::with_capacity(instances);
            let mut train_sets: Vec<Option<Vec<Vec<f64>>>> = Vec::with_capacity(instances);
            for inst in 0..instances {
                match config.kind {
                    Variant::DataDriven => {
                        let seed =
                            derive_seed(config.base_seed, &[1, ti as u64, ai as u64, inst as u64]);
                        let samples = process.sample_paths(config.train_samples, seed)?;
                        train_sets.push(Some(samples));
                        families.push(None);
                    }
                    _ => {
                        train_sets.push(None);
                        families.push(Some(instance.constituent_support()?));
                    }
                }
            }

            for &epsilon in &epsilons {
                // Per-instance, per-policy objectives for normalization.
                let mut per_policy: Vec<Vec<Option<(SolveOutcome, SimStats)>>> =
                    (0..config.policies.len()).map(|_| Vec::new()).collect();
                for inst in 0..instances {
                    let moments_seed =
                        derive_seed(config.base_seed, &[2, ti as u64, ai as u64, inst as u64]);
                    let eval_seed =
                        derive_seed(config.base_seed, &[3, ti as u64, ai as u64, inst as u64]);
                    let eval_paths = process.sample_paths(config.eval_paths, eval_seed)?;
                    let family = match (&families[inst], &train_sets[inst]) {
                        (Some(f), _) => f.clone(),
                        (None, Some(samples)) => {
                            let lifting = LiftingOperator::new(
                                instance.embedding()?,
                                BreakpointGrid::trivial(
                                    vec![-2.0; instance.stages],
                                    vec![2.0; instance.stages],
                                )?,
                            )?;
                            embedded_sample_boxes(&lifting, samples, epsilon.unwrap_or(0.0))?
                        }
                        _ => unreachable!(),
                    };
                    for (pi, &policy) in config.policies.iter().enumerate() {
                        let outcome = solve_instance(
                            config,
                            &instance,
                            policy,
                            &family,
                            moments_seed,
                            train_sets[inst].as_deref(),
                            epsilon,
                        );
                        match outcome {
                            Ok(o) => {
                                let sim = match &o.policy {
                                    Some(p) => {
                                        let (_, layout) = make_inventory(&instance, config.kind)?;
                                        simulate_policy(p, &instance, &layout, &eval_paths)?
                                    }
                                    None => SimStats {
                                        costs: Vec::new(),
                                        clamp_total: 0.0,
                                        violation_fraction: 0.0,
                                    },
                                };
                                per_policy[pi].push(Some((o, sim)));
                            }
                            Err(e) => {
                                // Record the failure row and keep sweeping.
                                per_policy[pi].push(Some((
                                    SolveOutcome {
                                        objective: f64::NAN,
                                        cuts: 0,
                                        status: format!("error: {e}"),
                                        seconds: 0.0,
                                        policy: None,
                                        log: Vec::new(),
                                    },
                                    SimStats {
                                        costs: Vec::new(),
                                        clamp_total: 0.0,
                                        violation_fraction: 0.0,
                                    },
                                )));
                            }
                        }
                    }
                }

                // AFF objectives for normalization.
                let aff_index = config.policies.iter().position(|&p| p == Policy::Aff);
                for (pi, &policy) in config.policies.iter().enumerate() {
                    let outcomes = &per_policy[pi];
                    let mut objectives = Vec::new();
                    let mut pooled_costs = Vec::new();
                    let mut inst_means = Vec::new();
                    let mut seconds = 0.0;
                    let mut cuts = 0usize;
                    let mut status = "ok".to_string();
                    let mut rels = Vec::new();
                    let mut clamp_total = 0.0;
                    let mut violation_fraction = 0.0;
                    for (inst, slot) in outcomes.iter().enumerate() {
                        let Some((o, sim)) = slot else { continue };
                        if o.status.starts_with("error") || o.policy.is_none() {
                            status = o.status.clone();
                            continue;
                        }
                        if o.status != "ok" && status == "ok" {
                            status = o.status.clone();
                        }
                        objectives.push(o.objective);
                        seconds += o.seconds;
                        cuts += o.cuts;
                        clamp_total += sim.clamp_total;
                        violation_fraction += sim.violation_fraction;
                        if !sim.costs.is_empty() {
                            inst_means.push(sim.mean());
                            pooled_costs.extend_from_slice(&sim.costs);
                        }
                        if let Some(ai_idx) = aff_index {
                            if let Some(Some((aff, _))) = per_policy[ai_idx].get(inst) {
                                if aff.objective.is_finite() && aff.objective.abs() > 1e-12 {
                                    rels.push(o.objective / aff.objective);
                                }
                            }
                        }
                        if config.collect_cut_log {
                            report.cut_log.extend(o.log.iter().cloned());
                        }
                    }
                    let n_ok = objectives.len().max(1) as f64;
                    pooled_costs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    inst_means.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    report.rows.push(ReportRow {
                        kind: config.kind,
                        policy,
                        stages: t,
                        alpha,
                        epsilon,
                        objective: objectives.iter().sum::<f64>() / n_ok,
                        oos_mean: if pooled_costs.is_empty() {
                            f64::NAN
                        } else {
                            pooled_costs.iter().sum::<f64>() / pooled_costs.len() as f64
                        },
                        oos_q20: quantile(&pooled_costs, 0.2),
                        oos_q80: quantile(&pooled_costs, 0.8),
                        solve_sec: if config.zero_timings { 0.0 } else { seconds },
                        cuts,
                        status,
                        rel_objective: if rels.is_empty() {
                            None
                        } else {
                            Some(rels.iter().sum::<f64>() / rels.len() as f64)
                        },
                        oos_instance_q20: (!inst_means.is_empty())
                            .then(|| quantile(&inst_means, 0.2)),
                        oos_instance_q80: (!inst_means.is_empty())
                            .then(|| quantile(&inst_means, 0.8)),
                        clamp_total,
                        service_violation_fraction: violation_fraction / n_ok,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvRow {
    pub epsilon: f64,
    pub mean_heldout_cost: f64,
}

/// Five-fold (by default) cross-validation of the perturbation radius:
/// train on the complement of each fold, score the held-out paths with the
/// true costs, and return the radius with the lowest mean held-out cost
/// (ties to the smaller radius).
pub fn cross_validate(
    config: &ExperimentConfig,
    instance: &InventoryInstance,
    training_paths: &[Vec<f64>],
    epsilon_grid: &[f64],
    folds: usize,
    seed: u64,
    policy: Policy,
) -> Result<(f64, Vec<CvRow>), BenchError> {
    if training_paths.len() < folds {
        return Err(BenchError::Config(format!(
            "{} training paths cannot fill {folds} folds",
            training_paths.len()
        )));
    }
    let mut grid: Vec<f64> = epsilon_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();

    // Seeded shuffle into folds.
    let mut order: Vec<usize> = (0..training_paths.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let fold_of = |pos: usize| pos % folds;

    let (_, layout) = make_inventory(instance, Variant::DataDriven)?;
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &eps in &grid {
        let mut held_costs = Vec::new();
        for fold in 0..folds {
            let mut train = Vec::new();
            let mut held = Vec::new();
            for (pos, &idx) in order.iter().enumerate() {
                if fold_of(pos) == fold {
                    held.push(training_paths[idx].clone());
                } else {
                    train.push(training_paths[idx].clone());
                }
            }
            let (problem, _) = make_inventory(instance, Variant::DataDriven)?;
            let grid_bp = {
                let lifting = LiftingOperator::new(
                    instance.embedding()?,
                    BreakpointGrid::trivial(
                        vec![-2.0; instance.stages],
                        vec![2.0; instance.stages],
                    )?,
                )?;
                let family = embedded_sample_boxes(&lifting, &train, eps)?;
                policy_grid(policy, &family)?
            };
            let lifting = LiftingOperator::new(instance.embedding()?, grid_bp)?;
            let mut dual = build_data_driven(problem, lifting, &train, eps)?;
            let solution = if policy.uses_cuts() {
                cut_loop(
                    &mut dual,
                    SeparationMode::HeuristicGeneral,
                    config.backend,
                    config.cut_tol,
                    config.max_rounds,
                )?
                .solution
            } else {
                let r = solve_with(&dual.program, config.backend)?;
                if r.status != SolveStatus::Optimal {
                    return Err(BenchError::Solver(
                        crate::solver::SolverError::NotOptimal(r.status),
                    ));
                }
                r
            };
            let pol = extract_policy(&dual, &solution)?;
            let stats = simulate_policy(&pol, instance, &layout, &held)?;
            held_costs.extend(stats.costs);
        }
        let mean = held_costs.iter().sum::<f64>() / held_costs.len().max(1) as f64;
        table.push(CvRow {
            epsilon: eps,
            mean_heldout_cost: mean,
        });
        let better = match best {
            None => true,
            Some((_, cost)) => mean < cost - 1e-12,
        };
        if better {
            best = Some((eps, mean));
        }
    }
    Ok((best.expect("nonempty grid").0, table))
}

/// Minimal SVG line chart of mean relative objectives against the horizon.
pub fn improvement_svg(report: &ExperimentReport) -> String {
    let mut policies: Vec<Policy> = Vec::new();
    let mut t_values: Vec<usize> = Vec::new();
    for r in &report.rows {
        if !policies.contains(&r.policy) {
            policies.push(r.policy);
        }
        if !t_values.contains(&r.stages) {
            t_values.push(r.stages);
        }
    }
    t_values.sort_unstable();
    let (w, h, ml, mb) = (640.0, 400.0, 60.0, 40.0);
    let mut min_y = 1.0_f64;
    let mut max_y = 1.0_f64;
    for r in &report.rows {
        if let Some(rel) = r.rel_objective {
            min_y = min_y.min(rel);
            max_y = max_y.max(rel);
        }
    }
    let span = (max_y - min_y).max(1e-6);
    let sx = |t: usize| {
        let pos = t_values.iter().position(|&v| v == t).unwrap_or(0) as f64;
        ml + pos / (t_values.len().max(2) - 1) as f64 * (w - ml - 20.0)
    };
    let sy = |v: f64| (h - mb) - (v - min_y) / span * (h - mb - 20.0);
    let colors = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    ];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"16\" font-size=\"13\">mean objective relative to AFF vs T</text>\n",
        ml
    );
    for (ci, &p) in policies.iter().enumerate() {
        let pts: Vec<String> = t_values
            .iter()
            .filter_map(|&t| {
                report
                    .rows
                    .iter()
                    .find(|r| r.policy == p && r.stages == t)
                    .and_then(|r| r.rel_objective)
                    .map(|rel| format!("{:.1},{:.1}", sx(t), sy(rel)))
            })
            .collect();
        if pts.is_empty() {
            continue;
        }
        let color = colors[ci % colors.len()];
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            pts.join(" "),
            w - 70.0,
            30.0 + 14.0 * ci as f64,
            p.name()
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - 20.0,
        h - mb
    ));
    for &t in &t_values {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" font-size=\"11\">T={t}</text>\n",
            sx(t) - 10.0,
            h - mb + 16.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

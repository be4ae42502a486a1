//! Sparse linear/conic program container shared by the reformulation builders
//! and the solver backends, together with a plain-text triplet dump format
//! for external debugging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Optimization direction of a [`ConicProgram`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// Relation of a linear row to its right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSense {
    Le,
    Ge,
    Eq,
}

/// Role tags let downstream code (policy extraction, cut bookkeeping) locate
/// row blocks without string matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowTag {
    General,
    /// Moment-matching row pairing decision `dec` with lifted component `lifted`.
    MomentMatrix { dec: usize, lifted: usize },
    /// Moment-matching row for the constant part of decision `dec`.
    MomentVector { dec: usize },
    /// Witness linkage row for subset `g`, constraint `k`, embedded dim `dim`.
    Link { g: usize, k: usize, dim: usize },
    /// Scaled support-membership row.
    Support { g: usize, k: usize },
    /// Scaled folded-hull row.
    Hull { g: usize, k: usize },
    /// Distance cut row; `id` indexes the program's cut registry.
    Cut { g: usize, k: usize, id: usize },
}

/// One linear row `coeffs · x  (<=|>=|=)  rhs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
    pub tag: RowTag,
}

/// Affine expression `coeffs · x + constant` used inside cone blocks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AffineExpr {
    pub coeffs: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, v)| v * x[j]).sum::<f64>() + self.constant
    }
}

/// Second-order cone block: `exprs[0] >= || exprs[1..] ||_2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SocBlock {
    pub exprs: Vec<AffineExpr>,
    pub tag: RowTag,
}

/// A linear program with optional second-order cone blocks.
///
/// Variables are free unless flagged in `nonneg`. Rows are kept in insertion
/// order; dual multipliers in a [`crate::solver::SolveResult`] are indexed the
/// same way.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConicProgram {
    pub sense: Sense,
    num_vars: usize,
    pub var_names: Vec<String>,
    pub nonneg: Vec<bool>,
    pub obj: Vec<f64>,
    pub obj_const: f64,
    pub rows: Vec<Row>,
    pub socs: Vec<SocBlock>,
}

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("variable index {0} out of range")]
    BadVariable(usize),
    #[error("malformed program dump at line {line}: {reason}")]
    BadDump { line: usize, reason: String },
}

impl ConicProgram {
    pub fn new(sense: Sense) -> Self {
        ConicProgram {
            sense,
            num_vars: 0,
            var_names: Vec::new(),
            nonneg: Vec::new(),
            obj: Vec::new(),
            obj_const: 0.0,
            rows: Vec::new(),
            socs: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, nonneg: bool) -> usize {
        self.num_vars += 1;
        self.var_names.push(name.into());
        self.nonneg.push(nonneg);
        self.obj.push(0.0);
        self.num_vars - 1
    }

    pub fn set_obj(&mut self, var: usize, coeff: f64) {
        self.obj[var] = coeff;
    }

    pub fn add_obj(&mut self, var: usize, coeff: f64) {
        self.obj[var] += coeff;
    }

    pub fn add_row(
        &mut self,
        coeffs: Vec<(usize, f64)>,
        sense: RowSense,
        rhs: f64,
        tag: RowTag,
    ) -> usize {
        debug_assert!(coeffs.iter().all(|&(j, _)| j < self.num_vars));
        self.rows.push(Row {
            coeffs,
            sense,
            rhs,
            tag,
        });
        self.rows.len() - 1
    }

    pub fn add_soc(&mut self, exprs: Vec<AffineExpr>, tag: RowTag) -> usize {
        self.socs.push(SocBlock { exprs, tag });
        self.socs.len() - 1
    }

    pub fn has_socs(&self) -> bool {
        !self.socs.is_empty()
    }

    /// Objective value of a primal point, in the program's own sense.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.obj.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + self.obj_const
    }

    /// Worst violation of the linear rows and cone blocks at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for row in &self.rows {
            let lhs: f64 = row.coeffs.iter().map(|&(j, v)| v * x[j]).sum();
            let viol = match row.sense {
                RowSense::Le => lhs - row.rhs,
                RowSense::Ge => row.rhs - lhs,
                RowSense::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(viol);
        }
        for soc in &self.socs {
            let t = soc.exprs[0].eval(x);
            let norm = soc.exprs[1..]
                .iter()
                .map(|e| e.eval(x).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(norm - t);
        }
        for (j, &nn) in self.nonneg.iter().enumerate() {
            if nn {
                worst = worst.max(-x[j]);
            }
        }
        worst
    }

    /// Serialize in the line-based sparse triplet format.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let sense = match self.sense {
            Sense::Minimize => "min",
            Sense::Maximize => "max",
        };
        out.push_str(&format!(
            "program {} vars {} rows {} socs {}\n",
            sense,
            self.num_vars,
            self.rows.len(),
            self.socs.len()
        ));
        out.push_str(&format!("objconst {}\n", fmt_f64(self.obj_const)));
        for (j, c) in self.obj.iter().enumerate() {
            if *c != 0.0 {
                out.push_str(&format!("obj {} {}\n", j, fmt_f64(*c)));
            }
        }
        for (j, nn) in self.nonneg.iter().enumerate() {
            if *nn {
                out.push_str(&format!("nonneg {}\n", j));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            let s = match row.sense {
                RowSense::Le => "le",
                RowSense::Ge => "ge",
                RowSense::Eq => "eq",
            };
            out.push_str(&format!("row {} {} {}\n", i, s, fmt_f64(row.rhs)));
            for &(j, v) in &row.coeffs {
                out.push_str(&format!("a {} {} {}\n", i, j, fmt_f64(v)));
            }
        }
        for (k, soc) in self.socs.iter().enumerate() {
            out.push_str(&format!("soc {} {}\n", k, soc.exprs.len()));
            for (e, expr) in soc.exprs.iter().enumerate() {
                out.push_str(&format!("socconst {} {} {}\n", k, e, fmt_f64(expr.constant)));
                for &(j, v) in &expr.coeffs {
                    out.push_str(&format!("soca {} {} {} {}\n", k, e, j, fmt_f64(v)));
                }
            }
        }
        out
    }

    /// Parse a dump produced by [`ConicProgram::dump`]. Row tags and variable
    /// names are not round-tripped; the numeric content is.
    pub fn parse_dump(text: &str) -> Result<Self, ProgramError> {
        let bad = |line: usize, reason: &str| ProgramError::BadDump {
            line,
            reason: reason.to_string(),
        };
        let mut prog: Option<ConicProgram> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok[0] {
                "program" => {
                    if tok.len() != 8 {
                        return Err(bad(ln, "expected: program <sense> vars N rows M socs S"));
                    }
                    let sense = match tok[1] {
                        "min" => Sense::Minimize,
                        "max" => Sense::Maximize,
                        _ => return Err(bad(ln, "sense must be min|max")),
                    };
                    let nv: usize = tok[3].parse().map_err(|_| bad(ln, "bad var count"))?;
                    let mut p = ConicProgram::new(sense);
                    for j in 0..nv {
                        p.add_var(format!("x{j}"), false);
                    }
                    prog = Some(p);
                }
                _ => {
                    let p = prog.as_mut().ok_or_else(|| bad(ln, "missing header"))?;
                    let f = |s: &str| s.parse::<f64>().map_err(|_| bad(ln, "bad float"));
                    let u = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, "bad index"));
                    match tok[0] {
                        "objconst" => p.obj_const = f(tok[1])?,
                        "obj" => {
                            let j = u(tok[1])?;
                            p.obj[j] = f(tok[2])?;
                        }
                        "nonneg" => {
                            let j = u(tok[1])?;
                            p.nonneg[j] = true;
                        }
                        "row" => {
                            let sense = match tok[2] {
                                "le" => RowSense::Le,
                                "ge" => RowSense::Ge,
                                "eq" => RowSense::Eq,
                                _ => return Err(bad(ln, "row sense must be le|ge|eq")),
                            };
                            p.add_row(Vec::new(), sense, f(tok[3])?, RowTag::General);
                        }
                        "a" => {
                            let i = u(tok[1])?;
                            if i >= p.rows.len() {
                                return Err(bad(ln, "coefficient before its row"));
                            }
                            let j = u(tok[2])?;
                            let v = f(tok[3])?;
                            p.rows[i].coeffs.push((j, v));
                        }
                        "soc" => {
                            let n = u(tok[2])?;
                            p.add_soc(vec![AffineExpr::default(); n], RowTag::General);
                        }
                        "socconst" => {
                            let k = u(tok[1])?;
                            let e = u(tok[2])?;
                            p.socs[k].exprs[e].constant = f(tok[3])?;
                        }
                        "soca" => {
                            let k = u(tok[1])?;
                            let e = u(tok[2])?;
                            let j = u(tok[3])?;
                            p.socs[k].exprs[e].coeffs.push((j, f(tok[4])?));
                        }
                        other => return Err(bad(ln, &format!("unknown record '{other}'"))),
                    }
                }
            }
        }
        prog.ok_or_else(|| bad(0, "empty dump"))
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v:?}")
}

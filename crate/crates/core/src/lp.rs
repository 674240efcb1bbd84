//! Linear programs and a bounded-variable primal simplex solver.
//!
//! Programs are stored in minimization form with sparse constraint rows,
//! per-variable bounds (infinities allowed) and integrality flags. The
//! solver itself ignores the integrality flags; branch-and-bound drops
//! them via [`crate::bnb::relax`] and re-tightens bounds per node.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute feasibility tolerance for constraint rows and bounds.
pub const FEASIBILITY_TOL: f64 = 1e-7;
/// A variable is considered integral when within this distance of an integer.
pub const INTEGRALITY_TOL: f64 = 1e-6;
/// Pivot elements smaller than this are treated as zero.
pub const PIVOT_TOL: f64 = 1e-10;

const REDUCED_COST_TOL: f64 = 1e-9;

/// Constraint relation of a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

/// One sparse constraint row `sum(coeffs) rel rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub rel: Relation,
    pub rhs: f64,
}

/// Which side of a variable's box to tighten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundSide {
    Lower,
    Upper,
}

/// A mixed-integer linear program in minimization form.
///
/// Infinite bounds are stored as `f64::INFINITY` / `f64::NEG_INFINITY` and
/// serialize to JSON `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LpJson", into = "LpJson")]
pub struct LinearProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub integer: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct LpJson {
    num_vars: usize,
    objective: Vec<f64>,
    rows: Vec<Row>,
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
    integer: Vec<bool>,
}

impl From<LinearProgram> for LpJson {
    fn from(lp: LinearProgram) -> Self {
        LpJson {
            num_vars: lp.num_vars,
            objective: lp.objective,
            rows: lp.rows,
            lower: lp.lower.iter().map(|&v| finite_opt(v)).collect(),
            upper: lp.upper.iter().map(|&v| finite_opt(v)).collect(),
            integer: lp.integer,
        }
    }
}

fn finite_opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl TryFrom<LpJson> for LinearProgram {
    type Error = LpError;

    fn try_from(j: LpJson) -> Result<Self, LpError> {
        let lp = LinearProgram {
            num_vars: j.num_vars,
            objective: j.objective,
            rows: j.rows,
            lower: j
                .lower
                .iter()
                .map(|v| v.unwrap_or(f64::NEG_INFINITY))
                .collect(),
            upper: j.upper.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect(),
            integer: j.integer,
        };
        lp.validate()?;
        Ok(lp)
    }
}

#[derive(Debug, Error)]
pub enum LpError {
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid program: {0}")]
    InvalidProgram(String),
}

impl LinearProgram {
    /// An all-continuous program with free variables and no rows.
    pub fn new(num_vars: usize, objective: Vec<f64>) -> Self {
        LinearProgram {
            num_vars,
            objective,
            rows: Vec::new(),
            lower: vec![f64::NEG_INFINITY; num_vars],
            upper: vec![f64::INFINITY; num_vars],
            integer: vec![false; num_vars],
        }
    }

    /// Checks structural invariants: column indices in range, vector lengths
    /// equal to `num_vars`, no NaN bounds. Crossing bound pairs are allowed;
    /// they make the program infeasible, not invalid.
    pub fn validate(&self) -> Result<(), LpError> {
        if self.objective.len() != self.num_vars
            || self.lower.len() != self.num_vars
            || self.upper.len() != self.num_vars
            || self.integer.len() != self.num_vars
        {
            return Err(LpError::InvalidProgram(
                "vector lengths must equal num_vars".into(),
            ));
        }
        for (ri, row) in self.rows.iter().enumerate() {
            for &(col, _) in &row.coeffs {
                if col >= self.num_vars {
                    return Err(LpError::InvalidProgram(format!(
                        "row {ri} references column {col} >= num_vars"
                    )));
                }
            }
        }
        for j in 0..self.num_vars {
            if self.lower[j].is_nan() || self.upper[j].is_nan() {
                return Err(LpError::InvalidProgram(format!("NaN bound on var {j}")));
            }
        }
        Ok(())
    }

    /// Number of constraint rows.
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Evaluates the objective at a point.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// True if `x` satisfies every row and bound within `tol`.
    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        if x.len() != self.num_vars {
            return false;
        }
        for j in 0..self.num_vars {
            if x[j] < self.lower[j] - tol || x[j] > self.upper[j] + tol {
                return false;
            }
        }
        self.rows.iter().all(|row| {
            let lhs: f64 = row.coeffs.iter().map(|&(c, v)| v * x[c]).sum();
            match row.rel {
                Relation::Le => lhs <= row.rhs + tol,
                Relation::Ge => lhs >= row.rhs - tol,
                Relation::Eq => (lhs - row.rhs).abs() <= tol,
            }
        })
    }
}

/// Returns a copy of `lp` with one variable bound tightened.
///
/// Tightening keeps the stricter of the old and new bound, so repeated
/// branching can only shrink a box.
pub fn with_bound(lp: &LinearProgram, var: usize, side: BoundSide, value: f64) -> LinearProgram {
    assert!(var < lp.num_vars, "with_bound: variable out of range");
    let mut out = lp.clone();
    match side {
        BoundSide::Upper => out.upper[var] = out.upper[var].min(value),
        BoundSide::Lower => out.lower[var] = out.lower[var].max(value),
    }
    out
}

/// Solver status of an LP relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Result of [`solve_lp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpOutcome {
    pub status: LpStatus,
    /// Present iff `status == Optimal`.
    pub solution: Option<Vec<f64>>,
    /// Present iff `status == Optimal`.
    pub objective_value: Option<f64>,
    /// Simplex iterations used (pivots plus bound flips, both phases).
    pub iterations: usize,
}

impl LpOutcome {
    fn terminal(status: LpStatus, iterations: usize) -> Self {
        LpOutcome {
            status,
            solution: None,
            objective_value: None,
            iterations,
        }
    }
}

/// A reusable starting basis from a previous solve of a related program.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    /// Basic column per tableau row, in structural-then-slack indexing.
    pub columns: Vec<usize>,
    /// Nonbasic rest position per column (`true` = at upper bound).
    pub at_upper: Vec<bool>,
}

/// Solves the LP with a bounded-variable primal simplex.
///
/// Deterministic for a fixed input: entering variables are priced by most
/// negative reduced cost with lowest-index tie-breaks, and the solver falls
/// back to Bland's rule when the objective stalls. A `warm_start` basis is
/// used when it is still primal feasible under the current bounds; otherwise
/// the solve silently restarts cold.
pub fn solve_lp(lp: &LinearProgram, warm_start: Option<&Basis>) -> Result<LpOutcome, LpError> {
    solve_lp_with_basis(lp, warm_start).map(|(o, _)| o)
}

/// Like [`solve_lp`] but also returns the final basis for warm starts.
pub fn solve_lp_with_basis(
    lp: &LinearProgram,
    warm_start: Option<&Basis>,
) -> Result<(LpOutcome, Option<Basis>), LpError> {
    lp.validate()?;
    for j in 0..lp.num_vars {
        if lp.lower[j] > lp.upper[j] + FEASIBILITY_TOL {
            return Ok((LpOutcome::terminal(LpStatus::Infeasible, 0), None));
        }
    }
    let mut tableau = Tableau::build(lp);
    match tableau.solve(warm_start) {
        Ok(outcome) => {
            let basis = (outcome.status == LpStatus::Optimal).then(|| tableau.extract_basis());
            Ok((outcome, basis))
        }
        Err(first) => {
            // Bound-perturbation retry: nudge every finite bound outward by a
            // deterministic epsilon and solve once more before giving up.
            let mut perturbed = lp.clone();
            for j in 0..perturbed.num_vars {
                let eps = 1e-9 * (1.0 + (j % 7) as f64);
                if perturbed.lower[j].is_finite() {
                    perturbed.lower[j] -= eps * perturbed.lower[j].abs().max(1.0);
                }
                if perturbed.upper[j].is_finite() {
                    perturbed.upper[j] += eps * perturbed.upper[j].abs().max(1.0);
                }
            }
            let mut retry = Tableau::build(&perturbed);
            match retry.solve(None) {
                Ok(outcome) => {
                    let basis =
                        (outcome.status == LpStatus::Optimal).then(|| retry.extract_basis());
                    Ok((outcome, basis))
                }
                Err(second) => Err(LpError::NumericalFailure(format!(
                    "{first}; after perturbation: {second}"
                ))),
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum VarState {
    Basic(usize),
    AtLower,
    AtUpper,
    /// Free variable resting at zero.
    FreeZero,
}

#[derive(Debug, Error)]
enum SimplexError {
    #[error("iteration limit exceeded")]
    IterationLimit,
    #[error("solution failed feasibility recheck")]
    LostFeasibility,
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
}

/// Dense simplex tableau over structural + slack + artificial columns.
///
/// `t` is kept equal to B^-1 * A and `rhs` to B^-1 * b throughout; basic
/// values are updated incrementally per pivot and refreshed from `rhs` at
/// phase boundaries to limit drift.
struct Tableau {
    m: usize,
    n_struct: usize,
    n_total: usize,
    t: Vec<f64>,
    rhs: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<VarState>,
    xb: Vec<f64>,
    iterations: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let m = lp.rows.len();
        let n = lp.num_vars;
        let n_total = n + 2 * m;
        let mut t = vec![0.0; m * n_total];
        let mut rhs = vec![0.0; m];
        let mut lo = vec![0.0; n_total];
        let mut hi = vec![0.0; n_total];
        lo[..n].copy_from_slice(&lp.lower);
        hi[..n].copy_from_slice(&lp.upper);
        for (i, row) in lp.rows.iter().enumerate() {
            for &(col, val) in &row.coeffs {
                t[i * n_total + col] += val;
            }
            t[i * n_total + n + i] = 1.0;
            rhs[i] = row.rhs;
            let (slo, shi) = match row.rel {
                Relation::Le => (0.0, f64::INFINITY),
                Relation::Ge => (f64::NEG_INFINITY, 0.0),
                Relation::Eq => (0.0, 0.0),
            };
            lo[n + i] = slo;
            hi[n + i] = shi;
            // Artificial columns stay pinned at zero unless phase 1 opens them.
            lo[n + m + i] = 0.0;
            hi[n + m + i] = 0.0;
        }
        let mut cost = vec![0.0; n_total];
        cost[..n].copy_from_slice(&lp.objective);
        Tableau {
            m,
            n_struct: n,
            n_total,
            t,
            rhs,
            lo,
            hi,
            cost,
            basis: Vec::new(),
            state: Vec::new(),
            xb: Vec::new(),
            iterations: 0,
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.n_total + j]
    }

    fn rest_value(&self, j: usize) -> f64 {
        match self.state[j] {
            VarState::Basic(r) => self.xb[r],
            VarState::AtLower => self.lo[j],
            VarState::AtUpper => self.hi[j],
            VarState::FreeZero => 0.0,
        }
    }

    fn default_rest(&self, j: usize) -> VarState {
        if self.lo[j].is_finite() {
            VarState::AtLower
        } else if self.hi[j].is_finite() {
            VarState::AtUpper
        } else {
            VarState::FreeZero
        }
    }

    /// Recomputes basic values from B^-1 b minus nonbasic contributions.
    fn refresh_xb(&mut self) {
        for i in 0..self.m {
            let mut v = self.rhs[i];
            for j in 0..self.n_total {
                if matches!(self.state[j], VarState::Basic(_)) {
                    continue;
                }
                let a = self.at(i, j);
                if a != 0.0 {
                    let rest = self.rest_value(j);
                    if rest != 0.0 {
                        v -= a * rest;
                    }
                }
            }
            self.xb[i] = v;
        }
    }

    fn solve(&mut self, warm: Option<&Basis>) -> Result<LpOutcome, SimplexError> {
        let warm_ok = warm.map(|b| self.try_warm_start(b)).unwrap_or(false);
        if !warm_ok {
            if self.cold_start() {
                let reduced_base = self.phase1_costs();
                match self.pivot_loop(&reduced_base, true)? {
                    // Phase 1 minimizes a sum of nonnegative variables, so an
                    // unbounded ray here is a numerical artifact.
                    PhaseOutcome::Unbounded => return Err(SimplexError::LostFeasibility),
                    PhaseOutcome::Optimal => {}
                }
                self.refresh_xb();
                let infeas: f64 = (0..self.m)
                    .filter(|&r| self.basis[r] >= self.n_struct + self.m)
                    .map(|r| self.xb[r].abs())
                    .sum();
                if infeas > FEASIBILITY_TOL * 10.0 {
                    return Ok(LpOutcome::terminal(LpStatus::Infeasible, self.iterations));
                }
            }
        }
        for j in self.n_struct + self.m..self.n_total {
            self.lo[j] = 0.0;
            self.hi[j] = 0.0;
        }
        let cost = self.cost.clone();
        match self.pivot_loop(&cost, false)? {
            PhaseOutcome::Unbounded => {
                Ok(LpOutcome::terminal(LpStatus::Unbounded, self.iterations))
            }
            PhaseOutcome::Optimal => {
                self.refresh_xb();
                let x = self.extract_solution();
                if !self.recheck(&x) {
                    return Err(SimplexError::LostFeasibility);
                }
                let obj: f64 = self
                    .cost
                    .iter()
                    .take(self.n_struct)
                    .zip(&x)
                    .map(|(c, v)| c * v)
                    .sum();
                Ok(LpOutcome {
                    status: LpStatus::Optimal,
                    solution: Some(x),
                    objective_value: Some(obj),
                    iterations: self.iterations,
                })
            }
        }
    }

    /// Installs the slack/artificial starting basis. Returns true when any
    /// artificial variable is needed (phase 1 required).
    fn cold_start(&mut self) -> bool {
        let n = self.n_struct;
        let m = self.m;
        self.state = vec![VarState::AtLower; self.n_total];
        for j in 0..n + m {
            self.state[j] = self.default_rest(j);
        }
        self.basis = vec![0; m];
        self.xb = vec![0.0; m];
        let mut need_phase1 = false;
        for i in 0..m {
            let mut residual = 0.0;
            for j in 0..n {
                let a = self.at(i, j);
                if a != 0.0 {
                    let rest = match self.state[j] {
                        VarState::AtLower => self.lo[j],
                        VarState::AtUpper => self.hi[j],
                        _ => 0.0,
                    };
                    if rest != 0.0 {
                        residual += a * rest;
                    }
                }
            }
            let want = self.rhs[i] - residual;
            let (slo, shi) = (self.lo[n + i], self.hi[n + i]);
            if want >= slo - FEASIBILITY_TOL && want <= shi + FEASIBILITY_TOL {
                self.basis[i] = n + i;
                self.state[n + i] = VarState::Basic(i);
                self.xb[i] = want;
            } else {
                let snapped = if want < slo { slo } else { shi };
                self.state[n + i] = if want < slo {
                    VarState::AtLower
                } else {
                    VarState::AtUpper
                };
                let delta = want - snapped;
                let art = n + m + i;
                self.lo[art] = 0.0;
                self.hi[art] = f64::INFINITY;
                // Flip the row so the artificial enters with coefficient +1.
                if delta < 0.0 {
                    for j in 0..self.n_total {
                        self.t[i * self.n_total + j] = -self.t[i * self.n_total + j];
                    }
                    self.rhs[i] = -self.rhs[i];
                }
                self.t[i * self.n_total + art] = 1.0;
                self.basis[i] = art;
                self.state[art] = VarState::Basic(i);
                self.xb[i] = delta.abs();
                need_phase1 = true;
            }
        }
        need_phase1
    }

    /// Phase-1 cost vector: unit cost on every opened artificial.
    fn phase1_costs(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.n_total];
        for j in self.n_struct + self.m..self.n_total {
            if self.hi[j] > 0.0 {
                c[j] = 1.0;
            }
        }
        c
    }

    fn try_warm_start(&mut self, warm: &Basis) -> bool {
        let n = self.n_struct;
        let m = self.m;
        let nt = self.n_total;
        if warm.columns.len() != m || warm.at_upper.len() != n + m {
            return false;
        }
        for (k, &c) in warm.columns.iter().enumerate() {
            if c >= n + m || warm.columns[..k].contains(&c) {
                return false;
            }
        }
        // Row-reduce the candidate basis to identity, carrying the tableau
        // and rhs along; bail out on a singular basis.
        let mut t = self.t.clone();
        let mut rhs = self.rhs.clone();
        let mut row_of: Vec<usize> = (0..m).collect();
        for (step, &bc) in warm.columns.iter().enumerate() {
            let mut piv_row = None;
            let mut piv_abs = PIVOT_TOL;
            for r in step..m {
                let a = t[row_of[r] * nt + bc].abs();
                if a > piv_abs {
                    piv_abs = a;
                    piv_row = Some(r);
                }
            }
            let Some(r) = piv_row else { return false };
            row_of.swap(step, r);
            let pr = row_of[step];
            let piv = t[pr * nt + bc];
            for j in 0..nt {
                t[pr * nt + j] /= piv;
            }
            rhs[pr] /= piv;
            for rr in 0..m {
                let row = row_of[rr];
                if row == pr {
                    continue;
                }
                let f = t[row * nt + bc];
                if f != 0.0 {
                    for j in 0..nt {
                        t[row * nt + j] -= f * t[pr * nt + j];
                    }
                    rhs[row] -= f * rhs[pr];
                }
            }
        }
        // Physically reorder rows so basis column k lives in row k.
        let mut t2 = vec![0.0; m * nt];
        let mut rhs2 = vec![0.0; m];
        for k in 0..m {
            let src = row_of[k];
            t2[k * nt..(k + 1) * nt].copy_from_slice(&t[src * nt..(src + 1) * nt]);
            rhs2[k] = rhs[src];
        }
        let mut state = vec![VarState::AtLower; nt];
        for j in 0..nt {
            state[j] = if j < n + m {
                if warm.at_upper[j.min(n + m - 1)] && self.hi[j].is_finite() {
                    VarState::AtUpper
                } else {
                    self.default_rest_with(j)
                }
            } else {
                VarState::AtLower
            };
        }
        for (r, &bc) in warm.columns.iter().enumerate() {
            state[bc] = VarState::Basic(r);
        }
        let mut xb = vec![0.0; m];
        for r in 0..m {
            let mut v = rhs2[r];
            for j in 0..nt {
                if matches!(state[j], VarState::Basic(_)) {
                    continue;
                }
                let a = t2[r * nt + j];
                if a != 0.0 {
                    let rest = match state[j] {
                        VarState::AtLower => self.lo[j],
                        VarState::AtUpper => self.hi[j],
                        _ => 0.0,
                    };
                    if rest != 0.0 {
                        v -= a * rest;
                    }
                }
            }
            xb[r] = v;
        }
        for (r, &bc) in warm.columns.iter().enumerate() {
            if xb[r] < self.lo[bc] - FEASIBILITY_TOL || xb[r] > self.hi[bc] + FEASIBILITY_TOL {
                return false;
            }
        }
        self.t = t2;
        self.rhs = rhs2;
        self.basis = warm.columns.clone();
        self.state = state;
        self.xb = xb;
        true
    }

    fn default_rest_with(&self, j: usize) -> VarState {
        if self.lo[j].is_finite() {
            VarState::AtLower
        } else if self.hi[j].is_finite() {
            VarState::AtUpper
        } else {
            VarState::FreeZero
        }
    }

    fn extract_solution(&self) -> Vec<f64> {
        (0..self.n_struct).map(|j| self.rest_value(j)).collect()
    }

    fn extract_basis(&self) -> Basis {
        let nm = self.n_struct + self.m;
        let columns = self
            .basis
            .iter()
            .enumerate()
            .map(|(r, &c)| if c < nm { c } else { self.n_struct + r })
            .collect();
        let at_upper = (0..nm)
            .map(|j| matches!(self.state[j], VarState::AtUpper))
            .collect();
        Basis { columns, at_upper }
    }

    fn recheck(&self, x: &[f64]) -> bool {
        for j in 0..self.n_struct {
            if x[j] < self.lo[j] - FEASIBILITY_TOL * 100.0
                || x[j] > self.hi[j] + FEASIBILITY_TOL * 100.0
            {
                return false;
            }
        }
        true
    }

    /// Runs the simplex to optimality for the given cost vector.
    fn pivot_loop(&mut self, cost: &[f64], phase1: bool) -> Result<PhaseOutcome, SimplexError> {
        let max_iters = 50 * (self.m + self.n_total) + 1000;
        let mut reduced = self.reduced_costs(cost);
        let mut bland = false;
        let mut stall = 0usize;
        let mut last_obj = self.objective_of(cost);
        loop {
            if self.iterations > max_iters {
                return Err(SimplexError::IterationLimit);
            }
            let Some((q, increase)) = self.price(&reduced, bland) else {
                return Ok(PhaseOutcome::Optimal);
            };
            self.iterations += 1;
            let sigma = if increase { 1.0 } else { -1.0 };
            let flip_limit = self.hi[q] - self.lo[q];
            let mut t_best = if flip_limit.is_finite() {
                flip_limit
            } else {
                f64::INFINITY
            };
            let mut leave: Option<(usize, bool)> = None; // (row, leaves at lower)
            for r in 0..self.m {
                let alpha = sigma * self.at(r, q);
                let bcol = self.basis[r];
                let (t_r, to_lower) = if alpha > PIVOT_TOL {
                    if self.lo[bcol].is_finite() {
                        (((self.xb[r] - self.lo[bcol]) / alpha).max(0.0), true)
                    } else {
                        continue;
                    }
                } else if alpha < -PIVOT_TOL {
                    if self.hi[bcol].is_finite() {
                        (((self.hi[bcol] - self.xb[r]) / -alpha).max(0.0), false)
                    } else {
                        continue;
                    }
                } else {
                    continue;
                };
                let accept = match leave {
                    None => t_r < t_best - 1e-12 || (t_r <= t_best && t_r < f64::INFINITY && t_best == f64::INFINITY),
                    Some((cur, _)) => {
                        if t_r < t_best - 1e-12 {
                            true
                        } else if t_r <= t_best + 1e-12 {
                            if bland {
                                self.basis[r] < self.basis[cur]
                            } else {
                                self.at(r, q).abs() > self.at(cur, q).abs()
                            }
                        } else {
                            false
                        }
                    }
                };
                if accept {
                    t_best = t_best.min(t_r);
                    leave = Some((r, to_lower));
                }
            }
            if !t_best.is_finite() {
                return Ok(PhaseOutcome::Unbounded);
            }
            let delta = sigma * t_best;
            match leave {
                None => {
                    // Bound-to-bound flip of the entering variable.
                    for r in 0..self.m {
                        let a = self.at(r, q);
                        if a != 0.0 {
                            self.xb[r] += delta * a * -1.0;
                        }
                    }
                    self.state[q] = match self.state[q] {
                        VarState::AtLower => VarState::AtUpper,
                        VarState::AtUpper => VarState::AtLower,
                        s => s,
                    };
                }
                Some((r, to_lower)) => {
                    let entering_value = self.rest_value(q) + delta;
                    for i in 0..self.m {
                        let a = self.at(i, q);
                        if a != 0.0 {
                            self.xb[i] -= delta * a;
                        }
                    }
                    let leaving = self.basis[r];
                    self.state[leaving] = if to_lower {
                        VarState::AtLower
                    } else {
                        VarState::AtUpper
                    };
                    self.basis[r] = q;
                    self.state[q] = VarState::Basic(r);
                    self.xb[r] = entering_value;
                    self.eliminate(r, q, &mut reduced);
                }
            }
            let obj = self.objective_of(cost);
            if obj < last_obj - 1e-12 {
                stall = 0;
                bland = false;
                last_obj = obj;
            } else {
                stall += 1;
                if stall > self.m + 20 {
                    bland = true;
                }
            }
            if phase1 {
                let infeas: f64 = (0..self.m)
                    .filter(|&r| self.basis[r] >= self.n_struct + self.m)
                    .map(|r| self.xb[r].abs())
                    .sum();
                if infeas <= FEASIBILITY_TOL {
                    return Ok(PhaseOutcome::Optimal);
                }
            }
        }
    }

    fn objective_of(&self, cost: &[f64]) -> f64 {
        let mut obj = 0.0;
        for j in 0..self.n_total {
            let c = cost[j];
            if c != 0.0 {
                obj += c * self.rest_value(j);
            }
        }
        obj
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for r in 0..self.m {
            let cb = cost[self.basis[r]];
            if cb != 0.0 {
                for j in 0..self.n_total {
                    d[j] -= cb * self.at(r, j);
                }
            }
        }
        d
    }

    /// Picks the entering column, or None at optimality.
    fn price(&self, reduced: &[f64], bland: bool) -> Option<(usize, bool)> {
        let mut best: Option<(usize, bool, f64)> = None;
        for j in 0..self.n_total {
            if matches!(self.state[j], VarState::Basic(_)) || self.lo[j] >= self.hi[j] {
                continue;
            }
            let d = reduced[j];
            let increase = match self.state[j] {
                VarState::AtLower => {
                    if d < -REDUCED_COST_TOL {
                        true
                    } else {
                        continue;
                    }
                }
                VarState::AtUpper => {
                    if d > REDUCED_COST_TOL {
                        false
                    } else {
                        continue;
                    }
                }
                VarState::FreeZero => {
                    if d < -REDUCED_COST_TOL {
                        true
                    } else if d > REDUCED_COST_TOL {
                        false
                    } else {
                        continue;
                    }
                }
                VarState::Basic(_) => continue,
            };
            if bland {
                return Some((j, increase));
            }
            let score = d.abs();
            if best.map(|(_, _, s)| score > s).unwrap_or(true) {
                best = Some((j, increase, score));
            }
        }
        best.map(|(j, inc, _)| (j, inc))
    }

    /// Gauss pivot on (row, col), updating rhs and the reduced-cost row.
    fn eliminate(&mut self, row: usize, col: usize, reduced: &mut [f64]) {
        let nt = self.n_total;
        let piv = self.t[row * nt + col];
        debug_assert!(piv.abs() > PIVOT_TOL);
        let inv = 1.0 / piv;
        for j in 0..nt {
            self.t[row * nt + j] *= inv;
        }
        self.rhs[row] *= inv;
        self.t[row * nt + col] = 1.0;
        for r in 0..self.m {
            if r == row {
                continue;
            }
            let f = self.t[r * nt + col];
            if f != 0.0 {
                for j in 0..nt {
                    self.t[r * nt + j] -= f * self.t[row * nt + j];
                }
                self.rhs[r] -= f * self.rhs[row];
                self.t[r * nt + col] = 0.0;
            }
        }
        let f = reduced[col];
        if f != 0.0 {
            for j in 0..nt {
                reduced[j] -= f * self.t[row * nt + j];
            }
            reduced[col] = 0.0;
        }
    }
}

//! Dense linear programming.
//!
//! A revised primal simplex on bounded variables. Every row `a·x (≤|=|≥) b`
//! gets a logical (slack) column so that the working system is always
//! `A x + s = b` with `lo ≤ (x, s) ≤ hi`. Phase 1 minimises the sum of bound
//! infeasibilities of the basic variables, which lets the solver start from
//! any basis; branch-and-bound uses that to reuse a parent's basis.
//!
//! Duals follow the sensitivity convention `y_i = ∂(objective)/∂(rhs_i)`, so
//! for a minimisation a binding `≥` row has `y ≥ 0` and a binding `≤` row has
//! `y ≤ 0`. Reduced costs are `d = c − Aᵀy`.

use std::fmt;

use crate::error::{Error, Result};

pub const INF: f64 = f64::INFINITY;

const FEAS_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 100;
const DEGENERATE_SWITCH: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Le => "<=",
            Relation::Eq => "=",
            Relation::Ge => ">=",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `minimize objective·x` subject to `constraints` and per-variable `bounds`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProgram {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    /// An LP with zero objective and every variable in `[0, ∞)`.
    pub fn new(n_vars: usize) -> Self {
        Self {
            n_vars,
            objective: vec![0.0; n_vars],
            constraints: Vec::new(),
            bounds: vec![(0.0, INF); n_vars],
        }
    }

    pub fn add_constraint(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) -> usize {
        self.constraints.push(Constraint {
            coeffs,
            relation,
            rhs,
        });
        self.constraints.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.n_vars || self.bounds.len() != self.n_vars {
            return Err(Error::Dimension(format!(
                "LP with {} variables has {} objective coefficients and {} bounds",
                self.n_vars,
                self.objective.len(),
                self.bounds.len()
            )));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if c.coeffs.len() != self.n_vars {
                return Err(Error::Dimension(format!(
                    "constraint {i} has {} coefficients, LP has {} variables",
                    c.coeffs.len(),
                    self.n_vars
                )));
            }
            if !c.rhs.is_finite() || c.coeffs.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("constraint {i} is not finite")));
            }
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == INF || hi == -INF {
                return Err(Error::Validation(format!(
                    "variable {j} has invalid bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Human-readable dump, handy for bug reports.
impl fmt::Display for LinearProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn terms(coeffs: &[f64]) -> String {
            let parts: Vec<String> = coeffs
                .iter()
                .enumerate()
                .filter(|(_, c)| **c != 0.0)
                .map(|(j, c)| format!("{c:+} x{j}"))
                .collect();
            if parts.is_empty() {
                "0".to_string()
            } else {
                parts.join(" ")
            }
        }
        writeln!(f, "minimize")?;
        writeln!(f, "  {}", terms(&self.objective))?;
        writeln!(f, "subject to")?;
        for (i, c) in self.constraints.iter().enumerate() {
            writeln!(f, "  c{i}: {} {} {}", terms(&c.coeffs), c.relation, c.rhs)?;
        }
        writeln!(f, "bounds")?;
        for (j, (lo, hi)) in self.bounds.iter().enumerate() {
            writeln!(f, "  {lo} <= x{j} <= {hi}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// Pivoting stalled beyond the iteration cap or the basis became singular.
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    /// One multiplier per constraint, `∂objective/∂rhs`.
    pub duals: Vec<f64>,
    pub reduced_costs: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
}

impl LpSolution {
    fn failed(status: LpStatus, lp: &LinearProgram, iterations: usize) -> Self {
        Self {
            status,
            x: vec![0.0; lp.n_vars],
            duals: vec![0.0; lp.constraints.len()],
            reduced_costs: vec![0.0; lp.n_vars],
            objective_value: f64::NAN,
            iterations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum VarState {
    Basic,
    Lower,
    Upper,
    /// Nonbasic free variable held at zero.
    Free,
}

/// Final basis of a solve, over structural then logical columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Basis {
    states: Vec<VarState>,
    n_rows: usize,
}

/// Solve `lp` from a slack basis.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution> {
    solve_lp_warm(lp, None).map(|(s, _)| s)
}

/// Solve `lp`, starting from `hint` when it fits the problem shape.
pub(crate) fn solve_lp_warm(
    lp: &LinearProgram,
    hint: Option<&Basis>,
) -> Result<(LpSolution, Option<Basis>)> {
    lp.validate()?;

    // Drop empty rows; they are either trivially satisfied or make the LP infeasible.
    let mut kept = Vec::with_capacity(lp.constraints.len());
    for (i, c) in lp.constraints.iter().enumerate() {
        if c.coeffs.iter().all(|&v| v == 0.0) {
            let tol = FEAS_TOL * (1.0 + c.rhs.abs());
            let ok = match c.relation {
                Relation::Le => 0.0 <= c.rhs + tol,
                Relation::Ge => 0.0 >= c.rhs - tol,
                Relation::Eq => c.rhs.abs() <= tol,
            };
            if !ok {
                return Ok((LpSolution::failed(LpStatus::Infeasible, lp, 0), None));
            }
        } else {
            kept.push(i);
        }
    }

    let mut spx = Simplex::new(lp, &kept);
    let hint = hint.filter(|h| h.n_rows == kept.len() && h.states.len() == spx.ntot);
    if let Some(h) = hint {
        spx.load_basis(h);
    }
    let status = spx.run(50 * (lp.n_vars + lp.constraints.len()).max(2));

    if status != LpStatus::Optimal {
        return Ok((LpSolution::failed(status, lp, spx.iterations), None));
    }

    let y_kept = spx.duals();
    let mut duals = vec![0.0; lp.constraints.len()];
    for (k, &i) in kept.iter().enumerate() {
        duals[i] = y_kept[k];
    }
    let x: Vec<f64> = spx.x[..lp.n_vars].to_vec();
    let mut reduced_costs = lp.objective.clone();
    for (i, c) in lp.constraints.iter().enumerate() {
        let yi = duals[i];
        if yi != 0.0 {
            for (d, a) in reduced_costs.iter_mut().zip(&c.coeffs) {
                *d -= yi * a;
            }
        }
    }
    let objective_value = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    let basis = Basis {
        states: spx.state.clone(),
        n_rows: kept.len(),
    };
    Ok((
        LpSolution {
            status,
            x,
            duals,
            reduced_costs,
            objective_value,
            iterations: spx.iterations,
        },
        Some(basis),
    ))
}

struct Simplex {
    m: usize,
    n: usize,
    ntot: usize,
    /// Row-major `m × n` structural coefficients.
    a: Vec<f64>,
    b: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<VarState>,
    x: Vec<f64>,
    /// Row-major `m × m` explicit basis inverse.
    binv: Vec<f64>,
    iterations: usize,
}

impl Simplex {
    fn new(lp: &LinearProgram, kept: &[usize]) -> Self {
        let m = kept.len();
        let n = lp.n_vars;
        let ntot = n + m;
        let mut a = Vec::with_capacity(m * n);
        let mut b = Vec::with_capacity(m);
        let mut lo = Vec::with_capacity(ntot);
        let mut hi = Vec::with_capacity(ntot);
        for &(l, h) in &lp.bounds {
            lo.push(l);
            hi.push(h);
        }
        for &i in kept {
            let c = &lp.constraints[i];
            a.extend_from_slice(&c.coeffs);
            b.push(c.rhs);
            let (l, h) = match c.relation {
                Relation::Le => (0.0, INF),
                Relation::Ge => (-INF, 0.0),
                Relation::Eq => (0.0, 0.0),
            };
            lo.push(l);
            hi.push(h);
        }
        let mut cost = lp.objective.clone();
        cost.resize(ntot, 0.0);

        let mut state = Vec::with_capacity(ntot);
        let mut x = vec![0.0; ntot];
        for j in 0..n {
            let (st, v) = nonbasic_position(lo[j], hi[j], VarState::Lower);
            state.push(st);
            x[j] = v;
        }
        state.extend(std::iter::repeat(VarState::Basic).take(m));
        let basis: Vec<usize> = (n..ntot).collect();
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let mut spx = Self {
            m,
            n,
            ntot,
            a,
            b,
            lo,
            hi,
            cost,
            basis,
            state,
            x,
            binv,
            iterations: 0,
        };
        spx.recompute_basics();
        spx
    }

    fn load_basis(&mut self, hint: &Basis) {
        let basics: Vec<usize> = (0..self.ntot)
            .filter(|&j| hint.states[j] == VarState::Basic)
            .collect();
        if basics.len() != self.m {
            return;
        }
        let saved = (self.basis.clone(), self.state.clone(), self.x.clone());
        self.basis = basics;
        for j in 0..self.ntot {
            if hint.states[j] == VarState::Basic {
                self.state[j] = VarState::Basic;
            } else {
                let (st, v) = nonbasic_position(self.lo[j], self.hi[j], hint.states[j]);
                self.state[j] = st;
                self.x[j] = v;
            }
        }
        if !self.refactor() {
            self.basis = saved.0;
            self.state = saved.1;
            self.x = saved.2;
            self.refactor();
        }
        self.recompute_basics();
    }

    fn column(&self, j: usize, out: &mut [f64]) {
        if j < self.n {
            for i in 0..self.m {
                out[i] = self.a[i * self.n + j];
            }
        } else {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[j - self.n] = 1.0;
        }
    }

    /// Rebuilds the basis inverse by Gauss-Jordan elimination with partial pivoting.
    fn refactor(&mut self) -> bool {
        let m = self.m;
        if m == 0 {
            return true;
        }
        let mut bmat = vec![0.0; m * m];
        let mut col = vec![0.0; m];
        for (p, &j) in self.basis.iter().enumerate() {
            self.column(j, &mut col);
            for i in 0..m {
                bmat[i * m + p] = col[i];
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for c in 0..m {
            let mut piv = c;
            let mut best = bmat[c * m + c].abs();
            for r in c + 1..m {
                let v = bmat[r * m + c].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best < 1e-12 {
                return false;
            }
            if piv != c {
                for k in 0..m {
                    bmat.swap(c * m + k, piv * m + k);
                    inv.swap(c * m + k, piv * m + k);
                }
            }
            let d = bmat[c * m + c];
            for k in 0..m {
                bmat[c * m + k] /= d;
                inv[c * m + k] /= d;
            }
            for r in 0..m {
                if r == c {
                    continue;
                }
                let f = bmat[r * m + c];
                if f != 0.0 {
                    for k in 0..m {
                        bmat[r * m + k] -= f * bmat[c * m + k];
                        inv[r * m + k] -= f * inv[c * m + k];
                    }
                }
            }
        }
        self.binv = inv;
        true
    }

    fn recompute_basics(&mut self) {
        let m = self.m;
        let mut rhs = self.b.clone();
        for j in 0..self.ntot {
            if self.state[j] == VarState::Basic {
                continue;
            }
            let v = self.x[j];
            if v == 0.0 {
                continue;
            }
            if j < self.n {
                for i in 0..m {
                    rhs[i] -= self.a[i * self.n + j] * v;
                }
            } else {
                rhs[j - self.n] -= v;
            }
        }
        for p in 0..m {
            let row = &self.binv[p * m..(p + 1) * m];
            let v: f64 = row.iter().zip(&rhs).map(|(a, b)| a * b).sum();
            self.x[self.basis[p]] = v;
        }
    }

    fn tol(bound: f64) -> f64 {
        FEAS_TOL * (1.0 + bound.abs())
    }

    /// Phase-1 cost of basic position `p`: −1 below its lower bound, +1 above its upper.
    fn infeasibility_cost(&self, p: usize) -> f64 {
        let j = self.basis[p];
        let v = self.x[j];
        if v < self.lo[j] - Self::tol(self.lo[j]) {
            -1.0
        } else if v > self.hi[j] + Self::tol(self.hi[j]) {
            1.0
        } else {
            0.0
        }
    }

    /// `yᵀ = c_Bᵀ B⁻¹`.
    fn row_prices(&self, cb: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (p, &c) in cb.iter().enumerate() {
            if c != 0.0 {
                let row = &self.binv[p * m..(p + 1) * m];
                for (yk, bk) in y.iter_mut().zip(row) {
                    *yk += c * bk;
                }
            }
        }
        y
    }

    fn reduced_costs(&self, y: &[f64], phase1: bool) -> Vec<f64> {
        let mut d: Vec<f64> = if phase1 {
            vec![0.0; self.ntot]
        } else {
            self.cost.clone()
        };
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                let row = &self.a[i * self.n..(i + 1) * self.n];
                for (dj, aij) in d[..self.n].iter_mut().zip(row) {
                    *dj -= yi * aij;
                }
                d[self.n + i] -= yi;
            }
        }
        d
    }

    fn duals(&self) -> Vec<f64> {
        let cb: Vec<f64> = self.basis.iter().map(|&j| self.cost[j]).collect();
        self.row_prices(&cb)
    }

    fn run(&mut self, max_iter: usize) -> LpStatus {
        let m = self.m;
        let mut degenerate_run = 0usize;
        let mut since_refactor = 0usize;
        let mut alpha = vec![0.0; m];
        let mut col = vec![0.0; m];
        let mut verified = false;

        loop {
            if since_refactor >= REFACTOR_EVERY {
                if !self.refactor() {
                    return LpStatus::NumericalFailure;
                }
                self.recompute_basics();
                since_refactor = 0;
            }

            let cb_phase1: Vec<f64> = (0..m).map(|p| self.infeasibility_cost(p)).collect();
            let phase1 = cb_phase1.iter().any(|&c| c != 0.0);
            let cb: Vec<f64> = if phase1 {
                cb_phase1
            } else {
                self.basis.iter().map(|&j| self.cost[j]).collect()
            };
            let y = self.row_prices(&cb);
            let d = self.reduced_costs(&y, phase1);

            let bland = degenerate_run > DEGENERATE_SWITCH;
            let mut entering: Option<(usize, f64)> = None;
            let mut best = 0.0;
            for j in 0..self.ntot {
                let dir = match self.state[j] {
                    VarState::Basic => continue,
                    VarState::Lower => {
                        if self.hi[j] > self.lo[j] && d[j] < -OPT_TOL {
                            1.0
                        } else {
                            continue;
                        }
                    }
                    VarState::Upper => {
                        if self.hi[j] > self.lo[j] && d[j] > OPT_TOL {
                            -1.0
                        } else {
                            continue;
                        }
                    }
                    VarState::Free => {
                        if d[j].abs() > OPT_TOL {
                            -d[j].signum()
                        } else {
                            continue;
                        }
                    }
                };
                if bland {
                    entering = Some((j, dir));
                    break;
                }
                if d[j].abs() > best {
                    best = d[j].abs();
                    entering = Some((j, dir));
                }
            }

            let Some((q, dir)) = entering else {
                // No improving column. Refactor once to confirm before declaring.
                if !verified && since_refactor > 0 {
                    if !self.refactor() {
                        return LpStatus::NumericalFailure;
                    }
                    self.recompute_basics();
                    since_refactor = 0;
                    verified = true;
                    continue;
                }
                return if phase1 {
                    LpStatus::Infeasible
                } else {
                    LpStatus::Optimal
                };
            };
            verified = false;

            if self.iterations >= max_iter {
                return LpStatus::NumericalFailure;
            }
            self.iterations += 1;
            since_refactor += 1;

            // alpha = B⁻¹ a_q
            self.column(q, &mut col);
            for p in 0..m {
                let row = &self.binv[p * m..(p + 1) * m];
                alpha[p] = row.iter().zip(&col).map(|(a, b)| a * b).sum();
            }

            // Ratio test. Basic p moves at rate −dir·alpha[p] per unit step.
            struct Cand {
                p: usize,
                dist: f64,
                rate: f64,
                tol: f64,
                to_upper: bool,
            }
            let mut cands: Vec<Cand> = Vec::new();
            for p in 0..m {
                if alpha[p].abs() <= PIVOT_TOL {
                    continue;
                }
                let j = self.basis[p];
                let rate = -dir * alpha[p];
                let (v, l, h) = (self.x[j], self.lo[j], self.hi[j]);
                let below = v < l - Self::tol(l);
                let above = v > h + Self::tol(h);
                let cand = if below {
                    (rate > 0.0).then(|| (l - v, Self::tol(l), false))
                } else if above {
                    (rate < 0.0).then(|| (v - h, Self::tol(h), true))
                } else if rate < 0.0 && l.is_finite() {
                    Some(((v - l).max(0.0), Self::tol(l), false))
                } else if rate > 0.0 && h.is_finite() {
                    Some(((h - v).max(0.0), Self::tol(h), true))
                } else {
                    None
                };
                if let Some((dist, tol, to_upper)) = cand {
                    cands.push(Cand {
                        p,
                        dist,
                        rate: rate.abs(),
                        tol,
                        to_upper,
                    });
                }
            }

            let chosen = if cands.is_empty() {
                None
            } else if bland {
                let tmin = cands
                    .iter()
                    .map(|c| c.dist / c.rate)
                    .fold(f64::INFINITY, f64::min);
                cands
                    .iter()
                    .filter(|c| c.dist / c.rate <= tmin + 1e-12)
                    .min_by_key(|c| self.basis[c.p])
            } else {
                // Harris two-pass: relaxed bound first, then the largest pivot under it.
                let tmax = cands
                    .iter()
                    .map(|c| (c.dist + c.tol) / c.rate)
                    .fold(f64::INFINITY, f64::min);
                cands
                    .iter()
                    .filter(|c| c.dist / c.rate <= tmax)
                    .max_by(|a, b| {
                        a.rate
                            .total_cmp(&b.rate)
                            .then_with(|| self.basis[b.p].cmp(&self.basis[a.p]))
                    })
            };

            let span = self.hi[q] - self.lo[q];
            let step_leave = chosen.map(|c| c.dist / c.rate);
            let flip = span.is_finite() && step_leave.map_or(true, |t| span <= t);

            if flip {
                if !span.is_finite() {
                    // Only reachable when nothing blocks an unbounded direction.
                    return if phase1 {
                        LpStatus::NumericalFailure
                    } else {
                        LpStatus::Unbounded
                    };
                }
                let t = span;
                self.x[q] += dir * t;
                for p in 0..m {
                    let j = self.basis[p];
                    self.x[j] -= dir * alpha[p] * t;
                }
                self.state[q] = if dir > 0.0 {
                    VarState::Upper
                } else {
                    VarState::Lower
                };
                self.x[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
                degenerate_run = 0;
                continue;
            }

            let Some(c) = chosen else {
                return if phase1 {
                    LpStatus::NumericalFailure
                } else {
                    LpStatus::Unbounded
                };
            };
            let t = c.dist / c.rate;
            let r = c.p;
            let leave = self.basis[r];
            self.x[q] += dir * t;
            for p in 0..m {
                let j = self.basis[p];
                self.x[j] -= dir * alpha[p] * t;
            }
            if c.to_upper {
                self.x[leave] = self.hi[leave];
                self.state[leave] = VarState::Upper;
            } else {
                self.x[leave] = self.lo[leave];
                self.state[leave] = VarState::Lower;
            }
            self.state[q] = VarState::Basic;
            self.basis[r] = q;

            // Pivot the explicit inverse on row r.
            let pr = alpha[r];
            for k in 0..m {
                self.binv[r * m + k] /= pr;
            }
            let (before, rest) = self.binv.split_at_mut(r * m);
            let (pivot_row, after) = rest.split_at_mut(m);
            for (p, row) in before
                .chunks_exact_mut(m)
                .enumerate()
                .chain(after.chunks_exact_mut(m).enumerate().map(|(i, r2)| (i + r + 1, r2)))
            {
                let f = alpha[p];
                if f != 0.0 {
                    for (v, pv) in row.iter_mut().zip(pivot_row.iter()) {
                        *v -= f * pv;
                    }
                }
            }

            if t < 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
        }
    }
}

/// Where a nonbasic variable sits given a preferred side.
fn nonbasic_position(lo: f64, hi: f64, prefer: VarState) -> (VarState, f64) {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => {
            if prefer == VarState::Upper {
                (VarState::Upper, hi)
            } else {
                (VarState::Lower, lo)
            }
        }
        (true, false) => (VarState::Lower, lo),
        (false, true) => (VarState::Upper, hi),
        (false, false) => (VarState::Free, 0.0),
    }
}

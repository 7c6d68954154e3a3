//! Mixed-integer linear programs with binary variables, solved by best-bound
//! branch-and-bound over simplex relaxations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use crate::error::{Error, Result};
use crate::lp::{solve_lp_warm, Basis, LinearProgram, LpStatus, Relation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub name: String,
    pub terms: Vec<(VarId, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `maximise objective·x + constant` subject to linear rows and variable bounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MilpModel {
    names: Vec<String>,
    kinds: Vec<VarKind>,
    bounds: Vec<(f64, f64)>,
    rows: Vec<Row>,
    objective: Vec<(VarId, f64)>,
    objective_constant: f64,
}

impl MilpModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_continuous(&mut self, name: impl Into<String>, lo: f64, hi: f64) -> VarId {
        self.names.push(name.into());
        self.kinds.push(VarKind::Continuous);
        self.bounds.push((lo, hi));
        VarId(self.names.len() - 1)
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> VarId {
        self.names.push(name.into());
        self.kinds.push(VarKind::Binary);
        self.bounds.push((0.0, 1.0));
        VarId(self.names.len() - 1)
    }

    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        terms: &[(VarId, f64)],
        relation: Relation,
        rhs: f64,
    ) -> usize {
        self.rows.push(Row {
            name: name.into(),
            terms: terms.to_vec(),
            relation,
            rhs,
        });
        self.rows.len() - 1
    }

    pub fn set_objective(&mut self, terms: &[(VarId, f64)], constant: f64) {
        self.objective = terms.to_vec();
        self.objective_constant = constant;
    }

    pub fn set_bounds(&mut self, v: VarId, lo: f64, hi: f64) {
        self.bounds[v.0] = (lo, hi);
    }

    pub fn bounds(&self, v: VarId) -> (f64, f64) {
        self.bounds[v.0]
    }

    pub fn name(&self, v: VarId) -> &str {
        &self.names[v.0]
    }

    pub fn kind(&self, v: VarId) -> VarKind {
        self.kinds[v.0]
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn n_binaries(&self) -> usize {
        self.kinds.iter().filter(|k| **k == VarKind::Binary).count()
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn n_constraints(&self) -> usize {
        self.rows.len()
    }

    /// Objective value of a point, constant included.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective_constant + self.objective.iter().map(|(v, c)| c * x[v.0]).sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        let known = |v: &VarId| v.0 < n;
        for r in &self.rows {
            if !r.terms.iter().all(|(v, _)| known(v)) {
                return Err(Error::Validation(format!("row `{}` references an undeclared variable", r.name)));
            }
            if !r.rhs.is_finite() || r.terms.iter().any(|(_, c)| !c.is_finite()) {
                return Err(Error::Validation(format!("row `{}` has a non-finite number", r.name)));
            }
        }
        if !self.objective.iter().all(|(v, _)| known(v)) {
            return Err(Error::Validation("objective references an undeclared variable".into()));
        }
        for (k, (lo, hi)) in self.bounds.iter().enumerate() {
            if lo > hi || lo.is_nan() || hi.is_nan() {
                return Err(Error::Validation(format!("variable `{}` has empty bounds", self.names[k])));
            }
        }
        Ok(())
    }

    /// Relaxation as a minimisation of the negated objective.
    fn relaxation(&self) -> LinearProgram {
        let n = self.n_vars();
        let mut lp = LinearProgram::new(n);
        for (v, c) in &self.objective {
            lp.objective[v.0] -= c;
        }
        lp.bounds = self.bounds.clone();
        for r in &self.rows {
            let mut coeffs = vec![0.0; n];
            for (v, c) in &r.terms {
                coeffs[v.0] += c;
            }
            lp.add_constraint(coeffs, r.relation, r.rhs);
        }
        lp
    }

    /// Largest row or bound violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, (lo, hi)) in self.bounds.iter().enumerate() {
            worst = worst.max(lo - x[k]).max(x[k] - hi);
        }
        for r in &self.rows {
            let lhs: f64 = r.terms.iter().map(|(v, c)| c * x[v.0]).sum();
            let d = match r.relation {
                Relation::Le => lhs - r.rhs,
                Relation::Ge => r.rhs - lhs,
                Relation::Eq => (lhs - r.rhs).abs(),
            };
            worst = worst.max(d);
        }
        worst
    }
}

impl fmt::Display for MilpModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "maximize")?;
        for (v, c) in &self.objective {
            write!(f, " {c:+} {}", self.names[v.0])?;
        }
        writeln!(f, " {:+}", self.objective_constant)?;
        for r in &self.rows {
            write!(f, "{}:", r.name)?;
            for (v, c) in &r.terms {
                write!(f, " {c:+} {}", self.names[v.0])?;
            }
            writeln!(f, " {} {}", r.relation, r.rhs)?;
        }
        for (k, (lo, hi)) in self.bounds.iter().enumerate() {
            let tag = if self.kinds[k] == VarKind::Binary { " binary" } else { "" };
            writeln!(f, "{} <= {} <= {}{tag}", lo, self.names[k], hi)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MilpOptions {
    pub node_limit: usize,
    /// Stop once `best_bound − incumbent` falls to this.
    pub abs_gap_target: f64,
    /// Only solutions strictly above this value are of interest.
    pub cutoff: Option<f64>,
    pub integrality_tol: f64,
    /// Run the heuristic every this many nodes (and at the root).
    pub heuristic_period: usize,
}

impl Default for MilpOptions {
    fn default() -> Self {
        Self {
            node_limit: 100_000,
            abs_gap_target: 0.0,
            cutoff: None,
            integrality_tol: 1e-7,
            heuristic_period: 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MilpStatus {
    /// The incumbent is optimal (gap at or below target).
    Optimal,
    NodeLimit,
    /// No feasible point, or none above the cutoff.
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilpSolution {
    pub status: MilpStatus,
    pub x: Vec<f64>,
    /// Incumbent objective; `-inf` without one.
    pub objective: f64,
    pub best_bound: f64,
    pub gap: f64,
    pub nodes: usize,
}

/// Proposes an assignment from a relaxation point; only binary entries are used.
pub type Heuristic<'a> = &'a (dyn Fn(&[f64]) -> Option<Vec<f64>> + Sync);

struct Node {
    id: usize,
    bound: f64,
    /// `-1` free, otherwise the fixed value, per binary.
    fixed: Vec<i8>,
    basis: Option<Basis>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Max-heap: higher bound first, then lower id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}

pub fn solve_milp(model: &MilpModel, options: &MilpOptions) -> Result<MilpSolution> {
    solve_milp_with(model, options, None)
}

/// Repeated LP maxima of linear expressions over one model's relaxation,
/// warm-started from the previous basis.
pub(crate) struct RelaxationBounds {
    lp: LinearProgram,
    basis: Option<Basis>,
}

impl RelaxationBounds {
    pub(crate) fn new(model: &MilpModel) -> Self {
        Self {
            lp: model.relaxation(),
            basis: None,
        }
    }

    /// Supremum of `terms` over the relaxation; `None` when the LP does not solve.
    pub(crate) fn maximise(&mut self, terms: &[(VarId, f64)]) -> Result<Option<f64>> {
        self.lp.objective.iter_mut().for_each(|c| *c = 0.0);
        for (v, c) in terms {
            self.lp.objective[v.0] -= c;
        }
        let (mut sol, mut basis) = solve_lp_warm(&self.lp, self.basis.as_ref())?;
        if sol.status == LpStatus::NumericalFailure && self.basis.is_some() {
            (sol, basis) = solve_lp_warm(&self.lp, None)?;
        }
        if sol.status != LpStatus::Optimal {
            return Ok(None);
        }
        self.basis = basis;
        Ok(Some(-sol.objective_value))
    }
}

struct Search<'a> {
    model: &'a MilpModel,
    lp: LinearProgram,
    binaries: Vec<usize>,
    options: &'a MilpOptions,
    incumbent: Option<(f64, Vec<f64>)>,
}

impl Search<'_> {
    fn tol(&self, v: f64) -> f64 {
        1e-9 * v.abs().max(1.0)
    }

    fn threshold(&self) -> f64 {
        let inc = self.incumbent.as_ref().map(|i| i.0);
        match (inc, self.options.cutoff) {
            (Some(a), Some(c)) => a.max(c),
            (Some(a), None) => a,
            (None, Some(c)) => c,
            (None, None) => f64::NEG_INFINITY,
        }
    }

    fn prunable(&self, bound: f64) -> bool {
        let t = self.threshold();
        t.is_finite() && bound <= t + self.options.abs_gap_target + self.tol(t)
    }

    fn apply_fixings(&mut self, fixed: &[i8]) {
        for (k, &j) in self.binaries.iter().enumerate() {
            let (lo, hi) = self.model.bounds[j];
            self.lp.bounds[j] = match fixed[k] {
                -1 => (lo, hi),
                v => (v as f64, v as f64),
            };
        }
    }

    /// LP with the given fixings; `None` when infeasible.
    fn relax(&mut self, fixed: &[i8], hint: Option<&Basis>) -> Result<Option<(f64, Vec<f64>, Option<Basis>)>> {
        self.apply_fixings(fixed);
        let (mut sol, mut basis) = solve_lp_warm(&self.lp, hint)?;
        if sol.status == LpStatus::NumericalFailure && hint.is_some() {
            (sol, basis) = solve_lp_warm(&self.lp, None)?;
        }
        match sol.status {
            LpStatus::Optimal => Ok(Some((
                -sol.objective_value + self.model.objective_constant,
                sol.x,
                basis,
            ))),
            LpStatus::Infeasible => Ok(None),
            LpStatus::Unbounded => Err(Error::Numerical("unbounded relaxation".into())),
            LpStatus::NumericalFailure => Err(Error::Numerical(
                "relaxation failed to converge in branch-and-bound".into(),
            )),
        }
    }

    /// Fixes every binary to its rounded value and records the LP optimum.
    fn try_assignment(&mut self, x: &[f64]) -> Result<()> {
        let fixed: Vec<i8> = self
            .binaries
            .iter()
            .map(|&j| if x[j] >= 0.5 { 1 } else { 0 })
            .collect();
        if let Some((obj, xs, _)) = self.relax(&fixed, None)? {
            let better = self.incumbent.as_ref().is_none_or(|(best, _)| obj > *best);
            if better {
                self.incumbent = Some((obj, xs));
            }
        }
        Ok(())
    }

    fn most_fractional(&self, x: &[f64], tol: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, &j) in self.binaries.iter().enumerate() {
            let frac = (x[j] - x[j].round()).abs();
            if frac > tol && best.is_none_or(|(_, f)| frac > f) {
                best = Some((k, frac));
            }
        }
        best.map(|(k, _)| k)
    }
}

/// Branch-and-bound with an optional primal heuristic. Heuristic proposals are
/// completed by an LP over the continuous variables, so they are always feasible.
pub fn solve_milp_with(
    model: &MilpModel,
    options: &MilpOptions,
    heuristic: Option<Heuristic<'_>>,
) -> Result<MilpSolution> {
    model.validate()?;
    let binaries: Vec<usize> = (0..model.n_vars())
        .filter(|&j| model.kinds[j] == VarKind::Binary)
        .collect();
    let mut s = Search {
        model,
        lp: model.relaxation(),
        binaries,
        options,
        incumbent: None,
    };

    // Root: an unbounded relaxation means an unbounded MILP or a modelling error.
    s.apply_fixings(&vec![-1; s.binaries.len()]);
    let (root, root_basis) = solve_lp_warm(&s.lp, None)?;
    match root.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Ok(finish(&s, MilpStatus::Infeasible, f64::NEG_INFINITY, 0)),
        LpStatus::Unbounded => return Ok(finish(&s, MilpStatus::Unbounded, f64::INFINITY, 1)),
        LpStatus::NumericalFailure => {
            return Err(Error::Numerical("root relaxation failed to converge".into()))
        }
    }

    let mut heap = BinaryHeap::new();
    let mut next_id = 0usize;
    heap.push(Node {
        id: next_id,
        bound: f64::INFINITY,
        fixed: vec![-1; s.binaries.len()],
        basis: root_basis,
    });
    next_id += 1;
    let mut nodes = 0usize;

    while let Some(node) = heap.pop() {
        if s.prunable(node.bound) {
            continue;
        }
        if nodes >= options.node_limit {
            let bound = node.bound.max(s.threshold());
            heap.push(node);
            let open = heap.iter().map(|n| n.bound).fold(bound, f64::max);
            return Ok(finish(&s, MilpStatus::NodeLimit, open, nodes));
        }
        nodes += 1;
        let Some((obj, x, basis)) = s.relax(&node.fixed, node.basis.as_ref())? else {
            continue;
        };
        if s.prunable(obj) {
            continue;
        }
        if let Some(h) = heuristic {
            if nodes == 1 || nodes % options.heuristic_period.max(1) == 0 {
                if let Some(candidate) = h(&x) {
                    if candidate.len() == model.n_vars() {
                        s.try_assignment(&candidate)?;
                    }
                }
            }
        }

        let branch = match s.most_fractional(&x, options.integrality_tol) {
            Some(k) => Some(k),
            None => {
                // Integral within tolerance: polish with exact binaries, and keep
                // branching if rounding lost objective.
                s.try_assignment(&x)?;
                let polished = s.incumbent.as_ref().map_or(f64::NEG_INFINITY, |i| i.0);
                if obj - polished > s.tol(obj) {
                    s.most_fractional(&x, 0.0)
                } else {
                    None
                }
            }
        };
        if let Some(k) = branch {
            for v in [0i8, 1] {
                let mut fixed = node.fixed.clone();
                fixed[k] = v;
                heap.push(Node {
                    id: next_id,
                    bound: obj,
                    fixed,
                    basis: basis.clone(),
                });
                next_id += 1;
            }
        }
    }

    let status = if s.incumbent.is_some() {
        MilpStatus::Optimal
    } else {
        MilpStatus::Infeasible
    };
    let bound = s.incumbent.as_ref().map_or(f64::NEG_INFINITY, |i| i.0);
    Ok(finish(&s, status, bound, nodes))
}

fn finish(s: &Search<'_>, status: MilpStatus, best_bound: f64, nodes: usize) -> MilpSolution {
    match &s.incumbent {
        Some((obj, x)) => MilpSolution {
            status,
            x: x.clone(),
            objective: *obj,
            best_bound: best_bound.max(*obj),
            gap: (best_bound - obj).max(0.0),
            nodes,
        },
        None => MilpSolution {
            status,
            x: Vec::new(),
            objective: f64::NEG_INFINITY,
            best_bound,
            gap: f64::INFINITY,
            nodes,
        },
    }
}

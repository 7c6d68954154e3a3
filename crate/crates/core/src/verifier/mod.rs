//! Worst-case guarantees for a trained setpoint head over a whole demand box.
//!
//! The ReLU head is encoded exactly as a MILP; the inner OPF, where needed, is
//! replaced by its optimality conditions with big-M complementarity. Each
//! max-over-components metric is solved as a family of single-objective
//! MILPs whose outer maximum is reported with its certificate.

mod encode;
mod milp;

use std::fmt;

use rayon::prelude::*;

use crate::dcopf::solve_dcopf;
use crate::error::{dim_check, Error, Result};
use crate::grid::{GridCase, PtdfMatrix};
use crate::pinn::{forward, Head, NetworkParams};

pub use encode::{
    encode_network, encode_opf_kkt, kkt_big_m, normalised_box, propagate_bounds, propagate_head_bounds,
    tighten_bounds,
    ComplementarityPair, KktEncoding, NetworkEncoding, NeuronBounds, NeuronEncoding, NeuronState,
};
pub use milp::{
    solve_milp, solve_milp_with, Heuristic, MilpModel, MilpOptions, MilpSolution, MilpStatus, Row, VarId,
    VarKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WorstCaseKind {
    GenViolation,
    LineViolation,
    Distance,
    Suboptimality,
}

impl WorstCaseKind {
    pub fn name(self) -> &'static str {
        match self {
            WorstCaseKind::GenViolation => "gen_violation",
            WorstCaseKind::LineViolation => "line_violation",
            WorstCaseKind::Distance => "distance",
            WorstCaseKind::Suboptimality => "suboptimality",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            WorstCaseKind::GenViolation | WorstCaseKind::LineViolation => "MW",
            WorstCaseKind::Distance | WorstCaseKind::Suboptimality => "%",
        }
    }
}

impl fmt::Display for WorstCaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Certificate {
    /// Outer maximum of the incumbents, in MILP objective units.
    pub incumbent: f64,
    pub best_bound: f64,
    /// Nodes summed over the family.
    pub nodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidityReport {
    /// Smallest `(M − used)/M` over big-M constraints whose binary relaxes them.
    pub min_big_m_slack: f64,
    pub max_complementarity: f64,
    pub max_relu_error: f64,
}

impl ValidityReport {
    pub const BIG_M_SLACK: f64 = 1e-4;
    pub const COMPLEMENTARITY: f64 = 1e-6;
    pub const RELU: f64 = 1e-6;

    pub fn big_m_ok(&self) -> bool {
        self.min_big_m_slack >= Self::BIG_M_SLACK
    }

    pub fn passed(&self) -> bool {
        self.big_m_ok()
            && self.max_complementarity <= Self::COMPLEMENTARITY
            && self.max_relu_error <= Self::RELU
    }

    fn merge(&mut self, other: &ValidityReport) {
        self.min_big_m_slack = self.min_big_m_slack.min(other.min_big_m_slack);
        self.max_complementarity = self.max_complementarity.max(other.max_complementarity);
        self.max_relu_error = self.max_relu_error.max(other.max_relu_error);
    }

    fn clean() -> Self {
        Self {
            min_big_m_slack: 1.0,
            max_complementarity: 0.0,
            max_relu_error: 0.0,
        }
    }
}

/// Checks a MILP point: deactivated big-M rows must have room to spare,
/// complementarity products must vanish, and every encoded neuron must equal
/// the ReLU of its pre-activation.
pub fn check_solution_validity(
    network: Option<&NetworkEncoding>,
    kkt: Option<&KktEncoding>,
    x: &[f64],
) -> ValidityReport {
    let mut rep = ValidityReport::clean();
    if let Some(net) = network {
        for n in &net.neurons {
            if let (Some(pre), Some(post)) = (n.pre, n.post) {
                let err = (x[post.0] - x[pre.0].max(0.0)).abs();
                rep.max_relu_error = rep.max_relu_error.max(err);
            }
        }
    }
    if let Some(k) = kkt {
        let lam = x[k.lambda.0].abs();
        rep.min_big_m_slack = rep.min_big_m_slack.min((k.m_dual - lam) / k.m_dual);
        for p in &k.pairs {
            let slack = p.slack_at(x);
            let mu = x[p.mu.0];
            rep.max_complementarity = rep.max_complementarity.max((slack * mu).abs());
            let room = if x[p.r.0] >= 0.5 {
                (p.m_primal - slack) / p.m_primal
            } else {
                (p.m_dual - mu) / p.m_dual
            };
            rep.min_big_m_slack = rep.min_big_m_slack.min(room);
        }
    }
    rep
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstCase {
    pub kind: WorstCaseKind,
    /// In [`WorstCaseKind::units`]; clamped at zero.
    pub value: f64,
    /// MW for violations and distance, $/h for sub-optimality.
    pub absolute: f64,
    pub argmax_pd: Vec<f64>,
    /// Bound minus incumbent of the outer maximum, in the units of `value`
    /// ($/h for sub-optimality).
    pub bound_gap: f64,
    pub certificate: Certificate,
    /// All post-solve checks passed.
    pub valid: bool,
    pub validity: ValidityReport,
    /// Component and direction attaining the maximum.
    pub witness: String,
    pub milps_solved: usize,
    pub unstable_neurons: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub milp: MilpOptions,
    /// Objectives of a family solved concurrently when above 1.
    pub threads: usize,
    /// Times the dual big-M may be doubled after a binding check.
    pub max_m_doublings: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            milp: MilpOptions::default(),
            threads: 1,
            max_m_doublings: 3,
        }
    }
}

/// Pre-activations of each hidden layer for one normalised input.
fn pre_activations(head: &Head, x: &[f64]) -> Vec<Vec<f64>> {
    let mut a = x.to_vec();
    let mut out = Vec::new();
    for layer in &head.layers[..head.layers.len() - 1] {
        let z: Vec<f64> = (0..layer.output_dim())
            .map(|r| layer.biases[r] + (0..a.len()).map(|c| layer.weights[(r, c)] * a[c]).sum::<f64>())
            .collect();
        a = z.iter().map(|v| v.max(0.0)).collect();
        out.push(z);
    }
    out
}

/// Sets neuron binaries from the activation pattern at the demands in `x`.
fn pattern_assignment(params: &NetworkParams, net: &NetworkEncoding, domain: &[(f64, f64)], x: &mut [f64]) -> Vec<f64> {
    let pd: Vec<f64> = net
        .pd
        .iter()
        .zip(domain)
        .map(|(v, (lo, hi))| x[v.0].clamp(*lo, *hi))
        .collect();
    let z = params.input_scaler.to_normalised(&pd);
    let pre = pre_activations(&params.pg_head, &z);
    for n in &net.neurons {
        if let Some(y) = n.binary {
            x[y.0] = if pre[n.layer][n.index] > 0.0 { 1.0 } else { 0.0 };
        }
    }
    pd
}

/// Sets complementarity binaries from the inner OPF active set at `pd`.
fn active_set_assignment(case: &GridCase, ptdf: &PtdfMatrix, kkt: &KktEncoding, pd: &[f64], x: &mut [f64]) -> bool {
    let Ok(opf) = solve_dcopf(case, ptdf, pd) else {
        return false;
    };
    for (i, &v) in kkt.pg.iter().enumerate() {
        x[v.0] = opf.pg[i];
    }
    for p in &kkt.pairs {
        x[p.r.0] = 0.0;
    }
    let mut y = x.to_vec();
    for p in &kkt.pairs {
        let slack = p.slack_at(&y);
        // A strictly slack constraint must carry a zero multiplier.
        let r = if slack > 1e-7 * (1.0 + p.m_primal) { 1.0 } else { 0.0 };
        y[p.r.0] = r;
    }
    x.copy_from_slice(&y);
    true
}

struct Objective {
    label: String,
    terms: Vec<(VarId, f64)>,
    constant: f64,
}

struct FamilyResult {
    best: Option<(usize, MilpSolution)>,
    bound: f64,
    nodes: usize,
    solved: usize,
    solutions: Vec<MilpSolution>,
}

/// Solves every objective over `model` with a cutoff of zero (metrics are
/// clamped there) and takes the outer maximum.
fn solve_family(
    model: &MilpModel,
    objectives: &[Objective],
    options: &VerifyOptions,
    heuristic: Option<Heuristic<'_>>,
) -> Result<FamilyResult> {
    let milp_opts = MilpOptions {
        cutoff: Some(0.0),
        ..options.milp
    };
    let run = |obj: &Objective| -> Result<Option<MilpSolution>> {
        // Interval bound from variable bounds; skip objectives that cannot exceed zero.
        let ub: f64 = obj.constant
            + obj
                .terms
                .iter()
                .map(|(v, c)| {
                    let (lo, hi) = model.bounds(*v);
                    if *c >= 0.0 {
                        c * hi
                    } else {
                        c * lo
                    }
                })
                .sum::<f64>();
        if ub <= 0.0 {
            return Ok(None);
        }
        let mut m = model.clone();
        m.set_objective(&obj.terms, obj.constant);
        solve_milp_with(&m, &milp_opts, heuristic).map(Some)
    };
    let results: Vec<Result<Option<MilpSolution>>> = if options.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
        pool.install(|| objectives.par_iter().map(run).collect())
    } else {
        objectives.iter().map(run).collect()
    };

    let mut fam = FamilyResult {
        best: None,
        bound: 0.0,
        nodes: 0,
        solved: 0,
        solutions: Vec::new(),
    };
    for (k, r) in results.into_iter().enumerate() {
        let Some(sol) = r? else { continue };
        fam.solved += 1;
        fam.nodes += sol.nodes;
        match sol.status {
            MilpStatus::Unbounded => {
                return Err(Error::Numerical(format!("objective `{}` is unbounded", objectives[k].label)))
            }
            MilpStatus::Infeasible => continue,
            MilpStatus::Optimal | MilpStatus::NodeLimit => {}
        }
        fam.bound = fam.bound.max(sol.best_bound);
        if sol.objective.is_finite() && fam.best.as_ref().is_none_or(|(_, b)| sol.objective > b.objective) {
            fam.best = Some((k, sol.clone()));
        }
        if sol.objective.is_finite() {
            fam.solutions.push(sol);
        }
    }
    Ok(fam)
}

fn check_domain(case: &GridCase, params: &NetworkParams, domain: &[(f64, f64)]) -> Result<()> {
    params.validate()?;
    dim_check("demand domain", case.n_load(), domain.len())?;
    dim_check("network input", case.n_load(), params.input_dim())?;
    dim_check("network output", case.n_gen(), params.pg_head.output_dim())?;
    if domain.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::Precondition("demand domain must be a finite box".into()));
    }
    Ok(())
}

fn midpoint(domain: &[(f64, f64)]) -> Vec<f64> {
    domain.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
}

/// Network-only model: demand variables and the encoded head.
fn network_model(params: &NetworkParams, domain: &[(f64, f64)]) -> Result<(MilpModel, NetworkEncoding, usize)> {
    let bounds = tighten_bounds(params, domain)?;
    let mut model = MilpModel::new();
    let pd: Vec<VarId> = domain
        .iter()
        .enumerate()
        .map(|(k, &(lo, hi))| model.add_continuous(format!("pd[{k}]"), lo, hi))
        .collect();
    let net = encode_network(params, &bounds, &mut model, &pd)?;
    Ok((model, net, bounds.n_unstable()))
}

fn violation_case(
    kind: WorstCaseKind,
    params: &NetworkParams,
    domain: &[(f64, f64)],
    options: &VerifyOptions,
    build: impl Fn(&NetworkEncoding) -> Vec<Objective>,
) -> Result<WorstCase> {
    let (model, net, unstable) = network_model(params, domain)?;
    let objectives = build(&net);
    let heuristic = |x: &[f64]| -> Option<Vec<f64>> {
        let mut y = x.to_vec();
        pattern_assignment(params, &net, domain, &mut y);
        Some(y)
    };
    let fam = solve_family(&model, &objectives, options, Some(&heuristic))?;
    let mut validity = ValidityReport::clean();
    for s in &fam.solutions {
        validity.merge(&check_solution_validity(Some(&net), None, &s.x));
    }
    let (value, argmax_pd, witness, incumbent) = match &fam.best {
        Some((k, s)) if s.objective > 0.0 => (
            s.objective,
            net.pd.iter().map(|v| s.x[v.0]).collect(),
            objectives[*k].label.clone(),
            s.objective,
        ),
        _ => (0.0, midpoint(domain), "none".to_string(), 0.0),
    };
    let bound = fam.bound.max(value);
    Ok(WorstCase {
        kind,
        value,
        absolute: value,
        argmax_pd,
        bound_gap: (bound - value).max(0.0),
        certificate: Certificate {
            incumbent,
            best_bound: bound,
            nodes: fam.nodes,
        },
        valid: validity.passed(),
        validity,
        witness,
        milps_solved: fam.solved,
        unstable_neurons: unstable,
    })
}

/// Largest generator-limit violation of the predicted setpoints over `domain`
/// (demands in MW), from `2·N_g` MILPs.
pub fn worst_case_gen_violation(
    params: &NetworkParams,
    case: &GridCase,
    domain: &[(f64, f64)],
    options: &VerifyOptions,
) -> Result<WorstCase> {
    check_domain(case, params, domain)?;
    violation_case(WorstCaseKind::GenViolation, params, domain, options, |net| {
        let mut objs = Vec::new();
        for (i, g) in case.generators.iter().enumerate() {
            objs.push(Objective {
                label: format!("generator {i} above p_max"),
                terms: vec![(net.pg[i], 1.0)],
                constant: -g.p_max,
            });
            objs.push(Objective {
                label: format!("generator {i} below p_min"),
                terms: vec![(net.pg[i], -1.0)],
                constant: g.p_min,
            });
        }
        objs
    })
}

/// Flow of line `l` as terms over predicted setpoints and demands.
fn flow_terms(case: &GridCase, ptdf: &PtdfMatrix, pg: &[VarId], pd: &[VarId], l: usize) -> Vec<(VarId, f64)> {
    let mut t: Vec<(VarId, f64)> = case
        .generators
        .iter()
        .enumerate()
        .map(|(i, g)| (pg[i], ptdf.get(l, g.bus)))
        .filter(|(_, c)| *c != 0.0)
        .collect();
    t.extend(
        case.loads
            .iter()
            .enumerate()
            .map(|(k, d)| (pd[k], -ptdf.get(l, d.bus)))
            .filter(|(_, c)| *c != 0.0),
    );
    t
}

/// Largest line-limit violation of the predicted dispatch over `domain`,
/// from `2·N_line` MILPs.
pub fn worst_case_line_violation(
    params: &NetworkParams,
    case: &GridCase,
    ptdf: &PtdfMatrix,
    domain: &[(f64, f64)],
    options: &VerifyOptions,
) -> Result<WorstCase> {
    check_domain(case, params, domain)?;
    violation_case(WorstCaseKind::LineViolation, params, domain, options, |net| {
        let mut objs = Vec::new();
        for (l, line) in case.lines.iter().enumerate() {
            let t = flow_terms(case, ptdf, &net.pg, &net.pd, l);
            objs.push(Objective {
                label: format!("line {l} forward"),
                terms: t.clone(),
                constant: -line.flow_limit,
            });
            objs.push(Objective {
                label: format!("line {l} reverse"),
                terms: t.iter().map(|&(v, c)| (v, -c)).collect(),
                constant: -line.flow_limit,
            });
        }
        objs
    })
}

struct BilevelOutcome {
    model: MilpModel,
    net: NetworkEncoding,
    kkt: KktEncoding,
    fam: FamilyResult,
    validity: ValidityReport,
    unstable: usize,
}

/// Network plus inner-OPF encoding, solved for every objective; the dual
/// big-M is doubled and the family re-solved while a check finds it binding.
fn solve_bilevel(
    params: &NetworkParams,
    case: &GridCase,
    ptdf: &PtdfMatrix,
    domain: &[(f64, f64)],
    options: &VerifyOptions,
    build: &dyn Fn(&NetworkEncoding, &KktEncoding) -> Vec<Objective>,
) -> Result<(BilevelOutcome, Vec<Objective>)> {
    let mut m_scale = 1.0;
    let mut attempt = 0;
    loop {
        let (mut model, net, unstable) = network_model(params, domain)?;
        let kkt = encode_opf_kkt(case, ptdf, &mut model, &net.pd, domain, m_scale)?;
        let objectives = build(&net, &kkt);
        let heuristic = |x: &[f64]| -> Option<Vec<f64>> {
            let mut y = x.to_vec();
            let pd = pattern_assignment(params, &net, domain, &mut y);
            for (v, p) in net.pd.iter().zip(&pd) {
                y[v.0] = *p;
            }
            active_set_assignment(case, ptdf, &kkt, &pd, &mut y).then_some(y)
        };
        let fam = solve_family(&model, &objectives, options, Some(&heuristic))?;
        let mut validity = ValidityReport::clean();
        for s in &fam.solutions {
            validity.merge(&check_solution_validity(Some(&net), Some(&kkt), &s.x));
        }
        if validity.big_m_ok() || attempt >= options.max_m_doublings {
            return Ok((
                BilevelOutcome {
                    model,
                    net,
                    kkt,
                    fam,
                    validity,
                    unstable,
                },
                objectives,
            ));
        }
        log::info!("dual big-M binding; doubling and re-solving");
        attempt += 1;
        m_scale *= 2.0;
    }
}

/// Largest normalised distance `|p̂g_i − pg_i| / (p_max − p_min)` between
/// prediction and inner optimum over `domain`, in %.
pub fn worst_case_distance(
    params: &NetworkParams,
    case: &GridCase,
    ptdf: &PtdfMatrix,
    domain: &[(f64, f64)],
    options: &VerifyOptions,
) -> Result<WorstCase> {
    check_domain(case, params, domain)?;
    let build = |net: &NetworkEncoding, kkt: &KktEncoding| {
        let mut objs = Vec::new();
        for (i, g) in case.generators.iter().enumerate() {
            let r = g.range();
            if r <= 0.0 {
                continue;
            }
            for (sign, dir) in [(1.0, "above"), (-1.0, "below")] {
                objs.push(Objective {
                    label: format!("generator {i} {dir} optimum"),
                    terms: vec![(net.pg[i], sign / r), (kkt.pg[i], -sign / r)],
                    constant: 0.0,
                });
            }
        }
        objs
    };
    let (out, objectives) = solve_bilevel(params, case, ptdf, domain, options, &build)?;
    let fam = &out.fam;
    let (frac, argmax_pd, witness, absolute) = match &fam.best {
        Some((k, s)) if s.objective > 0.0 => {
            let gen = objectives[*k].terms[0].0;
            let i = out.net.pg.iter().position(|v| *v == gen).expect("objective generator");
            (
                s.objective,
                out.net.pd.iter().map(|v| s.x[v.0]).collect(),
                objectives[*k].label.clone(),
                (s.x[out.net.pg[i].0] - s.x[out.kkt.pg[i].0]).abs(),
            )
        }
        _ => (0.0, midpoint(domain), "none".to_string(), 0.0),
    };
    let bound = fam.bound.max(frac);
    let _ = &out.model;
    Ok(WorstCase {
        kind: WorstCaseKind::Distance,
        value: 100.0 * frac,
        absolute,
        argmax_pd,
        bound_gap: 100.0 * (bound - frac).max(0.0),
        certificate: Certificate {
            incumbent: frac,
            best_bound: bound,
            nodes: fam.nodes,
        },
        valid: out.validity.passed(),
        validity: out.validity.clone(),
        witness,
        milps_solved: fam.solved,
        unstable_neurons: out.unstable,
    })
}

/// Largest cost excess `cᵀ(p̂g − pg)` of the prediction over the inner optimum.
/// `absolute` is in $/h; `value` is that excess in % of the optimal cost at
/// the maximising demand.
pub fn worst_case_suboptimality(
    params: &NetworkParams,
    case: &GridCase,
    ptdf: &PtdfMatrix,
    domain: &[(f64, f64)],
    options: &VerifyOptions,
) -> Result<WorstCase> {
    check_domain(case, params, domain)?;
    let costs = case.costs();
    let build = |net: &NetworkEncoding, kkt: &KktEncoding| {
        let mut terms = Vec::new();
        for (i, c) in costs.iter().enumerate() {
            if *c != 0.0 {
                terms.push((net.pg[i], *c));
                terms.push((kkt.pg[i], -*c));
            }
        }
        vec![Objective {
            label: "total cost".into(),
            terms,
            constant: 0.0,
        }]
    };
    let (out, _) = solve_bilevel(params, case, ptdf, domain, options, &build)?;
    let fam = &out.fam;
    let (abs, argmax_pd) = match &fam.best {
        Some((_, s)) if s.objective > 0.0 => (s.objective, out.net.pd.iter().map(|v| s.x[v.0]).collect()),
        _ => (0.0, midpoint(domain)),
    };
    let pct = |a: f64| -> Result<f64> {
        if a == 0.0 {
            return Ok(0.0);
        }
        let opt = solve_dcopf(case, ptdf, &argmax_pd)?.objective;
        Ok(if opt.abs() > 1e-12 { 100.0 * a / opt.abs() } else { 0.0 })
    };
    let bound = fam.bound.max(abs);
    Ok(WorstCase {
        kind: WorstCaseKind::Suboptimality,
        value: pct(abs)?,
        absolute: abs,
        argmax_pd,
        bound_gap: (bound - abs).max(0.0),
        certificate: Certificate {
            incumbent: abs,
            best_bound: bound,
            nodes: fam.nodes,
        },
        valid: out.validity.passed(),
        validity: out.validity.clone(),
        witness: if abs > 0.0 { "total cost".into() } else { "none".into() },
        milps_solved: fam.solved,
        unstable_neurons: out.unstable,
    })
}

/// Inner OPF solved through its linearised optimality conditions at fixed
/// demands.
#[derive(Clone, Debug, PartialEq)]
pub struct KktSolve {
    pub pg: Vec<f64>,
    pub lambda: f64,
    pub validity: ValidityReport,
    pub nodes: usize,
}

/// Solves the optimality-condition encoding with `pd` fixed. With
/// `use_heuristic`, the branch-and-bound is seeded from an LP-derived active
/// set; without it the search runs unaided.
pub fn solve_opf_by_kkt(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    pd: &[f64],
    options: &MilpOptions,
    use_heuristic: bool,
) -> Result<KktSolve> {
    dim_check("demand vector", case.n_load(), pd.len())?;
    let mut model = MilpModel::new();
    let pd_vars: Vec<VarId> = pd
        .iter()
        .enumerate()
        .map(|(k, &p)| model.add_continuous(format!("pd[{k}]"), p, p))
        .collect();
    let domain: Vec<(f64, f64)> = pd.iter().map(|&p| (p, p)).collect();
    let kkt = encode_opf_kkt(case, ptdf, &mut model, &pd_vars, &domain, 1.0)?;
    // Any feasible point is optimal; the cost objective only guides the search.
    let obj: Vec<(VarId, f64)> = kkt.pg.iter().zip(case.costs()).map(|(v, c)| (*v, -c)).collect();
    model.set_objective(&obj, 0.0);
    let heuristic = |x: &[f64]| -> Option<Vec<f64>> {
        let mut y = x.to_vec();
        active_set_assignment(case, ptdf, &kkt, pd, &mut y).then_some(y)
    };
    let h: Option<Heuristic<'_>> = if use_heuristic { Some(&heuristic) } else { None };
    let sol = solve_milp_with(&model, options, h)?;
    match sol.status {
        MilpStatus::Optimal => {}
        MilpStatus::Infeasible => return Err(Error::Infeasible("no optimal dispatch for these demands".into())),
        MilpStatus::NodeLimit if sol.objective.is_finite() => {}
        _ => return Err(Error::Numerical("optimality-condition model did not solve".into())),
    }
    Ok(KktSolve {
        pg: kkt.pg.iter().map(|v| sol.x[v.0]).collect(),
        lambda: sol.x[kkt.lambda.0],
        validity: check_solution_validity(None, Some(&kkt), &sol.x),
        nodes: sol.nodes,
    })
}

/// Re-evaluates a worst case at its maximising demand with the forward pass
/// (and the OPF solver where the metric needs the true optimum).
pub fn resimulate(
    wc: &WorstCase,
    params: &NetworkParams,
    case: &GridCase,
    ptdf: &PtdfMatrix,
) -> Result<f64> {
    let pred = forward(params, &wc.argmax_pd)?;
    let pd = &wc.argmax_pd;
    Ok(match wc.kind {
        WorstCaseKind::GenViolation => crate::dcopf::generator_violation(case, &pred.pg),
        WorstCaseKind::LineViolation => crate::dcopf::line_violation(case, ptdf, pd, &pred.pg),
        WorstCaseKind::Distance => {
            let opf = solve_dcopf(case, ptdf, pd)?;
            case.generators
                .iter()
                .enumerate()
                .filter(|(_, g)| g.range() > 0.0)
                .map(|(i, g)| 100.0 * (pred.pg[i] - opf.pg[i]).abs() / g.range())
                .fold(0.0, f64::max)
        }
        WorstCaseKind::Suboptimality => {
            let opf = solve_dcopf(case, ptdf, pd)?;
            let c_hat: f64 = case.costs().iter().zip(&pred.pg).map(|(c, p)| c * p).sum();
            let excess = (c_hat - opf.objective).max(0.0);
            if opf.objective.abs() > 1e-12 {
                100.0 * excess / opf.objective.abs()
            } else {
                0.0
            }
        }
    })
}

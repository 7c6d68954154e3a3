//! DC optimal power flow: the LP, its duals, KKT residuals and the
//! prediction-quality metrics used to score a network.
//!
//! Stationarity is implemented in the form
//!
//! ```text
//! c + λ + μ̄_g − μ_g + PTDF_gᵀ (μ̄_l − μ_l) = 0
//! ```
//!
//! so `λ` is the *negative* of the marginal energy price. All multipliers are
//! in $/MWh and all powers in MW.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_check, Error, Result};
use crate::grid::{GridCase, PtdfMatrix};
use crate::lp::{solve_lp, LinearProgram, LpStatus, Relation};

/// Dual variables in the fixed layout `[λ, μ̄_g, μ_g, μ̄_l, μ_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Duals {
    pub lambda: f64,
    pub mu_g_upper: Vec<f64>,
    pub mu_g_lower: Vec<f64>,
    pub mu_l_upper: Vec<f64>,
    pub mu_l_lower: Vec<f64>,
}

impl Duals {
    pub fn zeros(n_gen: usize, n_line: usize) -> Self {
        Self {
            lambda: 0.0,
            mu_g_upper: vec![0.0; n_gen],
            mu_g_lower: vec![0.0; n_gen],
            mu_l_upper: vec![0.0; n_line],
            mu_l_lower: vec![0.0; n_line],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + 2 * self.mu_g_upper.len() + 2 * self.mu_l_upper.len());
        v.push(self.lambda);
        v.extend_from_slice(&self.mu_g_upper);
        v.extend_from_slice(&self.mu_g_lower);
        v.extend_from_slice(&self.mu_l_upper);
        v.extend_from_slice(&self.mu_l_lower);
        v
    }

    pub fn from_slice(v: &[f64], n_gen: usize, n_line: usize) -> Result<Self> {
        dim_check("dual vector", 1 + 2 * n_gen + 2 * n_line, v.len())?;
        let (g, l) = (n_gen, n_line);
        Ok(Self {
            lambda: v[0],
            mu_g_upper: v[1..1 + g].to_vec(),
            mu_g_lower: v[1 + g..1 + 2 * g].to_vec(),
            mu_l_upper: v[1 + 2 * g..1 + 2 * g + l].to_vec(),
            mu_l_lower: v[1 + 2 * g + l..].to_vec(),
        })
    }

    /// Every inequality multiplier, in layout order.
    pub fn mus(&self) -> impl Iterator<Item = f64> + '_ {
        self.mu_g_upper
            .iter()
            .chain(&self.mu_g_lower)
            .chain(&self.mu_l_upper)
            .chain(&self.mu_l_lower)
            .copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpfSolution {
    pub pg: Vec<f64>,
    pub duals: Duals,
    /// $/h.
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktResiduals {
    pub eps_stat: f64,
    pub eps_comp: f64,
    pub eps_dual: f64,
    pub eps_prim: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.eps_stat
            .max(self.eps_comp)
            .max(self.eps_dual)
            .max(self.eps_prim)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PredictionMetrics {
    pub mae_pct: f64,
    /// MW.
    pub v_g: f64,
    /// MW.
    pub v_line: f64,
    pub v_dist: f64,
    pub v_opt: f64,
    /// Generators with `p_max = p_min`, left out of the normalised metrics.
    pub excluded_generators: usize,
}

fn check_inputs(case: &GridCase, ptdf: &PtdfMatrix, pd: &[f64]) -> Result<()> {
    dim_check("demand vector", case.n_load(), pd.len())?;
    dim_check("PTDF rows", case.n_line(), ptdf.n_lines())?;
    dim_check("PTDF columns", case.n_bus, ptdf.n_buses())?;
    Ok(())
}

/// Line flows `PTDF (P_g − P_d)` mapped through the bus incidence.
pub fn line_flows(case: &GridCase, ptdf: &PtdfMatrix, pg: &[f64], pd: &[f64]) -> Vec<f64> {
    ptdf.flows(&case.injections(pg, pd))
}

/// Variables are generator outputs with bounds `[p_min, p_max]`. Row 0 is the
/// load balance; rows `1..=L` are `PTDF_l (P_g − P_d) ≤ limit`, rows
/// `L+1..=2L` are `−PTDF_l (P_g − P_d) ≤ limit`.
pub fn build_opf_lp(case: &GridCase, ptdf: &PtdfMatrix, pd: &[f64]) -> Result<LinearProgram> {
    check_inputs(case, ptdf, pd)?;
    if pd.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::Precondition("demand must be finite and nonnegative".into()));
    }
    let ng = case.n_gen();
    let mut lp = LinearProgram::new(ng);
    lp.objective = case.costs();
    lp.bounds = case.generators.iter().map(|g| (g.p_min, g.p_max)).collect();
    lp.add_constraint(vec![1.0; ng], Relation::Eq, pd.iter().sum());

    let gen_cols = ptdf.generator_columns(case);
    let load_flow = ptdf.flows(&case.injections(&vec![0.0; ng], pd));
    for sign in [1.0, -1.0] {
        for (l, line) in case.lines.iter().enumerate() {
            let coeffs: Vec<f64> = (0..ng).map(|i| sign * gen_cols[(l, i)]).collect();
            // sign·PTDF_l·(pg − pd) ≤ limit, with the demand part moved right.
            lp.add_constraint(coeffs, Relation::Le, line.flow_limit - sign * load_flow[l]);
        }
    }
    Ok(lp)
}

pub fn solve_dcopf(case: &GridCase, ptdf: &PtdfMatrix, pd: &[f64]) -> Result<OpfSolution> {
    let lp = build_opf_lp(case, ptdf, pd)?;
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(Error::Infeasible(format!(
                "demand of {:.3} MW cannot be served",
                pd.iter().sum::<f64>()
            )))
        }
        s => return Err(Error::Numerical(format!("OPF LP ended with status {s:?}"))),
    }
    let nl = case.n_line();
    let duals = Duals {
        lambda: -sol.duals[0],
        mu_g_upper: sol.reduced_costs.iter().map(|d| (-d).max(0.0)).collect(),
        mu_g_lower: sol.reduced_costs.iter().map(|d| d.max(0.0)).collect(),
        mu_l_upper: sol.duals[1..1 + nl].iter().map(|y| (-y).max(0.0)).collect(),
        mu_l_lower: sol.duals[1 + nl..].iter().map(|y| (-y).max(0.0)).collect(),
    };
    Ok(OpfSolution {
        pg: sol.x,
        duals,
        objective: sol.objective_value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredDuals {
    pub duals: Duals,
    /// The active set did not determine the duals uniquely; `duals` are the LP's.
    pub degenerate: bool,
}

/// Recovers multipliers from the stationarity system restricted to the
/// constraints active at `opf.pg`.
pub fn recover_duals_from_kkt(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    pd: &[f64],
    opf: &OpfSolution,
) -> Result<RecoveredDuals> {
    check_inputs(case, ptdf, pd)?;
    dim_check("generation vector", case.n_gen(), opf.pg.len())?;
    let (ng, nl) = (case.n_gen(), case.n_line());
    let pg = &opf.pg;
    let flows = line_flows(case, ptdf, pg, pd);
    let gen_cols = ptdf.generator_columns(case);
    let active = |slack: f64, bound: f64| slack <= 1e-7 * (1.0 + bound.abs());

    // Unknown k ↦ (layout index in the dual vector, stationarity column).
    let mut unknowns: Vec<(usize, Vec<f64>)> = vec![(0, vec![1.0; ng])];
    for (i, g) in case.generators.iter().enumerate() {
        let unit = |s: f64| (0..ng).map(|r| if r == i { s } else { 0.0 }).collect::<Vec<_>>();
        if active(g.p_max - pg[i], g.p_max) {
            unknowns.push((1 + i, unit(1.0)));
        }
        if active(pg[i] - g.p_min, g.p_min) {
            unknowns.push((1 + ng + i, unit(-1.0)));
        }
    }
    for (l, line) in case.lines.iter().enumerate() {
        let col = |s: f64| (0..ng).map(|r| s * gen_cols[(l, r)]).collect::<Vec<_>>();
        if active(line.flow_limit - flows[l], line.flow_limit) {
            unknowns.push((1 + 2 * ng + l, col(1.0)));
        }
        if active(line.flow_limit + flows[l], line.flow_limit) {
            unknowns.push((1 + 2 * ng + nl + l, col(-1.0)));
        }
    }

    let fallback = || RecoveredDuals {
        duals: opf.duals.clone(),
        degenerate: true,
    };
    let k = unknowns.len();
    if k > ng {
        return Ok(fallback());
    }
    let a = DMatrix::from_fn(ng, k, |r, c| unknowns[c].1[r]);
    let rhs = DVector::from_iterator(ng, case.generators.iter().map(|g| -g.cost));
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax.max(1.0) {
        return Ok(fallback());
    }
    let u = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let resid = (&a * &u - &rhs).amax();
    let cscale = 1.0 + rhs.amax();
    if resid > 1e-7 * cscale {
        return Ok(fallback());
    }
    let mut v = vec![0.0; case.n_duals()];
    for (c, (idx, _)) in unknowns.iter().enumerate() {
        v[*idx] = u[c];
    }
    if v[1..].iter().any(|&m| m < -1e-9 * cscale) {
        return Ok(fallback());
    }
    for m in v[1..].iter_mut() {
        *m = m.max(0.0);
    }
    Ok(RecoveredDuals {
        duals: Duals::from_slice(&v, ng, nl)?,
        degenerate: false,
    })
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Stationarity residual per generator.
pub fn stationarity(case: &GridCase, ptdf: &PtdfMatrix, duals: &Duals) -> Vec<f64> {
    case.generators
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let line_term: f64 = (0..case.n_line())
                .map(|l| ptdf.get(l, g.bus) * (duals.mu_l_upper[l] - duals.mu_l_lower[l]))
                .sum();
            g.cost + duals.lambda + duals.mu_g_upper[i] - duals.mu_g_lower[i] + line_term
        })
        .collect()
}

/// The four KKT discrepancies of a predicted `(P̂_g, dual)` pair. Dual
/// feasibility penalises negative multipliers, and the lower line direction is
/// paired with its own multiplier.
pub fn kkt_residuals(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    pd: &[f64],
    pg_hat: &[f64],
    duals_hat: &Duals,
) -> Result<KktResiduals> {
    check_inputs(case, ptdf, pd)?;
    dim_check("generation vector", case.n_gen(), pg_hat.len())?;
    dim_check("generator multipliers", case.n_gen(), duals_hat.mu_g_upper.len())?;
    dim_check("generator multipliers", case.n_gen(), duals_hat.mu_g_lower.len())?;
    dim_check("line multipliers", case.n_line(), duals_hat.mu_l_upper.len())?;
    dim_check("line multipliers", case.n_line(), duals_hat.mu_l_lower.len())?;

    let eps_stat = stationarity(case, ptdf, duals_hat).iter().map(|r| r.abs()).sum();
    let flows = line_flows(case, ptdf, pg_hat, pd);

    let mut eps_comp = 0.0;
    let mut eps_prim = 0.0;
    for (i, g) in case.generators.iter().enumerate() {
        eps_comp += (duals_hat.mu_g_upper[i] * (g.p_max - pg_hat[i])).abs();
        eps_comp += (duals_hat.mu_g_lower[i] * (pg_hat[i] - g.p_min)).abs();
        eps_prim += relu(pg_hat[i] - g.p_max) + relu(g.p_min - pg_hat[i]);
    }
    for (l, line) in case.lines.iter().enumerate() {
        eps_comp += (duals_hat.mu_l_upper[l] * (flows[l] - line.flow_limit)).abs();
        eps_comp += (duals_hat.mu_l_lower[l] * (-flows[l] - line.flow_limit)).abs();
        eps_prim += relu(flows[l] - line.flow_limit) + relu(-flows[l] - line.flow_limit);
    }
    eps_prim += (pg_hat.iter().sum::<f64>() - pd.iter().sum::<f64>()).abs();
    let eps_dual = duals_hat.mus().map(|m| relu(-m)).sum();

    Ok(KktResiduals {
        eps_stat,
        eps_comp,
        eps_dual,
        eps_prim,
    })
}

/// Worst generator-limit violation of a dispatch, MW.
pub fn generator_violation(case: &GridCase, pg_hat: &[f64]) -> f64 {
    case.generators
        .iter()
        .zip(pg_hat)
        .map(|(g, p)| relu(p - g.p_max).max(relu(g.p_min - p)))
        .fold(0.0, f64::max)
}

/// Worst line-limit violation of a dispatch, MW.
pub fn line_violation(case: &GridCase, ptdf: &PtdfMatrix, pd: &[f64], pg_hat: &[f64]) -> f64 {
    line_flows(case, ptdf, pg_hat, pd)
        .iter()
        .zip(&case.lines)
        .map(|(f, l)| relu(f.abs() - l.flow_limit))
        .fold(0.0, f64::max)
}

/// Scores a prediction against the true optimum. Sub-optimality is clamped at
/// zero: a cheaper-than-optimal dispatch is infeasible and shows up in the
/// violation metrics instead.
pub fn prediction_metrics(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    pd: &[f64],
    pg_hat: &[f64],
    opf_ref: &OpfSolution,
) -> Result<PredictionMetrics> {
    check_inputs(case, ptdf, pd)?;
    dim_check("generation vector", case.n_gen(), pg_hat.len())?;
    dim_check("reference generation", case.n_gen(), opf_ref.pg.len())?;

    let mut excluded = 0;
    let mut sum = 0.0;
    let mut worst: f64 = 0.0;
    for (i, g) in case.generators.iter().enumerate() {
        let range = g.range();
        if range <= 0.0 {
            excluded += 1;
            continue;
        }
        let d = (pg_hat[i] - opf_ref.pg[i]).abs() / range * 100.0;
        sum += d;
        worst = worst.max(d);
    }
    let counted = case.n_gen() - excluded;
    let mae_pct = if counted > 0 { sum / counted as f64 } else { 0.0 };

    let costs = case.costs();
    let c_hat: f64 = costs.iter().zip(pg_hat).map(|(c, p)| c * p).sum();
    let c_star: f64 = costs.iter().zip(&opf_ref.pg).map(|(c, p)| c * p).sum();
    let v_opt = if c_star.abs() > 1e-12 {
        relu((c_hat - c_star) / c_star.abs() * 100.0)
    } else {
        0.0
    };

    Ok(PredictionMetrics {
        mae_pct,
        v_g: generator_violation(case, pg_hat),
        v_line: line_violation(case, ptdf, pd, pg_hat),
        v_dist: worst,
        v_opt,
        excluded_generators: excluded,
    })
}

//! Training loss and its exact gradient.

use nalgebra::DMatrix;

use super::train::{TrainConfig, Variant};
use super::{Head, NetworkParams};
use crate::error::{dim_check, Result};
use crate::grid::{GridCase, PtdfMatrix};
use crate::sampling::LabeledPoint;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mae_p: f64,
    pub mae_l: f64,
    pub mae_eps: f64,
}

/// Gradient with the same layer shapes as the network heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub pg_head: Head,
    pub dual_head: Head,
}

impl Gradient {
    /// Same layout as [`NetworkParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in self.pg_head.layers.iter().chain(&self.dual_head.layers) {
            v.extend_from_slice(l.weights.as_slice());
            v.extend_from_slice(l.biases.as_slice());
        }
        v
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Case data the loss needs, gathered once.
pub(crate) struct LossContext {
    p_min: Vec<f64>,
    p_max: Vec<f64>,
    range: Vec<f64>,
    cost: Vec<f64>,
    limit: Vec<f64>,
    /// `lines × gens`.
    gen_ptdf: DMatrix<f64>,
    /// `lines × loads`.
    load_ptdf: DMatrix<f64>,
    c_scale: f64,
    p_scale: f64,
    /// Generators with a nonzero range.
    n_active: usize,
}

impl LossContext {
    pub(crate) fn new(case: &GridCase, ptdf: &PtdfMatrix) -> Self {
        let range: Vec<f64> = case.generators.iter().map(|g| g.range()).collect();
        let cost = case.costs();
        let c_scale = cost.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1e-12);
        let p_scale = range.iter().fold(0.0f64, |m, r| m.max(*r)).max(1e-12);
        Self {
            p_min: case.generators.iter().map(|g| g.p_min).collect(),
            p_max: case.generators.iter().map(|g| g.p_max).collect(),
            n_active: range.iter().filter(|r| **r > 0.0).count(),
            range,
            cost,
            limit: case.lines.iter().map(|l| l.flow_limit).collect(),
            gen_ptdf: ptdf.generator_columns(case),
            load_ptdf: ptdf.load_columns(case),
            c_scale,
            p_scale,
        }
    }

    fn n_gen(&self) -> usize {
        self.p_min.len()
    }

    fn n_line(&self) -> usize {
        self.limit.len()
    }

    /// Generator-limit penalty for the bound-violation variants; adds `w ·
    /// ∂ε/∂pg` into `d_pg` when given.
    fn generator_penalty(&self, variant: Variant, pg: &[f64], d_pg: Option<(&mut [f64], f64)>) -> f64 {
        let mut total = 0.0;
        let mut grads = d_pg;
        for i in 0..self.n_gen() {
            let r = self.range[i];
            if r <= 0.0 {
                continue;
            }
            let over = relu(pg[i] - self.p_max[i]) / r;
            let under = relu(self.p_min[i] - pg[i]) / r;
            // dviolation/dpg: +1/r above the upper bound, -1/r below the lower.
            let (v, dv) = if over > 0.0 {
                (over, 1.0 / r)
            } else if under > 0.0 {
                (under, -1.0 / r)
            } else {
                (0.0, 0.0)
            };
            let (value, slope) = match variant {
                Variant::PgAbs => (v, 1.0),
                Variant::PgSqr => (v * v, 2.0 * v),
                Variant::PgExp => (v.exp() - 1.0, v.exp()),
                Variant::Plain | Variant::Kkt => unreachable!("not a bound-penalty variant"),
            };
            total += value;
            if let Some((d, w)) = grads.as_mut() {
                if dv != 0.0 {
                    d[i] += *w * slope * dv;
                }
            }
        }
        total
    }

    /// Scaled residual sum of the optimality conditions; accumulates `w ·` the
    /// gradient into `d_pg` and `d_du` when given.
    fn kkt_penalty(
        &self,
        pd: &[f64],
        pg: &[f64],
        du: &[f64],
        grads: Option<(&mut [f64], &mut [f64], f64)>,
    ) -> f64 {
        let (ng, nl) = (self.n_gen(), self.n_line());
        let (iu_g, il_g, iu_l, il_l) = (1, 1 + ng, 1 + 2 * ng, 1 + 2 * ng + nl);
        let w_stat = 1.0 / self.c_scale;
        let w_comp = 1.0 / (self.c_scale * self.p_scale);
        let w_dual = 1.0 / self.c_scale;
        let w_prim = 1.0 / self.p_scale;

        let flows: Vec<f64> = (0..nl)
            .map(|l| {
                let g: f64 = (0..ng).map(|i| self.gen_ptdf[(l, i)] * pg[i]).sum();
                let d: f64 = (0..pd.len()).map(|k| self.load_ptdf[(l, k)] * pd[k]).sum();
                g - d
            })
            .collect();
        let net_mu_l: Vec<f64> = (0..nl).map(|l| du[iu_l + l] - du[il_l + l]).collect();

        let mut eps_stat = 0.0;
        let mut eps_comp = 0.0;
        let mut eps_dual = 0.0;
        let mut eps_prim = 0.0;
        let mut d_flow = vec![0.0; nl];
        let mut g_pg = vec![0.0; ng];
        let mut g_du = vec![0.0; du.len()];

        for i in 0..ng {
            let line: f64 = (0..nl).map(|l| self.gen_ptdf[(l, i)] * net_mu_l[l]).sum();
            let s = self.cost[i] + du[0] + du[iu_g + i] - du[il_g + i] + line;
            eps_stat += s.abs();
            let ds = w_stat * sgn(s);
            g_du[0] += ds;
            g_du[iu_g + i] += ds;
            g_du[il_g + i] -= ds;
            for l in 0..nl {
                g_du[iu_l + l] += ds * self.gen_ptdf[(l, i)];
                g_du[il_l + l] -= ds * self.gen_ptdf[(l, i)];
            }

            let up = du[iu_g + i] * (self.p_max[i] - pg[i]);
            eps_comp += up.abs();
            g_du[iu_g + i] += w_comp * sgn(up) * (self.p_max[i] - pg[i]);
            g_pg[i] -= w_comp * sgn(up) * du[iu_g + i];
            let lo = du[il_g + i] * (pg[i] - self.p_min[i]);
            eps_comp += lo.abs();
            g_du[il_g + i] += w_comp * sgn(lo) * (pg[i] - self.p_min[i]);
            g_pg[i] += w_comp * sgn(lo) * du[il_g + i];

            let over = pg[i] - self.p_max[i];
            let under = self.p_min[i] - pg[i];
            eps_prim += relu(over) + relu(under);
            if over > 0.0 {
                g_pg[i] += w_prim;
            }
            if under > 0.0 {
                g_pg[i] -= w_prim;
            }
        }
        for l in 0..nl {
            let up = du[iu_l + l] * (flows[l] - self.limit[l]);
            eps_comp += up.abs();
            g_du[iu_l + l] += w_comp * sgn(up) * (flows[l] - self.limit[l]);
            d_flow[l] += w_comp * sgn(up) * du[iu_l + l];
            let lo = du[il_l + l] * (-flows[l] - self.limit[l]);
            eps_comp += lo.abs();
            g_du[il_l + l] += w_comp * sgn(lo) * (-flows[l] - self.limit[l]);
            d_flow[l] -= w_comp * sgn(lo) * du[il_l + l];

            let over = flows[l] - self.limit[l];
            let under = -flows[l] - self.limit[l];
            eps_prim += relu(over) + relu(under);
            if over > 0.0 {
                d_flow[l] += w_prim;
            }
            if under > 0.0 {
                d_flow[l] -= w_prim;
            }
        }
        let balance = pg.iter().sum::<f64>() - pd.iter().sum::<f64>();
        eps_prim += balance.abs();
        for g in &mut g_pg {
            *g += w_prim * sgn(balance);
        }
        for (k, m) in du.iter().enumerate().skip(1) {
            eps_dual += relu(-m);
            if *m < 0.0 {
                g_du[k] -= w_dual;
            }
        }

        if let Some((d_pg, d_du, w)) = grads {
            for i in 0..ng {
                let through_flows: f64 = (0..nl).map(|l| self.gen_ptdf[(l, i)] * d_flow[l]).sum();
                d_pg[i] += w * (g_pg[i] + through_flows);
            }
            for (d, g) in d_du.iter_mut().zip(&g_du) {
                *d += w * g;
            }
        }
        w_stat * eps_stat + w_comp * eps_comp + w_dual * eps_dual + w_prim * eps_prim
    }
}

fn check_points(params: &NetworkParams, labeled: &[&LabeledPoint], colloc: &[&[f64]]) -> Result<()> {
    let d = params.input_dim();
    for p in labeled {
        dim_check("labelled demand", d, p.pd.len())?;
        dim_check("labelled setpoints", params.pg_head.output_dim(), p.pg_star.len())?;
        dim_check("labelled multipliers", params.dual_head.output_dim(), p.duals_star.len())?;
    }
    for pd in colloc {
        dim_check("collocation demand", d, pd.len())?;
    }
    Ok(())
}

/// Loss value and, when `want_grad`, its gradient.
pub(crate) fn loss_and_grad(
    params: &NetworkParams,
    labeled: &[&LabeledPoint],
    colloc: &[&[f64]],
    ctx: &LossContext,
    config: &TrainConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradient>)> {
    params.validate()?;
    check_points(params, labeled, colloc)?;
    dim_check("setpoint head output", ctx.n_gen(), params.pg_head.output_dim())?;
    let variant = config.variant;
    let nt = labeled.len();
    // Collocation points carry only the physics term, absent for the plain variant.
    let nc = if variant == Variant::Plain { 0 } else { colloc.len() };
    let n_dual_pts = if variant == Variant::Kkt { nt + nc } else { nt };

    let pds = labeled
        .iter()
        .map(|p| p.pd.as_slice())
        .chain(colloc[..nc].iter().copied());
    let x = params.input_matrix(pds.collect::<Vec<_>>().into_iter())?;
    let x_dual = x.columns(0, n_dual_pts).into_owned();
    let (pg_raw, pg_acts) = params.pg_head.forward_batch(x, want_grad);
    let (du_raw, du_acts) = params.dual_head.forward_batch(x_dual, want_grad);

    let ng = pg_raw.nrows();
    let nu = du_raw.nrows();
    let to_phys = |raw: &DMatrix<f64>, s: &super::AffineScaler| {
        let mut m = raw.clone();
        for mut col in m.column_iter_mut() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = s.offset[r] + s.scale[r] * *v;
            }
        }
        m
    };
    let pg = to_phys(&pg_raw, &params.pg_scaler);
    let du = to_phys(&du_raw, &params.dual_scaler);
    let mut d_pg = DMatrix::<f64>::zeros(ng, pg.ncols());
    let mut d_du = DMatrix::<f64>::zeros(nu, du.ncols());

    let mut mae_p = 0.0;
    let mut mae_l = 0.0;
    if nt > 0 {
        let wp = config.lambda_p / (nt as f64 * ctx.n_active.max(1) as f64);
        let wl = config.lambda_l / (nt as f64 * nu.max(1) as f64);
        for (j, p) in labeled.iter().enumerate() {
            let col = &pg.as_slice()[j * ng..(j + 1) * ng];
            let dcol = &mut d_pg.as_mut_slice()[j * ng..(j + 1) * ng];
            for i in 0..ng {
                let r = ctx.range[i];
                if r <= 0.0 {
                    continue;
                }
                let diff = col[i] - p.pg_star[i];
                mae_p += diff.abs() / r;
                dcol[i] += wp * sgn(diff) / r;
            }
            let col = &du.as_slice()[j * nu..(j + 1) * nu];
            let dcol = &mut d_du.as_mut_slice()[j * nu..(j + 1) * nu];
            for k in 0..nu {
                let s = params.dual_scaler.scale[k];
                let diff = col[k] - p.duals_star[k];
                mae_l += diff.abs() / s;
                dcol[k] += wl * sgn(diff) / s;
            }
        }
        mae_p /= nt as f64 * ctx.n_active.max(1) as f64;
        mae_l /= nt as f64 * nu.max(1) as f64;
    }

    let mut mae_eps = 0.0;
    if variant != Variant::Plain && nt + nc > 0 {
        let we = config.lambda_eps / (nt + nc) as f64;
        for j in 0..nt + nc {
            let pd: &[f64] = if j < nt { &labeled[j].pd } else { colloc[j - nt] };
            let pg_j = &pg.as_slice()[j * ng..(j + 1) * ng];
            let dpg_j = &mut d_pg.as_mut_slice()[j * ng..(j + 1) * ng];
            mae_eps += if variant == Variant::Kkt {
                let du_j = &du.as_slice()[j * nu..(j + 1) * nu];
                let ddu_j = &mut d_du.as_mut_slice()[j * nu..(j + 1) * nu];
                ctx.kkt_penalty(pd, pg_j, du_j, want_grad.then_some((dpg_j, ddu_j, we)))
            } else {
                ctx.generator_penalty(variant, pg_j, want_grad.then_some((dpg_j, we)))
            };
        }
        mae_eps /= (nt + nc) as f64;
    }

    let total = config.lambda_p * mae_p + config.lambda_l * mae_l + config.lambda_eps * mae_eps;
    let breakdown = LossBreakdown {
        total,
        mae_p,
        mae_l,
        mae_eps,
    };
    if !want_grad {
        return Ok((breakdown, None));
    }
    let scale_rows = |mut d: DMatrix<f64>, s: &super::AffineScaler| {
        for mut col in d.column_iter_mut() {
            for (r, v) in col.iter_mut().enumerate() {
                *v *= s.scale[r];
            }
        }
        d
    };
    let g_pg = params
        .pg_head
        .backward(&pg_acts, scale_rows(d_pg, &params.pg_scaler));
    let g_du = params
        .dual_head
        .backward(&du_acts, scale_rows(d_du, &params.dual_scaler));
    Ok((
        breakdown,
        Some(Gradient {
            pg_head: g_pg,
            dual_head: g_du,
        }),
    ))
}

fn as_refs<'a>(
    labeled: &'a [LabeledPoint],
    collocation: &'a [Vec<f64>],
) -> (Vec<&'a LabeledPoint>, Vec<&'a [f64]>) {
    (
        labeled.iter().collect(),
        collocation.iter().map(Vec::as_slice).collect(),
    )
}

/// `Λ_P·mae_p + Λ_L·mae_l + Λ_ε·mae_eps` on the given batches. Setpoint errors
/// are normalised by generator range, multiplier errors by the multiplier
/// scaler; the physics term is averaged over labelled and collocation points.
pub fn loss(
    params: &NetworkParams,
    labeled: &[LabeledPoint],
    collocation: &[Vec<f64>],
    case: &GridCase,
    ptdf: &PtdfMatrix,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let ctx = LossContext::new(case, ptdf);
    let (lab, col) = as_refs(labeled, collocation);
    Ok(loss_and_grad(params, &lab, &col, &ctx, config, false)?.0)
}

/// Exact gradient of [`loss`]; ReLU and absolute-value kinks take slope 0.
pub fn grad(
    params: &NetworkParams,
    labeled: &[LabeledPoint],
    collocation: &[Vec<f64>],
    case: &GridCase,
    ptdf: &PtdfMatrix,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Gradient)> {
    let ctx = LossContext::new(case, ptdf);
    let (lab, col) = as_refs(labeled, collocation);
    let (l, g) = loss_and_grad(params, &lab, &col, &ctx, config, true)?;
    Ok((l, g.expect("gradient requested")))
}

//! Big-M encodings of a ReLU head and of the inner OPF optimality conditions.

use crate::error::{dim_check, Result};
use crate::grid::{GridCase, PtdfMatrix};
use crate::lp::Relation;
use crate::pinn::{Head, NetworkParams};

use super::milp::{MilpModel, RelaxationBounds, VarId};

/// Pre-activation interval of every hidden neuron, plus the output layer,
/// in normalised units.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronBounds {
    pub hidden: Vec<Vec<(f64, f64)>>,
    pub output: Vec<(f64, f64)>,
}

impl NeuronBounds {
    pub fn n_unstable(&self) -> usize {
        self.hidden
            .iter()
            .flatten()
            .filter(|(lo, hi)| *lo < 0.0 && *hi > 0.0)
            .count()
    }
}

/// Interval propagation of `input_box` through `head`.
pub fn propagate_head_bounds(head: &Head, input_box: &[(f64, f64)]) -> Result<NeuronBounds> {
    dim_check("input box", head.input_dim(), input_box.len())?;
    let mut act: Vec<(f64, f64)> = input_box.to_vec();
    let mut hidden = Vec::new();
    let last = head.layers.len() - 1;
    for (k, layer) in head.layers.iter().enumerate() {
        let pre: Vec<(f64, f64)> = (0..layer.output_dim())
            .map(|r| {
                let mut lo = layer.biases[r];
                let mut hi = layer.biases[r];
                for (c, &(a_lo, a_hi)) in act.iter().enumerate() {
                    let w = layer.weights[(r, c)];
                    if w >= 0.0 {
                        lo += w * a_lo;
                        hi += w * a_hi;
                    } else {
                        lo += w * a_hi;
                        hi += w * a_lo;
                    }
                }
                (lo, hi)
            })
            .collect();
        if k == last {
            return Ok(NeuronBounds { hidden, output: pre });
        }
        act = pre.iter().map(|&(lo, hi)| (lo.max(0.0), hi.max(0.0))).collect();
        hidden.push(pre);
    }
    unreachable!("heads have at least one layer")
}

/// Bounds of the setpoint head over a normalised input box.
pub fn propagate_bounds(params: &NetworkParams, input_box: &[(f64, f64)]) -> Result<NeuronBounds> {
    propagate_head_bounds(&params.pg_head, input_box)
}

/// Bounds of the setpoint head over a box of demands in MW, tightened layer by
/// layer: each pre-activation is maximised and minimised over the LP
/// relaxation of the layers before it. Never looser than interval propagation.
pub fn tighten_bounds(params: &NetworkParams, domain: &[(f64, f64)]) -> Result<NeuronBounds> {
    let head = &params.pg_head;
    let mut bounds = propagate_bounds(params, &normalised_box(params, domain)?)?;
    let last = head.layers.len() - 1;
    for depth in 1..=last {
        let mut model = MilpModel::new();
        let pd: Vec<VarId> = domain
            .iter()
            .enumerate()
            .map(|(k, &(lo, hi))| model.add_continuous(format!("pd[{k}]"), lo, hi))
            .collect();
        let (_, inputs) = encode_hidden(params, &bounds, &mut model, &pd, depth)?;
        let mut oracle = RelaxationBounds::new(&model);
        let layer = &head.layers[depth];
        let mut tightened = Vec::with_capacity(layer.output_dim());
        for r in 0..layer.output_dim() {
            let (terms, constant) = affine(layer, r, &inputs);
            let (mut lo, mut hi) = if depth == last {
                bounds.output[r]
            } else {
                bounds.hidden[depth][r]
            };
            if terms.is_empty() {
                tightened.push((constant.max(lo).min(hi), constant.min(hi).max(lo)));
                continue;
            }
            let neg: Vec<(VarId, f64)> = terms.iter().map(|&(v, c)| (v, -c)).collect();
            if let Some(up) = oracle.maximise(&terms)? {
                let up = up + constant;
                hi = hi.min(up + TIGHTEN_MARGIN * (1.0 + up.abs()));
            }
            if let Some(down) = oracle.maximise(&neg)? {
                let down = constant - down;
                lo = lo.max(down - TIGHTEN_MARGIN * (1.0 + down.abs()));
            }
            tightened.push((lo.min(hi), hi.max(lo)));
        }
        if depth == last {
            bounds.output = tightened;
        } else {
            bounds.hidden[depth] = tightened;
            // Later layers restart from intervals over the tightened activations.
            let act: Vec<(f64, f64)> = bounds.hidden[depth]
                .iter()
                .map(|&(lo, hi)| (lo.max(0.0), hi.max(0.0)))
                .collect();
            let rest = Head {
                layers: head.layers[depth + 1..].to_vec(),
            };
            let tail = propagate_head_bounds(&rest, &act)?;
            for (k, b) in tail.hidden.into_iter().enumerate() {
                bounds.hidden[depth + 1 + k] = b;
            }
            bounds.output = tail.output;
        }
    }
    Ok(bounds)
}

/// Relative widening of LP-derived bounds against solver round-off.
const TIGHTEN_MARGIN: f64 = 1e-7;

/// Normalised image of a box of demands in MW.
pub fn normalised_box(params: &NetworkParams, domain: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    dim_check("demand domain", params.input_dim(), domain.len())?;
    let s = &params.input_scaler;
    Ok(domain
        .iter()
        .enumerate()
        .map(|(k, &(lo, hi))| {
            if s.scale[k] == 0.0 {
                (0.0, 0.0)
            } else {
                let a = (lo - s.offset[k]) / s.scale[k];
                let b = (hi - s.offset[k]) / s.scale[k];
                (a.min(b), a.max(b))
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronState {
    Active,
    Dead,
    Unstable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronEncoding {
    pub layer: usize,
    pub index: usize,
    pub state: NeuronState,
    /// Pre-activation variable (absent for dead neurons).
    pub pre: Option<VarId>,
    /// Post-activation variable; the pre-activation itself when active.
    pub post: Option<VarId>,
    pub binary: Option<VarId>,
    pub bounds: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkEncoding {
    /// Demands in MW.
    pub pd: Vec<VarId>,
    /// Predicted setpoints in MW.
    pub pg: Vec<VarId>,
    pub neurons: Vec<NeuronEncoding>,
}

/// Affine expression: terms plus constant.
pub(crate) type Expr = (Vec<(VarId, f64)>, f64);

/// Row `r` of `layer` applied to affine inputs.
pub(crate) fn affine(layer: &crate::pinn::Layer, r: usize, inputs: &[Expr]) -> Expr {
    let mut terms: Vec<(VarId, f64)> = Vec::new();
    let mut constant = layer.biases[r];
    for (c, (t, k)) in inputs.iter().enumerate() {
        let w = layer.weights[(r, c)];
        if w == 0.0 {
            continue;
        }
        constant += w * k;
        for &(v, a) in t {
            match terms.iter_mut().find(|(u, _)| *u == v) {
                Some(e) => e.1 += w * a,
                None => terms.push((v, w * a)),
            }
        }
    }
    (terms, constant)
}

/// Encodes the first `depth` hidden layers of the setpoint head and returns
/// their neurons with the affine inputs of layer `depth`.
pub(crate) fn encode_hidden(
    params: &NetworkParams,
    bounds: &NeuronBounds,
    model: &mut MilpModel,
    pd: &[VarId],
    depth: usize,
) -> Result<(Vec<NeuronEncoding>, Vec<Expr>)> {
    let head = &params.pg_head;
    dim_check("demand variables", params.input_dim(), pd.len())?;
    let s = &params.input_scaler;
    let mut inputs: Vec<Expr> = pd
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            if s.scale[k] == 0.0 {
                (Vec::new(), 0.0)
            } else {
                (vec![(v, 1.0 / s.scale[k])], -s.offset[k] / s.scale[k])
            }
        })
        .collect();

    let mut neurons = Vec::new();
    for (k, layer) in head.layers[..depth].iter().enumerate() {
        let mut next = Vec::with_capacity(layer.output_dim());
        for r in 0..layer.output_dim() {
            let (lo, hi) = bounds.hidden[k][r];
            let tag = format!("h{k}[{r}]");
            if hi <= 0.0 {
                neurons.push(NeuronEncoding {
                    layer: k,
                    index: r,
                    state: NeuronState::Dead,
                    pre: None,
                    post: None,
                    binary: None,
                    bounds: (lo, hi),
                });
                next.push((Vec::new(), 0.0));
                continue;
            }
            let (mut terms, constant) = affine(layer, r, &inputs);
            let pre = model.add_continuous(format!("{tag}.pre"), lo, hi);
            terms.push((pre, -1.0));
            model.add_constraint(format!("{tag}.def"), &terms, Relation::Eq, -constant);
            if lo >= 0.0 {
                neurons.push(NeuronEncoding {
                    layer: k,
                    index: r,
                    state: NeuronState::Active,
                    pre: Some(pre),
                    post: Some(pre),
                    binary: None,
                    bounds: (lo, hi),
                });
                next.push((vec![(pre, 1.0)], 0.0));
                continue;
            }
            let post = model.add_continuous(format!("{tag}.post"), 0.0, hi);
            let y = model.add_binary(format!("{tag}.on"));
            // z ≤ z' − lo·(1 − y)
            model.add_constraint(
                format!("{tag}.relu_a"),
                &[(post, 1.0), (pre, -1.0), (y, -lo)],
                Relation::Le,
                -lo,
            );
            // z ≥ z'
            model.add_constraint(format!("{tag}.relu_b"), &[(post, 1.0), (pre, -1.0)], Relation::Ge, 0.0);
            // z ≤ hi·y
            model.add_constraint(format!("{tag}.relu_c"), &[(post, 1.0), (y, -hi)], Relation::Le, 0.0);
            // z ≥ 0
            model.add_constraint(format!("{tag}.relu_d"), &[(post, 1.0)], Relation::Ge, 0.0);
            neurons.push(NeuronEncoding {
                layer: k,
                index: r,
                state: NeuronState::Unstable,
                pre: Some(pre),
                post: Some(post),
                binary: Some(y),
                bounds: (lo, hi),
            });
            next.push((vec![(post, 1.0)], 0.0));
        }
        inputs = next;
    }
    Ok((neurons, inputs))
}

/// Encodes the setpoint head with the demand variables `pd` (MW) as inputs.
/// Unstable neurons get one binary and four rows; stable ones none.
pub fn encode_network(
    params: &NetworkParams,
    bounds: &NeuronBounds,
    model: &mut MilpModel,
    pd: &[VarId],
) -> Result<NetworkEncoding> {
    let head = &params.pg_head;
    dim_check("bounded layers", head.layers.len() - 1, bounds.hidden.len())?;
    let last = head.layers.len() - 1;
    let (neurons, inputs) = encode_hidden(params, bounds, model, pd, last)?;

    let out_layer = &head.layers[last];
    let o = &params.pg_scaler;
    let mut pg = Vec::with_capacity(out_layer.output_dim());
    for r in 0..out_layer.output_dim() {
        let (terms, constant) = affine(out_layer, r, &inputs);
        let (lo, hi) = bounds.output[r];
        let (a, b) = (o.offset[r] + o.scale[r] * lo, o.offset[r] + o.scale[r] * hi);
        let v = model.add_continuous(format!("pg_hat[{r}]"), a.min(b), a.max(b));
        // pg = offset + scale·(w·a + b)
        let mut row: Vec<(VarId, f64)> = terms.iter().map(|&(u, c)| (u, -o.scale[r] * c)).collect();
        row.push((v, 1.0));
        model.add_constraint(
            format!("pg_hat[{r}].def"),
            &row,
            Relation::Eq,
            o.offset[r] + o.scale[r] * constant,
        );
        pg.push(v);
    }
    Ok(NetworkEncoding {
        pd: pd.to_vec(),
        pg,
        neurons,
    })
}

/// One complementarity pair `0 ≤ slack ⟂ μ ≥ 0`, linearised with binary `r`:
/// `slack ≤ r·m_primal`, `μ ≤ (1 − r)·m_dual`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementarityPair {
    pub name: String,
    /// Slack as an affine expression.
    pub slack: (Vec<(VarId, f64)>, f64),
    pub mu: VarId,
    pub r: VarId,
    pub m_primal: f64,
    pub m_dual: f64,
}

impl ComplementarityPair {
    pub fn slack_at(&self, x: &[f64]) -> f64 {
        self.slack.1 + self.slack.0.iter().map(|(v, c)| c * x[v.0]).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KktEncoding {
    /// Inner optimal setpoints, MW.
    pub pg: Vec<VarId>,
    pub lambda: VarId,
    pub pairs: Vec<ComplementarityPair>,
    pub m_dual: f64,
}

/// Big-M constants for the optimality-condition encoding: `(per-pair primal
/// constants in pair order, dual constant)`.
pub fn kkt_big_m(case: &GridCase, ptdf: &PtdfMatrix, domain: &[(f64, f64)]) -> (Vec<f64>, f64) {
    let costs = case.costs();
    let c_max = costs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let c_min = costs.iter().fold(f64::INFINITY, |m, c| m.min(*c));
    let spread = costs.iter().fold(0.0f64, |m, c| m.max(c - c_min));
    let m_dual = 10.0 * spread.max(c_max).max(1.0) * (1.0 + ptdf.max_row_norm());
    let width: f64 = domain.iter().map(|(lo, hi)| hi - lo).sum();
    let mut m = Vec::new();
    for g in &case.generators {
        m.push(2.0 * g.range().max(1e-6));
    }
    for g in &case.generators {
        m.push(2.0 * g.range().max(1e-6));
    }
    for _ in 0..2 {
        for l in &case.lines {
            m.push(2.0 * (2.0 * l.flow_limit + ptdf.max_abs() * width));
        }
    }
    (m, m_dual)
}

/// Adds primal feasibility, stationarity, dual feasibility and linearised
/// complementarity of the inner OPF at demands `pd`. Any feasible point has
/// `pg` optimal for that demand.
pub fn encode_opf_kkt(
    case: &GridCase,
    ptdf: &PtdfMatrix,
    model: &mut MilpModel,
    pd: &[VarId],
    domain: &[(f64, f64)],
    m_dual_scale: f64,
) -> Result<KktEncoding> {
    dim_check("demand variables", case.n_load(), pd.len())?;
    let (m_primal, m_dual) = kkt_big_m(case, ptdf, domain);
    let m_dual = m_dual * m_dual_scale;
    let ng = case.n_gen();
    let gen_ptdf = ptdf.generator_columns(case);
    let load_ptdf = ptdf.load_columns(case);

    let pg: Vec<VarId> = case
        .generators
        .iter()
        .enumerate()
        .map(|(i, g)| model.add_continuous(format!("pg[{i}]"), g.p_min, g.p_max))
        .collect();
    let lambda = model.add_continuous("lambda", -m_dual, m_dual);

    let mut balance: Vec<(VarId, f64)> = pg.iter().map(|&v| (v, 1.0)).collect();
    balance.extend(pd.iter().map(|&v| (v, -1.0)));
    model.add_constraint("balance", &balance, Relation::Eq, 0.0);

    // Flow of line l as an expression in pg and pd.
    let flow = |l: usize| -> Vec<(VarId, f64)> {
        let mut t: Vec<(VarId, f64)> = (0..ng)
            .filter(|&i| gen_ptdf[(l, i)] != 0.0)
            .map(|i| (pg[i], gen_ptdf[(l, i)]))
            .collect();
        t.extend(
            (0..pd.len())
                .filter(|&k| load_ptdf[(l, k)] != 0.0)
                .map(|k| (pd[k], -load_ptdf[(l, k)])),
        );
        t
    };

    let mut pairs = Vec::new();
    let mut add_pair = |model: &mut MilpModel, name: String, slack: (Vec<(VarId, f64)>, f64), mp: f64| {
        let mu = model.add_continuous(format!("mu_{name}"), 0.0, m_dual);
        let r = model.add_binary(format!("r_{name}"));
        // slack − r·Mp ≤ 0
        let mut row = slack.0.clone();
        row.push((r, -mp));
        model.add_constraint(format!("fa_primal_{name}"), &row, Relation::Le, -slack.1);
        // μ + r·Md ≤ Md
        model.add_constraint(format!("fa_dual_{name}"), &[(mu, 1.0), (r, m_dual)], Relation::Le, m_dual);
        pairs.push(ComplementarityPair {
            name,
            slack,
            mu,
            r,
            m_primal: mp,
            m_dual,
        });
        mu
    };

    let mut k = 0;
    let mut mu_g_up = Vec::with_capacity(ng);
    for (i, g) in case.generators.iter().enumerate() {
        mu_g_up.push(add_pair(model, format!("g_up[{i}]"), (vec![(pg[i], -1.0)], g.p_max), m_primal[k]));
        k += 1;
    }
    let mut mu_g_lo = Vec::with_capacity(ng);
    for (i, g) in case.generators.iter().enumerate() {
        mu_g_lo.push(add_pair(model, format!("g_lo[{i}]"), (vec![(pg[i], 1.0)], -g.p_min), m_primal[k]));
        k += 1;
    }
    let mut mu_l_up = Vec::new();
    for (l, line) in case.lines.iter().enumerate() {
        let t: Vec<(VarId, f64)> = flow(l).into_iter().map(|(v, c)| (v, -c)).collect();
        model.add_constraint(format!("flow_up[{l}]"), &flow(l), Relation::Le, line.flow_limit);
        mu_l_up.push(add_pair(model, format!("l_up[{l}]"), (t, line.flow_limit), m_primal[k]));
        k += 1;
    }
    let mut mu_l_lo = Vec::new();
    for (l, line) in case.lines.iter().enumerate() {
        let t = flow(l);
        let neg: Vec<(VarId, f64)> = t.iter().map(|&(v, c)| (v, -c)).collect();
        model.add_constraint(format!("flow_lo[{l}]"), &neg, Relation::Le, line.flow_limit);
        mu_l_lo.push(add_pair(model, format!("l_lo[{l}]"), (t, line.flow_limit), m_primal[k]));
        k += 1;
    }

    // c_i + λ + μ̄_g − μ_g + Σ_l PTDF(l, bus_i)(μ̄_l − μ_l) = 0
    for (i, g) in case.generators.iter().enumerate() {
        let mut row = vec![(lambda, 1.0), (mu_g_up[i], 1.0), (mu_g_lo[i], -1.0)];
        for l in 0..case.n_line() {
            let p = gen_ptdf[(l, i)];
            if p != 0.0 {
                row.push((mu_l_up[l], p));
                row.push((mu_l_lo[l], -p));
            }
        }
        model.add_constraint(format!("stationarity[{i}]"), &row, Relation::Eq, -g.cost);
    }

    Ok(KktEncoding {
        pg,
        lambda,
        pairs,
        m_dual,
    })
}

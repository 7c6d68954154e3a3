//! Reference computations for the integration tests. Nothing here calls the
//! crate's LP, PTDF or MILP code.
#![allow(dead_code)]

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use pinnopf::grid::{Generator, GridCase, Line, Load};
use pinnopf::pinn::{init_params, AffineScaler, Architecture, NetworkParams};

/// Random connected case: a spanning tree plus a few extra lines.
pub fn random_case(rng: &mut ChaCha8Rng, n_bus: usize) -> GridCase {
    let mut lines = Vec::new();
    for b in 1..n_bus {
        let parent = rng.gen_range(0..b);
        lines.push(random_line(rng, parent, b));
    }
    for _ in 0..rng.gen_range(0..=n_bus.saturating_sub(2)) {
        let a = rng.gen_range(0..n_bus);
        let b = rng.gen_range(0..n_bus);
        if a != b {
            lines.push(random_line(rng, a, b));
        }
    }
    let n_gen = rng.gen_range(1..=3.min(n_bus + 1));
    let generators: Vec<Generator> = (0..n_gen)
        .map(|_| {
            let p_min = rng.gen_range(0.0..20.0);
            Generator {
                bus: rng.gen_range(0..n_bus),
                p_min,
                p_max: p_min + rng.gen_range(60.0..200.0),
                cost: rng.gen_range(5.0..50.0),
            }
        })
        .collect();
    let n_load = rng.gen_range(1..=n_bus);
    let loads: Vec<Load> = (0..n_load)
        .map(|_| Load {
            bus: rng.gen_range(0..n_bus),
            p_max_nominal: rng.gen_range(20.0..100.0),
        })
        .collect();
    GridCase {
        name: format!("random{n_bus}"),
        n_bus,
        slack_bus: rng.gen_range(0..n_bus),
        base_mva: 100.0,
        generators,
        loads,
        lines,
    }
}

fn random_line(rng: &mut ChaCha8Rng, a: usize, b: usize) -> Line {
    Line {
        from_bus: a,
        to_bus: b,
        susceptance: 1.0 / rng.gen_range(0.05..0.5),
        flow_limit: rng.gen_range(30.0..150.0),
    }
}

/// Line flows of a balanced injection vector from the angle equations
/// `B θ = p` with the slack angle pinned at zero.
pub fn flows_from_angles(case: &GridCase, injections: &[f64]) -> Vec<f64> {
    let n = case.n_bus;
    let mut b = DMatrix::<f64>::zeros(n, n);
    for l in &case.lines {
        let (f, t, s) = (l.from_bus, l.to_bus, l.susceptance);
        b[(f, f)] += s;
        b[(t, t)] += s;
        b[(f, t)] -= s;
        b[(t, f)] -= s;
    }
    // Replace the slack equation by θ_slack = 0.
    let sl = case.slack_bus;
    for c in 0..n {
        b[(sl, c)] = 0.0;
    }
    b[(sl, sl)] = 1.0;
    let mut rhs = DVector::from_column_slice(injections);
    rhs[sl] = 0.0;
    let theta = b.lu().solve(&rhs).expect("connected network");
    case.lines
        .iter()
        .map(|l| l.susceptance * (theta[l.from_bus] - theta[l.to_bus]))
        .collect()
}

/// Flow sensitivity to a unit injection at each bus, withdrawn at the slack.
pub fn shift_factors(case: &GridCase) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(case.n_line(), case.n_bus);
    for bus in 0..case.n_bus {
        let mut inj = vec![0.0; case.n_bus];
        inj[bus] += 1.0;
        inj[case.slack_bus] -= 1.0;
        for (l, f) in flows_from_angles(case, &inj).into_iter().enumerate() {
            m[(l, bus)] = f;
        }
    }
    m
}

pub fn bus_injections(case: &GridCase, pg: &[f64], pd: &[f64]) -> Vec<f64> {
    let mut inj = vec![0.0; case.n_bus];
    for (g, p) in case.generators.iter().zip(pg) {
        inj[g.bus] += p;
    }
    for (d, p) in case.loads.iter().zip(pd) {
        inj[d.bus] -= p;
    }
    inj
}

/// Cheapest dispatch by enumerating every vertex of the feasible set: the
/// balance row plus `N_g − 1` tight inequalities. `None` when infeasible.
pub fn opf_by_vertex_enumeration(case: &GridCase, pd: &[f64]) -> Option<(f64, Vec<f64>)> {
    let ng = case.n_gen();
    let psi = shift_factors(case);
    // Inequalities a·pg ≤ b.
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for (i, g) in case.generators.iter().enumerate() {
        let mut a = vec![0.0; ng];
        a[i] = 1.0;
        rows.push((a.clone(), g.p_max));
        a[i] = -1.0;
        rows.push((a, -g.p_min));
    }
    for (l, line) in case.lines.iter().enumerate() {
        let a: Vec<f64> = case.generators.iter().map(|g| psi[(l, g.bus)]).collect();
        let base: f64 = case.loads.iter().zip(pd).map(|(d, p)| -psi[(l, d.bus)] * p).sum();
        rows.push((a.clone(), line.flow_limit - base));
        rows.push((a.iter().map(|v| -v).collect(), line.flow_limit + base));
    }
    let total: f64 = pd.iter().sum();
    let feasible = |x: &[f64]| {
        let bal: f64 = x.iter().sum();
        (bal - total).abs() <= 1e-7 * (1.0 + total.abs())
            && rows
                .iter()
                .all(|(a, b)| a.iter().zip(x).map(|(u, v)| u * v).sum::<f64>() <= b + 1e-7 * (1.0 + b.abs()))
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for combo in combinations(rows.len(), ng - 1) {
        let mut m = DMatrix::<f64>::zeros(ng, ng);
        let mut rhs = DVector::<f64>::zeros(ng);
        for j in 0..ng {
            m[(0, j)] = 1.0;
        }
        rhs[0] = total;
        for (k, &r) in combo.iter().enumerate() {
            for j in 0..ng {
                m[(k + 1, j)] = rows[r].0[j];
            }
            rhs[k + 1] = rows[r].1;
        }
        let lu = m.lu();
        if lu.determinant().abs() < 1e-10 {
            continue;
        }
        let Some(x) = lu.solve(&rhs) else { continue };
        let x: Vec<f64> = x.iter().copied().collect();
        if !feasible(&x) {
            continue;
        }
        let cost: f64 = case.generators.iter().zip(&x).map(|(g, p)| g.cost * p).sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, x));
        }
    }
    best
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Random setpoint network with physical scalers and non-zero biases, so that
/// some neurons switch inside the demand box and predictions leave the limits.
pub fn random_network(case: &GridCase, hidden: &[usize], rng: &mut ChaCha8Rng) -> NetworkParams {
    let arch = Architecture::for_case(case, hidden, &[4]);
    let mut p = init_params(&arch, rng.gen()).unwrap();
    for layer in &mut p.pg_head.layers {
        for b in layer.biases.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    let nominal: Vec<f64> = case.loads.iter().map(|l| l.p_max_nominal).collect();
    p.input_scaler = AffineScaler {
        offset: nominal.iter().map(|v| 0.6 * v).collect(),
        scale: nominal.iter().map(|v| 0.4 * v).collect(),
    };
    p.pg_scaler = AffineScaler {
        offset: case.generators.iter().map(|g| g.p_min).collect(),
        scale: case.generators.iter().map(|g| g.p_max - g.p_min).collect(),
    };
    p
}

/// Affine function `a·u + c` of the normalised input `u`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub a: Vec<f64>,
    pub c: f64,
}

impl Affine {
    fn zero(d: usize) -> Self {
        Affine { a: vec![0.0; d], c: 0.0 }
    }
}

/// Visits every activation region of the setpoint head over the unit box of
/// normalised inputs. For each non-empty region the callback receives the
/// region (rows `a·u ≤ c`) and the affine setpoint outputs in MW.
pub fn for_each_activation_region(params: &NetworkParams, mut visit: impl FnMut(&[Affine], &[Affine])) {
    let d = params.input_dim();
    let inputs: Vec<Affine> = (0..d)
        .map(|k| {
            let mut a = vec![0.0; d];
            a[k] = 1.0;
            Affine { a, c: 0.0 }
        })
        .collect();
    let mut region = Vec::new();
    descend(params, 0, 0, &inputs, &mut Vec::new(), &mut region, &mut visit);
}

fn descend(
    params: &NetworkParams,
    layer: usize,
    idx: usize,
    prev: &[Affine],
    cur: &mut Vec<Affine>,
    region: &mut Vec<Affine>,
    visit: &mut dyn FnMut(&[Affine], &[Affine]),
) {
    let layers = &params.pg_head.layers;
    let d = params.input_dim();
    let last = layers.len() - 1;
    if layer == last {
        let out: Vec<Affine> = (0..layers[last].output_dim())
            .map(|r| {
                let pre = apply_row(&layers[last], r, prev, d);
                let (o, s) = (params.pg_scaler.offset[r], params.pg_scaler.scale[r]);
                Affine {
                    a: pre.a.iter().map(|v| s * v).collect(),
                    c: o + s * pre.c,
                }
            })
            .collect();
        visit(region, &out);
        return;
    }
    if idx == layers[layer].output_dim() {
        let next = std::mem::take(cur);
        descend(params, layer + 1, 0, &next, &mut Vec::new(), region, visit);
        *cur = next;
        return;
    }
    let pre = apply_row(&layers[layer], idx, prev, d);
    // Active side: pre ≥ 0, written −pre ≤ 0.
    region.push(Affine {
        a: pre.a.iter().map(|v| -v).collect(),
        c: pre.c,
    });
    if region_is_nonempty(region, d) {
        cur.push(pre.clone());
        descend(params, layer, idx + 1, prev, cur, region, visit);
        cur.pop();
    }
    region.pop();
    // Inactive side: pre ≤ 0.
    region.push(Affine {
        a: pre.a.clone(),
        c: -pre.c,
    });
    if region_is_nonempty(region, d) {
        cur.push(Affine::zero(d));
        descend(params, layer, idx + 1, prev, cur, region, visit);
        cur.pop();
    }
    region.pop();
}

fn apply_row(layer: &pinnopf::pinn::Layer, r: usize, prev: &[Affine], d: usize) -> Affine {
    let mut out = Affine::zero(d);
    out.c = layer.biases[r];
    for (c, p) in prev.iter().enumerate() {
        let w = layer.weights[(r, c)];
        out.c += w * p.c;
        for (o, v) in out.a.iter_mut().zip(&p.a) {
            *o += w * v;
        }
    }
    out
}

fn region_problem(region: &[Affine], d: usize, objective: &[f64], dir: OptimizationDirection) -> (Problem, Vec<microlp::Variable>) {
    let mut p = Problem::new(dir);
    let vars: Vec<_> = (0..d).map(|k| p.add_var(objective[k], (0.0, 1.0))).collect();
    for row in region {
        let terms: Vec<_> = vars.iter().zip(&row.a).filter(|(_, c)| **c != 0.0).map(|(v, c)| (*v, *c)).collect();
        if terms.is_empty() {
            continue;
        }
        p.add_constraint(terms.as_slice(), ComparisonOp::Le, row.c);
    }
    (p, vars)
}

fn region_is_nonempty(region: &[Affine], d: usize) -> bool {
    // Constant rows decide themselves; the rest need an LP.
    for row in region {
        if row.a.iter().all(|v| *v == 0.0) && row.c < -1e-12 {
            return false;
        }
    }
    let (p, _) = region_problem(region, d, &vec![0.0; d], OptimizationDirection::Maximize);
    p.solve().is_ok()
}

/// Maximum of `f` over a region of the unit box; `None` if the region is empty.
pub fn maximise_over_region(region: &[Affine], f: &Affine, d: usize) -> Option<(f64, Vec<f64>)> {
    let (p, vars) = region_problem(region, d, &f.a, OptimizationDirection::Maximize);
    let sol = p.solve().ok()?.into_solution().ok()?;
    Some((sol.objective() + f.c, vars.iter().map(|v| sol.var_value(*v)).collect()))
}

/// Demands in MW from a normalised input.
pub fn physical_input(params: &NetworkParams, u: &[f64]) -> Vec<f64> {
    params.input_scaler.to_physical(u)
}

/// Worst generator-limit violation (clamped at 0) by exhaustive activation
/// regions.
pub fn enumerated_gen_violation(params: &NetworkParams, case: &GridCase) -> f64 {
    let d = params.input_dim();
    let mut best: f64 = 0.0;
    for_each_activation_region(params, |region, out| {
        for (i, g) in case.generators.iter().enumerate() {
            let above = Affine {
                a: out[i].a.clone(),
                c: out[i].c - g.p_max,
            };
            let below = Affine {
                a: out[i].a.iter().map(|v| -v).collect(),
                c: g.p_min - out[i].c,
            };
            for f in [above, below] {
                if let Some((v, _)) = maximise_over_region(region, &f, d) {
                    best = best.max(v);
                }
            }
        }
    });
    best
}

/// Worst line-limit violation (clamped at 0) by exhaustive activation regions,
/// with flows from the angle equations.
pub fn enumerated_line_violation(params: &NetworkParams, case: &GridCase) -> f64 {
    let d = params.input_dim();
    let psi = shift_factors(case);
    let s = &params.input_scaler;
    let mut best: f64 = 0.0;
    for_each_activation_region(params, |region, out| {
        for (l, line) in case.lines.iter().enumerate() {
            // flow = Σ_g ψ(l, bus_g)·pg − Σ_k ψ(l, bus_k)·(offset_k + scale_k·u_k)
            let mut flow = Affine::zero(d);
            for (i, g) in case.generators.iter().enumerate() {
                let w = psi[(l, g.bus)];
                flow.c += w * out[i].c;
                for (o, v) in flow.a.iter_mut().zip(&out[i].a) {
                    *o += w * v;
                }
            }
            for (k, load) in case.loads.iter().enumerate() {
                let w = psi[(l, load.bus)];
                flow.c -= w * s.offset[k];
                flow.a[k] -= w * s.scale[k];
            }
            let up = Affine {
                a: flow.a.clone(),
                c: flow.c - line.flow_limit,
            };
            let down = Affine {
                a: flow.a.iter().map(|v| -v).collect(),
                c: -flow.c - line.flow_limit,
            };
            for f in [up, down] {
                if let Some((v, _)) = maximise_over_region(region, &f, d) {
                    best = best.max(v);
                }
            }
        }
    });
    best
}

/// Generator violation of a dispatch, recomputed from the definitions.
pub fn gen_violation_of(case: &GridCase, pg: &[f64]) -> f64 {
    case.generators
        .iter()
        .zip(pg)
        .map(|(g, p)| (p - g.p_max).max(g.p_min - p))
        .fold(0.0, f64::max)
}

/// Line violation of a dispatch, with flows from the angle equations.
pub fn line_violation_of(case: &GridCase, pg: &[f64], pd: &[f64]) -> f64 {
    flows_from_angles(case, &bus_injections(case, pg, pd))
        .iter()
        .zip(&case.lines)
        .map(|(f, l)| f.abs() - l.flow_limit)
        .fold(0.0, f64::max)
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree.
    pub kinks: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

/// Central differences (step `h`) on `coords` random coordinates for each of
/// `draws` random parameter vectors of a small network on the three-bus case.
pub fn gradient_check(variant: pinnopf::pinn::Variant, draws: usize, coords: usize, seed: u64) -> GradCheck {
    use pinnopf::grid::{compute_ptdf, load_bundled};
    use pinnopf::pinn::{grad, loss, TrainConfig};
    use pinnopf::sampling::{build_dataset, Split};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    const H: f64 = 1e-5;
    let case = load_bundled("case3").unwrap();
    let ptdf = compute_ptdf(&case).unwrap();
    let split = Split {
        labeled_frac: 0.3,
        collocation_frac: 0.4,
    };
    let ds = build_dataset(&case, &ptdf, 40, split, seed).unwrap();
    let config = TrainConfig {
        variant,
        lambda_eps: 1.0,
        ..TrainConfig::default()
    };
    let arch = Architecture::for_case(&case, &[6, 6], &[8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::default();
    for d in 0..draws {
        let mut p = init_params(&arch, seed.wrapping_add(d as u64)).unwrap();
        p.fit_scalers(&case, &ds.labeled);
        let mut flat = p.to_flat();
        for v in flat.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        p.set_flat(&flat).unwrap();
        let (_, g) = grad(&p, &ds.labeled, &ds.collocation, &case, &ptdf, &config).unwrap();
        let g = g.to_flat();
        let f = |x: &[f64]| {
            let mut q = p.clone();
            q.set_flat(x).unwrap();
            loss(&q, &ds.labeled, &ds.collocation, &case, &ptdf, &config).unwrap().total
        };
        let f0 = f(&flat);
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.shuffle(&mut rng);
        let mut smooth = 0;
        for &k in &order {
            if smooth == coords {
                break;
            }
            let mut x = flat.clone();
            x[k] = flat[k] + H;
            let fp = f(&x);
            x[k] = flat[k] - H;
            let fm = f(&x);
            let (fwd, bwd) = ((fp - f0) / H, (f0 - fm) / H);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-7 {
                out.kinks += 1;
                continue;
            }
            smooth += 1;
            out.checked += 1;
            let num = (fp - fm) / (2.0 * H);
            let scale = num.abs().max(g[k].abs());
            let err = (num - g[k]).abs();
            if err > 1e-4 * scale + 1e-8 {
                out.failures += 1;
            }
            if scale > 1e-8 {
                out.worst_rel = out.worst_rel.max(err / scale);
            }
        }
    }
    out
}

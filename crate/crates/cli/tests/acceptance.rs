//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run everything with `cargo test --test acceptance`, or a subset by number:
//! `cargo test --test acceptance -- 2 7`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pinnopf::dcopf::{build_opf_lp, kkt_residuals, recover_duals_from_kkt, solve_dcopf, KktResiduals};
use pinnopf::grid::{compute_ptdf, load_bundled, GridCase, PtdfMatrix};
use pinnopf::pinn::{forward, train, Architecture, NetworkParams, TrainConfig, Variant};
use pinnopf::sampling::{build_dataset, input_domain, lhs_sample, stratum_of, Split};
use pinnopf::verifier::{
    solve_opf_by_kkt, worst_case_distance, worst_case_gen_violation, worst_case_line_violation,
    worst_case_suboptimality, MilpOptions, VerifyOptions, WorstCase, WorstCaseKind,
};
use pinnopf::Error;

use common::{
    enumerated_gen_violation, enumerated_line_violation, gen_violation_of, gradient_check, line_violation_of,
    opf_by_vertex_enumeration, random_case, random_network,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// A certified worst case together with what is needed to re-check it.
struct Certified {
    wc: WorstCase,
    net: NetworkParams,
    case: GridCase,
    ptdf: PtdfMatrix,
    domain: Vec<(f64, f64)>,
    origin: String,
}

#[derive(Default)]
struct Shared {
    certified: Vec<Certified>,
}

fn bundled(name: &str) -> (GridCase, PtdfMatrix) {
    let case = load_bundled(name).unwrap();
    let ptdf = compute_ptdf(&case).unwrap();
    (case, ptdf)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut feasible, mut infeasible, mut mismatches) = (0, 0, Vec::new());
    let mut worst_rel: f64 = 0.0;
    for c in 0..25 {
        let n_bus = rng.gen_range(2..=5);
        let case = random_case(&mut rng, n_bus);
        let ptdf = compute_ptdf(&case).unwrap();
        for _ in 0..20 {
            let pd: Vec<f64> = case
                .loads
                .iter()
                .map(|l| l.p_max_nominal * rng.gen_range(0.6..=1.0))
                .collect();
            match (solve_dcopf(&case, &ptdf, &pd), opf_by_vertex_enumeration(&case, &pd)) {
                (Ok(sol), Some((cost, _))) => {
                    feasible += 1;
                    let rel = (sol.objective - cost).abs() / cost.abs().max(1.0);
                    worst_rel = worst_rel.max(rel);
                    if rel > 1e-7 {
                        mismatches.push(format!("case {c}: {} vs {cost}", sol.objective));
                    }
                }
                (Err(Error::Infeasible(_)), None) => infeasible += 1,
                (a, b) => mismatches.push(format!(
                    "case {c}: solver {:?} vs enumeration {:?}",
                    a.map(|s| s.objective),
                    b.map(|b| b.0)
                )),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches.is_empty() && secs < 60.0,
        format!(
            "{feasible} feasible + {infeasible} infeasible instances agree, worst relative error {worst_rel:.2e}, \
             {} mismatches{}",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(" (first: {m})"))
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut worst = KktResiduals::default();
    let mut points = 0;
    for name in ["case3", "case5", "case39"] {
        let (case, ptdf) = bundled(name);
        for pd in lhs_sample(100, &input_domain(&case), 2).unwrap() {
            let opf = solve_dcopf(&case, &ptdf, &pd).unwrap();
            let rec = recover_duals_from_kkt(&case, &ptdf, &pd, &opf).unwrap();
            let r = kkt_residuals(&case, &ptdf, &pd, &opf.pg, &rec.duals).unwrap();
            worst.eps_stat = worst.eps_stat.max(r.eps_stat);
            worst.eps_comp = worst.eps_comp.max(r.eps_comp);
            worst.eps_dual = worst.eps_dual.max(r.eps_dual);
            worst.eps_prim = worst.eps_prim.max(r.eps_prim);
            points += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.max() <= 1e-6 && secs < 120.0,
        format!(
            "{points} points, max residuals stat {:.1e} comp {:.1e} dual {:.1e} prim {:.1e}",
            worst.eps_stat, worst.eps_comp, worst.eps_dual, worst.eps_prim
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let r = gradient_check(v, 10, 50, 3);
        pass &= r.failures == 0 && r.checked >= 500;
        parts.push(format!(
            "{v}: {} coords, {} kinks skipped, worst rel {:.1e}",
            r.checked, r.kinks, r.worst_rel
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 120.0, parts.join("; "))
}

fn criterion_4(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_diff: f64 = 0.0;
    let mut all_zero_gap = true;
    let (mut nets, mut nonzero, mut max_unstable) = (0, 0, 0);
    while nets < 10 {
        let n_bus = rng.gen_range(3..=5);
        let case = random_case(&mut rng, n_bus);
        let net = random_network(&case, &[6, 6], &mut rng);
        let ptdf = compute_ptdf(&case).unwrap();
        let domain = input_domain(&case);
        let opts = VerifyOptions::default();
        let g = worst_case_gen_violation(&net, &case, &domain, &opts).unwrap();
        let l = worst_case_line_violation(&net, &case, &ptdf, &domain, &opts).unwrap();
        let (eg, el) = (enumerated_gen_violation(&net, &case), enumerated_line_violation(&net, &case));
        worst_diff = worst_diff.max((g.value - eg).abs()).max((l.value - el).abs());
        all_zero_gap &= g.bound_gap == 0.0 && l.bound_gap == 0.0;
        nonzero += usize::from(g.value > 0.0) + usize::from(l.value > 0.0);
        max_unstable = max_unstable.max(g.unstable_neurons).max(l.unstable_neurons);
        for wc in [g, l] {
            shared.certified.push(Certified {
                wc,
                net: net.clone(),
                case: case.clone(),
                ptdf: ptdf.clone(),
                domain: domain.clone(),
                origin: format!("random network {nets}"),
            });
        }
        nets += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_diff <= 1e-6 && all_zero_gap && max_unstable <= 12 && secs < 600.0,
        format!(
            "{nets} networks (at most {max_unstable} unstable neurons), {nonzero}/20 non-zero worst cases, \
             max |MILP − enumeration| {worst_diff:.2e}, all gaps zero: {all_zero_gap}"
        ),
    )
}

/// The metric a worst case certifies, recomputed at one demand vector.
fn true_metric(c: &Certified, pd: &[f64]) -> f64 {
    let pg = forward(&c.net, pd).unwrap().pg;
    match c.wc.kind {
        WorstCaseKind::GenViolation => gen_violation_of(&c.case, &pg),
        WorstCaseKind::LineViolation => line_violation_of(&c.case, &pg, pd),
        WorstCaseKind::Distance => {
            let opf = solve_dcopf(&c.case, &c.ptdf, pd).unwrap();
            pg.iter()
                .zip(&opf.pg)
                .zip(&c.case.generators)
                .filter(|(_, g)| g.range() > 0.0)
                .map(|((a, b), g)| 100.0 * (a - b).abs() / g.range())
                .fold(0.0, f64::max)
        }
        WorstCaseKind::Suboptimality => {
            let opf = solve_dcopf(&c.case, &c.ptdf, pd).unwrap();
            let cost: f64 = c.case.generators.iter().zip(&pg).map(|(g, p)| g.cost * p).sum();
            (cost - opf.objective).max(0.0)
        }
    }
}

/// Certified number comparable with [`true_metric`].
fn certified_value(c: &Certified) -> f64 {
    match c.wc.kind {
        WorstCaseKind::Suboptimality => c.wc.absolute,
        _ => c.wc.value,
    }
}

fn criterion_5(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    if !shared.certified.iter().any(|c| c.origin.starts_with("random")) {
        criterion_4(shared);
    }
    // Bilevel metrics on a small case as well.
    let (case, ptdf) = bundled("case3");
    let domain = input_domain(&case);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = random_network(&case, &[5, 5], &mut rng);
    let opts = VerifyOptions::default();
    for wc in [
        worst_case_distance(&net, &case, &ptdf, &domain, &opts).unwrap(),
        worst_case_suboptimality(&net, &case, &ptdf, &domain, &opts).unwrap(),
    ] {
        shared.certified.push(Certified {
            wc,
            net: net.clone(),
            case: case.clone(),
            ptdf: ptdf.clone(),
            domain: domain.clone(),
            origin: "case3 bilevel".into(),
        });
    }

    let mut checked = 0;
    let mut failures = Vec::new();
    let mut tightest = f64::INFINITY;
    for (k, c) in shared.certified.iter().enumerate() {
        if c.wc.bound_gap != 0.0 {
            continue;
        }
        checked += 1;
        let samples = lhs_sample(10_000, &c.domain, 50 + k as u64).unwrap();
        let sampled = samples.iter().map(|pd| true_metric(c, pd)).fold(0.0, f64::max);
        let v = certified_value(c);
        tightest = tightest.min(v - sampled);
        if sampled > v + 1e-6 {
            failures.push(format!("{} {}: sampled {sampled} > {v}", c.origin, c.wc.kind));
        }
    }
    outcome(
        failures.is_empty() && checked > 0,
        format!(
            "{checked} zero-gap worst cases × 10000 samples, smallest margin {tightest:.3e}, {} violations{} ({:.0}s)",
            failures.len(),
            failures.first().map_or(String::new(), |f| format!(" (first: {f})")),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut worst_diff: f64 = 0.0;
    let mut invalid = 0;
    let mut points = 0;
    let mut max_nodes = 0;
    let mut runs: Vec<(&str, usize, bool)> = vec![("case39", 50, true)];
    runs.push(("case5", 20, false));
    runs.push(("case3", 20, false));
    for (name, n, heuristic) in runs {
        let (case, ptdf) = bundled(name);
        for pd in lhs_sample(n, &input_domain(&case), 6).unwrap() {
            let lp = solve_dcopf(&case, &ptdf, &pd).unwrap();
            let kkt = solve_opf_by_kkt(&case, &ptdf, &pd, &MilpOptions::default(), heuristic).unwrap();
            for (a, b) in kkt.pg.iter().zip(&lp.pg) {
                worst_diff = worst_diff.max((a - b).abs());
            }
            invalid += usize::from(!kkt.validity.passed());
            max_nodes = max_nodes.max(kkt.nodes);
            points += 1;
        }
    }
    outcome(
        worst_diff <= 1e-6 && invalid == 0,
        format!(
            "{points} fixed-demand solves (50 on case39), max |pg − pg*| {worst_diff:.2e} MW, \
             {invalid} validity failures, at most {max_nodes} nodes ({:.0}s)",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_7(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let (case, ptdf) = bundled("case39");
    let domain = input_domain(&case);
    let split = Split {
        labeled_frac: 0.2,
        collocation_frac: 0.5,
    };
    let mut reports = Vec::new();
    let mut best_ratio = f64::INFINITY;
    let mut all_certified = true;
    for seed in [7u64, 11, 13] {
        let ds = build_dataset(&case, &ptdf, 10_000, split, seed).unwrap();
        assert_eq!((ds.labeled.len(), ds.collocation.len()), (2000, 5000));
        let mut v_g = Vec::new();
        for variant in [Variant::Plain, Variant::PgAbs] {
            let config = TrainConfig {
                variant,
                seed,
                epochs: 5000,
                pg_hidden: vec![10, 10],
                ..TrainConfig::default()
            };
            let (params, _) = train(&ds, &case, &ptdf, &config).unwrap();
            let wc = worst_case_gen_violation(&params, &case, &domain, &VerifyOptions::default()).unwrap();
            all_certified &= wc.bound_gap == 0.0 && wc.valid;
            v_g.push(wc.value);
            shared.certified.push(Certified {
                wc,
                net: params,
                case: case.clone(),
                ptdf: ptdf.clone(),
                domain: domain.clone(),
                origin: format!("case39 {variant} seed {seed}"),
            });
        }
        let ratio = v_g[1] / v_g[0];
        reports.push(format!(
            "seed {seed}: plain {:.1} MW, pg_abs {:.1} MW, ratio {ratio:.3}",
            v_g[0], v_g[1]
        ));
        best_ratio = best_ratio.min(ratio);
        if seed == 7 && ratio <= 0.9 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        best_ratio <= 0.9 && all_certified && secs <= 3600.0,
        format!("{} ({:.0}s)", reports.join("; "), secs),
    )
}

fn criterion_8() -> Outcome {
    let case = load_bundled("case39").unwrap();
    let domain = input_domain(&case);
    let mut parts = Vec::new();
    let mut pass = domain.len() == 21;
    for n in [4usize, 100, 1000] {
        let pts = lhs_sample(n, &domain, 8).unwrap();
        let mut exact = true;
        for (k, &(lo, hi)) in domain.iter().enumerate() {
            let mut count = vec![0usize; n];
            for p in &pts {
                count[stratum_of(p[k], lo, hi, n)] += 1;
            }
            exact &= count.iter().all(|&c| c == 1);
        }
        pass &= exact && pts.len() == n;
        parts.push(format!("n={n}: {}", if exact { "one per stratum" } else { "uneven" }));
    }
    outcome(pass, format!("{} dimensions; {}", domain.len(), parts.join(", ")))
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_pinnopf");
    std::fs::write(
        dir.join("run.toml"),
        "case = \"case39\"\n[train]\npg_hidden = [10, 10]\nepochs = 2000\n[verify]\nobjectives = [\"gen\", \"line\"]\nnode_limit = 300\n",
    )
    .map_err(|e| e.to_string())?;
    let steps: [&[&str]; 5] = [
        &["dataset", "--config", "run.toml", "--seed", "9", "--n", "1000", "--out", "ds.txt"],
        &["train", "--config", "run.toml", "--seed", "9", "--dataset", "ds.txt", "--variant", "pg_abs", "--out", "m.txt"],
        &["evaluate", "--config", "run.toml", "--dataset", "ds.txt", "--model", "m.txt", "--out", "ev.json"],
        &["verify", "--config", "run.toml", "--model", "m.txt", "--out", "v.json"],
        &["report", "--input", "ev.json", "--input", "v.json", "--out", "rep"],
    ];
    for args in steps {
        let out = Command::new(bin)
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        let code = out.status.code().unwrap_or(-1);
        if code != 0 && !(args[0] == "verify" && code == 3) {
            return Err(format!("{} exited {code}: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let a = tempfile::TempDir::new().unwrap();
    let b = tempfile::TempDir::new().unwrap();
    if let Err(e) = run_pipeline(a.path()).and_then(|_| run_pipeline(b.path())) {
        return outcome(false, e);
    }
    let files = ["ds.txt", "m.txt", "ev.json", "v.json", "rep/report.json", "rep/report.md"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "case39 dataset/train/evaluate/verify/report twice: {} of {} outputs byte-identical ({:.0}s)",
            files.len() - differing.len(),
            files.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_10() -> Outcome {
    let (case, ptdf) = bundled("case39");
    let arch = Architecture::standard(&case);
    let pd: Vec<f64> = case.loads.iter().map(|l| l.p_max_nominal).collect();
    let lp = build_opf_lp(&case, &ptdf, &pd).unwrap();
    let got = [
        case.n_bus,
        case.n_load(),
        case.n_gen(),
        case.n_line(),
        arch.input_dim,
        arch.pg_output_dim,
        arch.dual_output_dim,
        lp.n_vars,
        lp.constraints.len(),
    ];
    let want = [39, 21, 10, 46, 21, 10, 1 + 2 * 10 + 2 * 46, 10, 1 + 2 * 46];
    let loading_ok = (case.max_loading().round() - 6254.0).abs() < 0.5;
    outcome(
        got == want && loading_ok,
        format!(
            "buses/loads/gens/lines {:?}, net {}→{}+{}, LP {} vars × {} rows, max loading {:.0} MW",
            &got[..4],
            got[4],
            got[5],
            got[6],
            got[7],
            got[8],
            case.max_loading()
        ),
    )
}

const NAMES: [&str; 10] = [
    "OPF oracle equivalence",
    "KKT zero residual",
    "gradient fidelity",
    "MILP verifier exactness",
    "soundness under sampling",
    "bilevel correctness",
    "directional worst-case reduction",
    "LHS stratification",
    "determinism",
    "structure counts",
];

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|n| (1..=10).contains(n))
        .collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut shared = Shared::default();
    let mut failed = 0;
    // Criterion 5 re-checks the worst cases certified by 4 and 7, so it runs last.
    for id in [1usize, 2, 3, 4, 6, 7, 8, 9, 10, 5] {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let o = match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(&mut shared),
            5 => criterion_5(&mut shared),
            6 => criterion_6(),
            7 => criterion_7(&mut shared),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => criterion_10(),
        };
        failed += usize::from(!o.pass);
        println!(
            "criterion {id:>2} {} {}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            NAMES[id - 1],
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

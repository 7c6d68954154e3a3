mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pinnopf::dcopf::solve_dcopf;
use pinnopf::grid::{compute_ptdf, load_bundled, GridCase};
use pinnopf::pinn::{forward, NetworkParams};
use pinnopf::sampling::{input_domain, lhs_sample};
use pinnopf::verifier::{
    normalised_box, propagate_bounds, resimulate, solve_opf_by_kkt, tighten_bounds, worst_case_distance,
    worst_case_gen_violation, worst_case_line_violation, worst_case_suboptimality, MilpOptions, VerifyOptions,
    WorstCase,
};

use common::{enumerated_gen_violation, enumerated_line_violation, gen_violation_of, line_violation_of, random_case, random_network};

fn hidden_pre_activations(params: &NetworkParams, pd: &[f64]) -> Vec<Vec<f64>> {
    let mut a = params.input_scaler.to_normalised(pd);
    let layers = &params.pg_head.layers;
    let mut out = Vec::new();
    for layer in &layers[..layers.len() - 1] {
        let z: Vec<f64> = (0..layer.output_dim())
            .map(|r| layer.biases[r] + (0..a.len()).map(|c| layer.weights[(r, c)] * a[c]).sum::<f64>())
            .collect();
        a = z.iter().map(|v| v.max(0.0)).collect();
        out.push(z);
    }
    out
}

fn small_setup(seed: u64) -> (GridCase, NetworkParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let case = random_case(&mut rng, 4);
        if case.n_load() >= 2 {
            let net = random_network(&case, &[5, 5], &mut rng);
            return (case, net);
        }
    }
}

#[test]
fn worst_cases_match_activation_region_enumeration() {
    for seed in [1u64, 2, 3] {
        let (case, net) = small_setup(seed);
        let ptdf = compute_ptdf(&case).unwrap();
        let domain = input_domain(&case);
        let opts = VerifyOptions::default();
        let g = worst_case_gen_violation(&net, &case, &domain, &opts).unwrap();
        let l = worst_case_line_violation(&net, &case, &ptdf, &domain, &opts).unwrap();
        assert_eq!(g.bound_gap, 0.0);
        assert_eq!(l.bound_gap, 0.0);
        let (eg, el) = (enumerated_gen_violation(&net, &case), enumerated_line_violation(&net, &case));
        assert!((g.value - eg).abs() <= 1e-6, "seed {seed}: gen {} vs {eg}", g.value);
        assert!((l.value - el).abs() <= 1e-6, "seed {seed}: line {} vs {el}", l.value);
    }
}

fn true_metric(wc: &WorstCase, net: &NetworkParams, case: &GridCase, pd: &[f64]) -> f64 {
    let pg = forward(net, pd).unwrap().pg;
    match wc.kind {
        pinnopf::verifier::WorstCaseKind::GenViolation => gen_violation_of(case, &pg),
        pinnopf::verifier::WorstCaseKind::LineViolation => line_violation_of(case, &pg, pd),
        _ => unreachable!(),
    }
}

#[test]
fn sampled_violations_never_exceed_certified_worst_cases() {
    for seed in [4u64, 5] {
        let (case, net) = small_setup(seed);
        let ptdf = compute_ptdf(&case).unwrap();
        let domain = input_domain(&case);
        let opts = VerifyOptions::default();
        let cases = [
            worst_case_gen_violation(&net, &case, &domain, &opts).unwrap(),
            worst_case_line_violation(&net, &case, &ptdf, &domain, &opts).unwrap(),
        ];
        let samples = lhs_sample(2000, &domain, seed).unwrap();
        for wc in &cases {
            assert_eq!(wc.bound_gap, 0.0);
            let worst = samples.iter().map(|pd| true_metric(wc, &net, &case, pd)).fold(0.0, f64::max);
            assert!(worst <= wc.value + 1e-6, "{}: sampled {worst} above {}", wc.kind, wc.value);
            // The reported maximiser attains the value.
            let at = resimulate(wc, &net, &case, &ptdf).unwrap();
            assert!((at - wc.value).abs() <= 1e-6 * (1.0 + wc.value));
        }
    }
}

#[test]
fn tightened_bounds_are_sound_and_no_looser_than_intervals() {
    let (case, net) = small_setup(6);
    let domain = input_domain(&case);
    let loose = propagate_bounds(&net, &normalised_box(&net, &domain).unwrap()).unwrap();
    let tight = tighten_bounds(&net, &domain).unwrap();
    assert!(tight.n_unstable() <= loose.n_unstable());
    for (lt, tt) in loose.hidden.iter().zip(&tight.hidden) {
        for (a, b) in lt.iter().zip(tt) {
            assert!(b.0 >= a.0 - 1e-9 && b.1 <= a.1 + 1e-9);
        }
    }
    for pd in lhs_sample(3000, &domain, 6).unwrap() {
        for (z, b) in hidden_pre_activations(&net, &pd).iter().zip(&tight.hidden) {
            for (v, (lo, hi)) in z.iter().zip(b) {
                assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
            }
        }
    }
}

#[test]
fn shrinking_the_domain_cannot_raise_a_worst_case() {
    let (case, net) = small_setup(7);
    let ptdf = compute_ptdf(&case).unwrap();
    let full = input_domain(&case);
    let inner: Vec<(f64, f64)> = full.iter().map(|(lo, hi)| (lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))).collect();
    let opts = VerifyOptions::default();
    let a = worst_case_line_violation(&net, &case, &ptdf, &full, &opts).unwrap();
    let b = worst_case_line_violation(&net, &case, &ptdf, &inner, &opts).unwrap();
    assert!(b.value <= a.value + 1e-6);
}

#[test]
fn fixed_demand_optimality_conditions_recover_the_lp_optimum() {
    let case = load_bundled("case5").unwrap();
    let ptdf = compute_ptdf(&case).unwrap();
    for (k, pd) in lhs_sample(15, &input_domain(&case), 8).unwrap().into_iter().enumerate() {
        let lp = solve_dcopf(&case, &ptdf, &pd).unwrap();
        let kkt = solve_opf_by_kkt(&case, &ptdf, &pd, &MilpOptions::default(), k % 2 == 0).unwrap();
        for (a, b) in kkt.pg.iter().zip(&lp.pg) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
        assert!(kkt.validity.passed(), "{:?}", kkt.validity);
    }
}

#[test]
fn distance_and_suboptimality_bound_sampled_values() {
    let case = load_bundled("case3").unwrap();
    let ptdf = compute_ptdf(&case).unwrap();
    let domain = input_domain(&case);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = random_network(&case, &[4, 4], &mut rng);
    let opts = VerifyOptions::default();
    let dist = worst_case_distance(&net, &case, &ptdf, &domain, &opts).unwrap();
    let sub = worst_case_suboptimality(&net, &case, &ptdf, &domain, &opts).unwrap();
    assert_eq!(dist.bound_gap, 0.0);
    assert_eq!(sub.bound_gap, 0.0);
    assert!(dist.valid && sub.valid);
    let mut worst_dist_pct: f64 = 0.0;
    let mut worst_abs_cost: f64 = 0.0;
    for pd in lhs_sample(2000, &domain, 9).unwrap() {
        let pg = forward(&net, &pd).unwrap().pg;
        let opf = solve_dcopf(&case, &ptdf, &pd).unwrap();
        let d = pg
            .iter()
            .zip(&opf.pg)
            .zip(&case.generators)
            .map(|((a, b), g)| 100.0 * (a - b).abs() / g.range())
            .fold(0.0, f64::max);
        worst_dist_pct = worst_dist_pct.max(d);
        let cost: f64 = case.generators.iter().zip(&pg).map(|(g, p)| g.cost * p).sum();
        worst_abs_cost = worst_abs_cost.max(cost - opf.objective);
    }
    assert!(worst_dist_pct <= dist.value + 1e-6, "{worst_dist_pct} > {}", dist.value);
    assert!(worst_abs_cost <= sub.absolute + 1e-6, "{worst_abs_cost} > {}", sub.absolute);
}

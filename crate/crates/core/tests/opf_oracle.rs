mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pinnopf::dcopf::{kkt_residuals, recover_duals_from_kkt, solve_dcopf, Duals};
use pinnopf::grid::{compute_ptdf, load_bundled};
use pinnopf::sampling::{input_domain, lhs_sample};
use pinnopf::Error;

use common::{bus_injections, flows_from_angles, opf_by_vertex_enumeration, random_case};

fn demand(rng: &mut ChaCha8Rng, case: &pinnopf::grid::GridCase) -> Vec<f64> {
    case.loads
        .iter()
        .map(|l| l.p_max_nominal * rng.gen_range(0.6..=1.0))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lp_optimum_matches_vertex_enumeration(seed in any::<u64>(), n_bus in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, n_bus);
        let ptdf = compute_ptdf(&case).unwrap();
        let pd = demand(&mut rng, &case);
        match (solve_dcopf(&case, &ptdf, &pd), opf_by_vertex_enumeration(&case, &pd)) {
            (Ok(sol), Some((cost, _))) => {
                prop_assert!((sol.objective - cost).abs() <= 1e-7 * cost.abs().max(1.0),
                    "solver {} vs enumeration {}", sol.objective, cost);
            }
            (Err(Error::Infeasible(_)), None) => {}
            (a, b) => prop_assert!(false, "solver {:?} disagrees with enumeration {:?}", a.map(|s| s.objective), b.map(|b| b.0)),
        }
    }

    #[test]
    fn shift_factor_flows_match_angle_equations(seed in any::<u64>(), n_bus in 2usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, n_bus);
        let ptdf = compute_ptdf(&case).unwrap();
        let mut inj: Vec<f64> = (0..n_bus).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let total: f64 = inj.iter().sum();
        inj[case.slack_bus] -= total;
        let a = ptdf.flows(&inj);
        let b = flows_from_angles(&case, &inj);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-8 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn optimum_respects_every_limit(seed in any::<u64>(), n_bus in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, n_bus);
        let ptdf = compute_ptdf(&case).unwrap();
        let pd = demand(&mut rng, &case);
        if let Ok(sol) = solve_dcopf(&case, &ptdf, &pd) {
            let total: f64 = pd.iter().sum();
            prop_assert!((sol.pg.iter().sum::<f64>() - total).abs() <= 1e-6 * (1.0 + total));
            for (g, p) in case.generators.iter().zip(&sol.pg) {
                prop_assert!(*p >= g.p_min - 1e-6 && *p <= g.p_max + 1e-6);
            }
            let flows = flows_from_angles(&case, &bus_injections(&case, &sol.pg, &pd));
            for (f, l) in flows.iter().zip(&case.lines) {
                prop_assert!(f.abs() <= l.flow_limit + 1e-6);
            }
        }
    }
}

#[test]
fn optimality_conditions_hold_at_the_optimum_of_bundled_cases() {
    for name in ["case3", "case5", "case39"] {
        let case = load_bundled(name).unwrap();
        let ptdf = compute_ptdf(&case).unwrap();
        for pd in lhs_sample(20, &input_domain(&case), 5).unwrap() {
            let opf = solve_dcopf(&case, &ptdf, &pd).unwrap();
            let rec = recover_duals_from_kkt(&case, &ptdf, &pd, &opf).unwrap();
            let r = kkt_residuals(&case, &ptdf, &pd, &opf.pg, &rec.duals).unwrap();
            assert!(r.max() <= 1e-6, "{name}: {r:?}");
        }
    }
}

#[test]
fn perturbed_multipliers_leave_a_residual() {
    let case = load_bundled("case5").unwrap();
    let ptdf = compute_ptdf(&case).unwrap();
    let pd: Vec<f64> = case.loads.iter().map(|l| 0.8 * l.p_max_nominal).collect();
    let opf = solve_dcopf(&case, &ptdf, &pd).unwrap();
    let mut d: Duals = recover_duals_from_kkt(&case, &ptdf, &pd, &opf).unwrap().duals;
    d.lambda += 1.0;
    let r = kkt_residuals(&case, &ptdf, &pd, &opf.pg, &d).unwrap();
    assert!(r.eps_stat > 1e-3);
}

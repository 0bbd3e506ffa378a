use pitplan::blockmodel::{generate_synthetic, instance_from_json, instance_to_json};
use pitplan::colgen::{run_dw, DwConfig};
use pitplan::evaluate::{check_feasible, Evaluator};
use pitplan::metaheuristic::{greedy_initialize, hybrid_optimize, HybridConfig};
use pitplan::rl::AgentSet;
use pitplan::saa::{branch_and_bound_exact, BnbLimits, BnbStatus};
use pitplan::scenario::sample_lognormal;
use pitplan::uncertainty::{UncertaintyFactors, UncertaintyParams};
use proptest::prelude::*;

#[test]
fn json_round_trip_preserves_optimum() {
    let inst = generate_synthetic(8, (2, 2, 2), 2, 2, 4).unwrap();
    let back = instance_from_json(&instance_to_json(&inst)).unwrap();
    assert_eq!(back, inst);
    let set = sample_lognormal(&inst, 3, 0.2, 1).unwrap();
    let set_back = sample_lognormal(&back, 3, 0.2, 1).unwrap();
    assert_eq!(set.digest(), set_back.digest());
    let a = branch_and_bound_exact(&inst, &set, None, &BnbLimits::default()).unwrap();
    let b = branch_and_bound_exact(&back, &set_back, None, &BnbLimits::default()).unwrap();
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
}

#[test]
fn optimizers_return_feasible_schedules_on_a_larger_pit() {
    let inst = generate_synthetic(64, (4, 4, 4), 3, 2, 9).unwrap();
    let set = sample_lognormal(&inst, 5, 0.3, 2).unwrap();
    let sigma = UncertaintyFactors::compute(&inst, &set.grades, &UncertaintyParams::default()).unwrap();
    let ev = Evaluator::new(&inst, &set, Some(&sigma)).unwrap();
    let greedy = greedy_initialize(&inst, &set, Some(&sigma), 0);
    assert!(check_feasible(&inst, &greedy).feasible);
    let g = ev.npv(&greedy).unwrap();

    let mut agents = AgentSet::new(3).unwrap();
    let cfg = HybridConfig { population: 30, max_iters: 20, seed: 1, ..Default::default() };
    let hy = hybrid_optimize(&inst, &set, Some(&sigma), &cfg, Some(&mut agents)).unwrap();
    assert!(check_feasible(&inst, &hy.schedule).feasible);
    assert!((ev.npv(&hy.schedule).unwrap() - hy.npv).abs() <= 1e-9 * hy.npv.abs().max(1.0));
    assert!(hy.npv >= g - 1e-9 * g.abs().max(1.0));

    let dw = run_dw(&inst, &set, Some(&sigma), &DwConfig { seed: 1, ..Default::default() }, None, None).unwrap();
    assert!(check_feasible(&inst, &dw.schedule).feasible);
    assert!(dw.npv <= dw.lp_value + 1e-7 * dw.lp_value.abs().max(1.0));
}

#[test]
fn higher_price_never_lowers_the_exact_optimum() {
    for seed in 0..6 {
        let inst = generate_synthetic(6, (3, 2, 1), 2, 1, seed).unwrap();
        let set = sample_lognormal(&inst, 2, 0.2, seed).unwrap();
        let rich = inst.with_price_scale(1.2).unwrap();
        let rich_set = sample_lognormal(&rich, 2, 0.2, seed).unwrap();
        let base = branch_and_bound_exact(&inst, &set, None, &BnbLimits::default()).unwrap();
        let up = branch_and_bound_exact(&rich, &rich_set, None, &BnbLimits::default()).unwrap();
        assert_eq!(base.status, BnbStatus::Optimal);
        assert!(up.objective >= base.objective - 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn heuristics_never_beat_the_exact_optimum(seed in 0u64..10_000) {
        let inst = generate_synthetic(6, (3, 1, 2), 2, 2, seed).unwrap();
        let set = sample_lognormal(&inst, 2, 0.3, seed).unwrap();
        let exact = branch_and_bound_exact(&inst, &set, None, &BnbLimits::default()).unwrap();
        let tol = 1e-7 * exact.objective.abs().max(1.0);
        let hy = hybrid_optimize(&inst, &set, None, &HybridConfig { population: 12, max_iters: 8, seed, ..Default::default() }, None).unwrap();
        prop_assert!(hy.npv <= exact.objective + tol);
        let dw = run_dw(&inst, &set, None, &DwConfig { seed, ..Default::default() }, None, None).unwrap();
        prop_assert!(dw.npv <= exact.objective + tol);
    }

    #[test]
    fn scenario_sets_nest_by_size(seed in 0u64..10_000, small in 1usize..6, extra in 0usize..6) {
        let inst = generate_synthetic(8, (2, 2, 2), 2, 1, seed % 50).unwrap();
        let a = sample_lognormal(&inst, small, 0.25, seed).unwrap();
        let b = sample_lognormal(&inst, small + extra, 0.25, seed).unwrap();
        prop_assert_eq!(&a.grades[..], &b.grades[..small]);
    }
}

//! Invariants of the solvers and the price-system construction on random
//! binomial and trinomial trees.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadowtree_core::friction::{check_admissible, expected_utility, random_admissible_plan, solve_primal};
use shadowtree_core::frictionless::{dominance_check, PriceAssignment};
use shadowtree_core::market::{build_binomial, build_lattice};
use shadowtree_core::shadow::{
    check_cps, construct_marginal_cps, duality_upper_bound, kkt_cps, verify_shadow, Sequential, Tolerances,
    VerifyOptions,
};
use shadowtree_core::{EndowmentSpec, ScenarioTree, SolverOptions, UtilitySpec};

struct Case {
    tree: ScenarioTree,
    endow: EndowmentSpec,
    utility: UtilitySpec,
}

fn case(seed: u64, max_steps: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = [0.01, 0.05, 0.2][rng.gen_range(0..3)];
    let steps = rng.gen_range(1..=max_steps);
    let up = rng.gen_range(1.05..1.5);
    let down = rng.gen_range(0.6..0.95);
    let tree = if rng.gen_bool(0.5) {
        let pu = rng.gen_range(0.2..0.45);
        let pm = rng.gen_range(0.1..0.3);
        build_lattice(1.0, &[up, 1.0, down], &[pu, pm, 1.0 - pu - pm], &['u', 'm', 'd'], steps, lambda).unwrap()
    } else {
        build_binomial(1.0, up, down, rng.gen_range(0.3..0.7), steps, lambda).unwrap()
    };
    let utility = if rng.gen_bool(0.5) { UtilitySpec::Log } else { UtilitySpec::power(0.5).unwrap() };
    let x = [0.5, 1.0, 2.0][rng.gen_range(0..3)];
    let leaves: Vec<(String, f64)> = tree.leaves().map(|l| (tree.node(l).id.clone(), rng.gen_range(0.0..1.0))).collect();
    let endow = EndowmentSpec::new(&tree, x, leaves).unwrap();
    Case { tree, endow, utility }
}

fn value(c: &Case, tree: &ScenarioTree, endow: &EndowmentSpec) -> f64 {
    let r = solve_primal(tree, &c.utility, endow, &SolverOptions::default()).unwrap();
    assert!(r.converged);
    r.value
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_and_spread(seed in any::<u64>()) {
        let c = case(seed, 4);
        let total: f64 = c.tree.leaves().map(|l| c.tree.path_probability(l)).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for n in 0..c.tree.len() {
            prop_assert!(c.tree.bid(n) < c.tree.ask(n));
        }
    }

    #[test]
    fn optimum_is_admissible_and_beats_random_plans(seed in any::<u64>()) {
        let c = case(seed, 3);
        let r = solve_primal(&c.tree, &c.utility, &c.endow, &SolverOptions::default()).unwrap();
        prop_assert!(r.converged);
        prop_assert!(check_admissible(&c.tree, &r.plan, &c.endow, 1e-9).is_empty());
        let direct = expected_utility(&c.tree, &c.utility, &c.endow, &r.plan);
        prop_assert!((direct - r.value).abs() <= 1e-12 * (1.0 + r.value.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..20 {
            let plan = random_admissible_plan(&c.tree, c.endow.x, &mut rng);
            prop_assert!(expected_utility(&c.tree, &c.utility, &c.endow, &plan) <= r.value + 1e-8);
        }
    }

    #[test]
    fn concave_in_wealth_and_decreasing_in_cost(seed in any::<u64>()) {
        let c = case(seed, 3);
        let x = c.endow.x;
        let lo = value(&c, &c.tree, &c.endow.with_x(0.5 * x).unwrap());
        let hi = value(&c, &c.tree, &c.endow.with_x(1.5 * x).unwrap());
        let mid = value(&c, &c.tree, &c.endow);
        prop_assert!(mid >= 0.5 * (lo + hi) - 1e-9);
        let dearer = c.tree.with_lambda((2.0 * c.tree.lambda()).min(0.9)).unwrap();
        prop_assert!(value(&c, &dearer, &c.endow) <= mid + 1e-10);
    }

    #[test]
    fn prices_inside_the_spread_dominate(seed in any::<u64>()) {
        let c = case(seed, 2);
        let u = value(&c, &c.tree, &c.endow);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let prices = PriceAssignment::random_in_spread(&c.tree, &mut rng);
            let d = dominance_check(&c.tree, &c.utility, &c.endow, &prices, u, &SolverOptions::default()).unwrap();
            prop_assert!(d.dominates, "gap {}", d.gap);
        }
    }

    #[test]
    fn constructed_pairs_are_shadow_prices(seed in any::<u64>()) {
        let c = case(seed, 3);
        let opts = SolverOptions::default();
        let r = solve_primal(&c.tree, &c.utility, &c.endow, &opts).unwrap();
        let tol = Tolerances::default();
        let fd = construct_marginal_cps(&c.tree, &c.utility, &c.endow, &r, 1e-5, &opts, &Sequential).unwrap();
        prop_assert!(check_cps(&c.tree, &fd).passes(&tol));
        let kkt = kkt_cps(&c.tree, &c.utility, &c.endow, &r).unwrap();
        prop_assert!(check_cps(&c.tree, &kkt).passes(&tol));
        let bound = duality_upper_bound(&c.tree, &c.utility, &c.endow, &fd).unwrap();
        prop_assert!(bound >= r.value - 1e-8);
        let options = VerifyOptions { seed, random_plans: 10, ..VerifyOptions::default() };
        let v = verify_shadow(&c.tree, &c.utility, &c.endow, &r.plan, &fd, &options, &Sequential).unwrap();
        let failed: Vec<_> = v.failures().map(|f| f.name).collect();
        prop_assert!(v.passed(), "failed checks {:?}", failed);
    }
}

/// Trees whose optimum sits on several trade boundaries at once.
#[test]
fn degenerate_vertices() {
    let opts = SolverOptions::default();
    for seed in [17268829445755444046, 5017123978628512048, 4669555176709286715] {
        let c = case(seed, 3);
        let r = solve_primal(&c.tree, &c.utility, &c.endow, &opts).unwrap();
        assert!(r.converged, "seed {seed}");
        let fd = construct_marginal_cps(&c.tree, &c.utility, &c.endow, &r, 1e-5, &opts, &Sequential).unwrap();
        assert!(check_cps(&c.tree, &fd).passes(&Tolerances::default()), "seed {seed}");
        let options = VerifyOptions { seed, ..VerifyOptions::default() };
        assert!(verify_shadow(&c.tree, &c.utility, &c.endow, &r.plan, &fd, &options, &Sequential).unwrap().passed());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prices = PriceAssignment::random_in_spread(&c.tree, &mut rng);
        assert!(dominance_check(&c.tree, &c.utility, &c.endow, &prices, r.value, &opts).unwrap().dominates);
    }
}

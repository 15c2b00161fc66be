//! End-to-end steps shared by the command line and the tests.

use serde_json::{json, Value};
use shadowtree_core::bs::{
    estimate_utilities, maximality_probe, sample_path, sandwich_check, BsParams, PathEnsemble, Strategy,
};
use shadowtree_core::friction::{solve_primal, SolveReport};
use shadowtree_core::shadow::{
    check_cps, construct_marginal_cps, kkt_cps, verify_shadow, BatchRunner, CpsMethod, CpsPair, VerificationReport,
    VerifyOptions,
};
use shadowtree_core::{EndowmentSpec, Result, ScenarioTree, SolverOptions, UtilitySpec};

use crate::formats::num;
use crate::report;

/// A market, an endowment and a utility.
pub struct Problem {
    pub tree: ScenarioTree,
    pub endow: EndowmentSpec,
    pub utility: UtilitySpec,
}

impl Problem {
    pub fn solve(&self, opts: &SolverOptions) -> Result<SolveReport> {
        solve_primal(&self.tree, &self.utility, &self.endow, opts)
    }

    /// The candidate pair without checking its invariants.
    pub fn cps<R: BatchRunner>(
        &self,
        report: &SolveReport,
        method: CpsMethod,
        eps: f64,
        opts: &SolverOptions,
        runner: &R,
    ) -> Result<CpsPair> {
        match method {
            CpsMethod::KktMultiplier => kkt_cps(&self.tree, &self.utility, &self.endow, report),
            _ => construct_marginal_cps(&self.tree, &self.utility, &self.endow, report, eps, opts, runner),
        }
    }

    pub fn verify<R: BatchRunner>(
        &self,
        report: &SolveReport,
        cps: &CpsPair,
        options: &VerifyOptions,
        runner: &R,
    ) -> Result<VerificationReport> {
        verify_shadow(&self.tree, &self.utility, &self.endow, &report.plan, cps, options, runner)
    }
}

/// Largest relative difference of the implied prices of two pairs over the
/// nodes where the plan trades more than `tol`, and how many nodes that is.
pub fn method_disagreement(tree: &ScenarioTree, report: &SolveReport, a: &CpsPair, b: &CpsPair, tol: f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for n in 0..tree.len() {
        if report.plan.buy[n] > tol || report.plan.sell[n] > tol {
            let (p, q) = (a.implied_price(n), b.implied_price(n));
            worst = worst.max((p - q).abs() / q.abs());
            count += 1;
        }
    }
    (worst, count)
}

/// Relative tolerance for the two CPS constructions at trading nodes.
pub const METHOD_AGREEMENT: f64 = 1e-4;

/// Solve, construct the pair, verify, and aggregate everything in one
/// report. The second return value tells whether every check passed.
pub fn run_pipeline<R: BatchRunner>(
    problem: &Problem,
    method: CpsMethod,
    eps: f64,
    options: &VerifyOptions,
    runner: &R,
) -> Result<(Value, CpsPair, bool)> {
    let solved = problem.solve(&options.solver)?;
    if !solved.converged {
        return Err(shadowtree_core::Error::NotConverged { iterations: solved.iterations, residual: solved.kkt_residual });
    }
    let cps = problem.cps(&solved, method, eps, &options.solver, runner)?;
    let verification = problem.verify(&solved, &cps, options, runner)?;

    // The other construction, recorded for comparison at trading nodes.
    let other = match method {
        CpsMethod::KktMultiplier => problem.cps(&solved, CpsMethod::FiniteDifference, eps, &options.solver, runner),
        _ => problem.cps(&solved, CpsMethod::KktMultiplier, eps, &options.solver, runner),
    };
    let comparison = match &other {
        Ok(o) => {
            let (worst, nodes) = method_disagreement(&problem.tree, &solved, &cps, o, options.tolerances.trade_location);
            json!({
                "max_relative_difference": num(worst),
                "trading_nodes": nodes,
                "flagged": worst > METHOD_AGREEMENT,
            })
        }
        Err(e) => json!({"error": e.to_string()}),
    };

    let passed = verification.passed();
    let mut out = report::verification(&cps, &verification, options);
    out["kind"] = json!("pipeline");
    out["solve"] = report::solve("solve", &problem.tree, &solved, &options.solver);
    out["solve"].as_object_mut().expect("object").remove("schema");
    out["cps_values"] = report::cps(&problem.tree, &cps);
    out["method_comparison"] = comparison;
    Ok((out, cps, passed))
}

/// Report for a pair alone: positivity, sandwich and supermartingale.
pub fn cps_check_report(tree: &ScenarioTree, cps: &CpsPair, tol: &shadowtree_core::shadow::Tolerances) -> (Value, bool) {
    let c = check_cps(tree, cps);
    let passed = c.passes(tol);
    let mut doc = report::cps(tree, cps);
    doc["check"] = json!({
        "passed": passed,
        "min_z": num(c.min_z),
        "sandwich": {"worst": num(c.sandwich.value), "node": c.sandwich.node, "threshold": num(tol.sandwich)},
        "supermartingale": {
            "worst": num(c.supermartingale.value),
            "node": c.supermartingale.node,
            "threshold": num(tol.supermartingale),
        },
    });
    (doc, passed)
}

/// Paths sampled through the runner; identical to the sequential sampler.
pub fn simulate_paths<R: BatchRunner>(params: &BsParams, runner: &R) -> PathEnsemble {
    let times = params.times();
    let samples = runner.map(params.n_paths, |i| sample_path(params, &times, i));
    PathEnsemble::from_samples(params, samples)
}

/// The Black–Scholes harness: sandwich, utilities and one probe per strategy.
/// Buy-hold-sell and the default catalog always run; `extra` adds more.
pub fn run_bs_example<R: BatchRunner>(params: &BsParams, extra: &[Strategy], runner: &R) -> Result<(Value, bool)> {
    let ensemble = simulate_paths(params, runner);
    let sandwich = sandwich_check(&ensemble, params);
    let utilities = estimate_utilities(&ensemble, params, &UtilitySpec::Log)?;
    let mut strategies: Vec<Strategy> = std::iter::once(Strategy::BuyHoldSell).chain(Strategy::catalog(params)).collect();
    for s in extra {
        if !strategies.contains(s) {
            strategies.push(*s);
        }
    }
    let probes = strategies
        .iter()
        .map(|s| maximality_probe(&ensemble, params, s))
        .collect::<Result<Vec<_>>>()?;
    let out = report::bs_example(&report::BsOutcome {
        params,
        sandwich: &sandwich,
        utilities: &utilities,
        probes: &probes,
    });
    let passed = out["passed"].as_bool().unwrap_or(false);
    Ok((out, passed))
}

//! Machine-readable reports and the text summary derived from them.

use std::fmt::Write as _;

use serde_json::{json, Map, Value};
use shadowtree_core::bs::{BsParams, ProbeReport, SandwichReport, UtilityReport};
use shadowtree_core::friction::{SolveReport, TradePlan};
use shadowtree_core::shadow::{CpsPair, Tolerances, VerificationReport, VerifyOptions};
use shadowtree_core::{ScenarioTree, SolverOptions};

use crate::formats::{method_name, num, number_of, CpsDoc, PlanDoc, SCHEMA};

pub fn solver_options(o: &SolverOptions) -> Value {
    json!({
        "mu_initial": num(o.mu_initial),
        "mu_factor": num(o.mu_factor),
        "mu_final": num(o.mu_final),
        "inner_tolerance": num(o.inner_tolerance),
        "max_newton_steps": o.max_newton_steps,
        "kkt_threshold": num(o.kkt_threshold),
        "feasibility_tolerance": num(o.feasibility_tolerance),
        "polish": o.polish,
        "max_variables": o.max_variables,
    })
}

pub fn tolerances(t: &Tolerances) -> Value {
    json!({
        "sandwich": num(t.sandwich),
        "supermartingale": num(t.supermartingale),
        "optimality": num(t.optimality),
        "gap": num(t.gap),
        "gap_floor": num(t.gap_floor),
        "duality": num(t.duality),
        "trade_location": num(t.trade_location),
        "dp_martingale": num(t.dp_martingale),
        "deflated_wealth": num(t.deflated_wealth),
    })
}

fn plan(tree: &ScenarioTree, plan: &TradePlan) -> Value {
    serde_json::to_value(PlanDoc::from_plan(tree, plan)).expect("plan serializes")
}

fn check_list<'a>(checks: impl IntoIterator<Item = (&'a str, f64, f64, bool)>) -> Value {
    Value::Array(
        checks
            .into_iter()
            .map(|(name, value, threshold, pass)| {
                json!({"name": name, "value": num(value), "threshold": num(threshold), "pass": pass})
            })
            .collect(),
    )
}

/// Frictional or frictionless solve.
pub fn solve(kind: &str, tree: &ScenarioTree, report: &SolveReport, opts: &SolverOptions) -> Value {
    json!({
        "schema": SCHEMA,
        "kind": kind,
        "value": num(report.value),
        "kkt_residual": num(report.kkt_residual),
        "iterations": report.iterations,
        "converged": report.converged,
        "plan": plan(tree, &report.plan),
        "solver": solver_options(opts),
    })
}

pub fn cps(tree: &ScenarioTree, cps: &CpsPair) -> Value {
    serde_json::to_value(CpsDoc::from_cps(tree, cps)).expect("cps serializes")
}

pub fn verification(cps_pair: &CpsPair, v: &VerificationReport, options: &VerifyOptions) -> Value {
    let trade_location: Vec<Value> = v
        .trade_location
        .iter()
        .map(|t| {
            json!({
                "node": t.node,
                "side": format!("{:?}", t.side).to_lowercase(),
                "quantity": num(t.quantity),
                "implied_price": num(t.implied_price),
                "required": num(t.required),
            })
        })
        .collect();
    json!({
        "schema": SCHEMA,
        "kind": "verification",
        "passed": v.passed(),
        "values": {
            "u": num(v.frictional_value),
            "u_z": num(v.frictionless_value),
            "gap": num(v.gap),
            "dual_bound": num(v.dual_bound),
        },
        "cps": {
            "method": method_name(cps_pair.method),
            "epsilon_used": num(cps_pair.epsilon_used),
            "min_z": num(v.cps.min_z),
            "sandwich": {"worst": num(v.cps.sandwich.value), "node": v.cps.sandwich.node},
            "supermartingale": {"worst": num(v.cps.supermartingale.value), "node": v.cps.supermartingale.node},
        },
        "optimality": {"r1": num(v.optimality.r1), "r2": num(v.optimality.r2), "scale": num(v.optimality.scale)},
        "trade_location": trade_location,
        "dp_martingale": {"residual": num(v.dp.residual), "node": v.dp.node},
        "deflated_wealth": {
            "excess": num(v.deflated_wealth.excess),
            "min_value": num(v.deflated_wealth.min_value),
            "random_plans": options.random_plans,
        },
        "checks": check_list(v.checks.iter().map(|c| (c.name, c.value, c.threshold, c.pass))),
        "tolerances": tolerances(&options.tolerances),
        "seed": options.seed,
        "solver": solver_options(&options.solver),
    })
}

/// Result of the Black–Scholes harness with the expectation for each probe.
pub struct BsOutcome<'a> {
    pub params: &'a BsParams,
    pub sandwich: &'a SandwichReport,
    pub utilities: &'a UtilityReport,
    pub probes: &'a [ProbeReport],
}

/// Largest `|z|` accepted for the Monte Carlo estimate.
pub const Z_LIMIT: f64 = 4.0;

pub fn bs_example(o: &BsOutcome<'_>) -> Value {
    let u = o.utilities;
    let estimate = |e: &shadowtree_core::bs::Estimate| {
        json!({"mean": num(e.mean), "standard_error": num(e.standard_error), "n": e.n})
    };
    let mut checks = vec![
        ("sandwich_violations", o.sandwich.violations as f64, 0.0, o.sandwich.holds),
        ("wealth_difference", u.max_wealth_difference, 0.0, u.max_wealth_difference == 0.0),
        ("closed_form_z", u.z_score.abs(), Z_LIMIT, u.z_score.abs() <= Z_LIMIT),
    ];
    let names: Vec<String> = o.probes.iter().map(|p| format!("probe:{}", p.strategy)).collect();
    let mut probes = Vec::new();
    for (p, name) in o.probes.iter().zip(&names) {
        let expect_witness = !p.strategy.replicates_buy_hold_sell();
        probes.push(json!({
            "strategy": p.strategy.to_string(),
            "witnesses": p.witnesses,
            "probability": num(p.probability),
            "witness_paths": p.witness_paths,
            "expected_utility": num(p.expected_utility),
            "expect_witness": expect_witness,
        }));
        let pass = if expect_witness { p.witnesses >= 1 } else { p.witnesses == 0 };
        checks.push((name.as_str(), p.witnesses as f64, if expect_witness { 1.0 } else { 0.0 }, pass));
    }
    let passed = checks.iter().all(|c| c.3);
    json!({
        "schema": SCHEMA,
        "kind": "bs-example",
        "passed": passed,
        "params": {
            "T": num(o.params.horizon),
            "lambda": num(o.params.lambda),
            "grid_points": o.params.grid_points,
            "n_paths": o.params.n_paths,
            "seed": o.params.seed,
        },
        "values": {
            "frictional_mean": num(u.frictional.mean),
            "closed_form": num(u.closed_form),
            "z_score": num(u.z_score),
        },
        "sandwich": {
            "holds": o.sandwich.holds,
            "violations": o.sandwich.violations,
            "min_log_ratio": num(o.sandwich.min_log_ratio),
            "max_log_ratio": num(o.sandwich.max_log_ratio),
            "lower_bound": num(o.sandwich.lower_bound),
        },
        "utilities": {
            "frictional": estimate(&u.frictional),
            "frictionless": estimate(&u.frictionless),
            "max_wealth_difference": num(u.max_wealth_difference),
            "closed_form": num(u.closed_form),
            "z_score": num(u.z_score),
        },
        "probes": probes,
        "checks": check_list(checks),
    })
}

fn show(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => format!("{:.6e}", number_of(v).unwrap_or(f64::NAN)),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Text view of a report: its kind, headline values and one line per check.
pub fn summary(report: &Value) -> String {
    let mut out = String::new();
    let kind = report.get("kind").and_then(Value::as_str).unwrap_or("report");
    let _ = writeln!(out, "{kind}");
    let empty = Map::new();
    let headline = report.get("values").and_then(Value::as_object).unwrap_or(&empty);
    for key in ["value", "kkt_residual", "iterations", "converged"] {
        if let Some(v) = report.get(key) {
            let _ = writeln!(out, "  {key:<24} {}", show(v));
        }
    }
    for (key, v) in headline {
        let _ = writeln!(out, "  {key:<24} {}", show(v));
    }
    if let Some(checks) = report.get("checks").and_then(Value::as_array) {
        for c in checks {
            let pass = c.get("pass").and_then(Value::as_bool).unwrap_or(false);
            let _ = writeln!(
                out,
                "  {} {:<24} {:>14} (threshold {})",
                if pass { "PASS" } else { "FAIL" },
                c.get("name").and_then(Value::as_str).unwrap_or("?"),
                show(c.get("value").unwrap_or(&Value::Null)),
                show(c.get("threshold").unwrap_or(&Value::Null)),
            );
        }
    }
    if let Some(p) = report.get("passed").and_then(Value::as_bool) {
        let _ = writeln!(out, "{}", if p { "all checks passed" } else { "verification failed" });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_lists_checks() {
        let r = json!({
            "kind": "verification",
            "passed": false,
            "values": {"gap": 0.5},
            "checks": [{"name": "gap", "value": 0.5, "threshold": 1e-5, "pass": false}],
        });
        let s = summary(&r);
        assert!(s.contains("FAIL gap"));
        assert!(s.contains("verification failed"));
    }
}

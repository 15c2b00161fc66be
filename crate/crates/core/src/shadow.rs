//! Consistent price systems from the marginal value of the optimal holdings,
//! and the checks that the implied frictionless price is a shadow price.
//!
//! Write `𝓤_n(a, b)` for the optimal expected utility conditional on node
//! `n`, starting there from holdings `(a, b)` with trading allowed at `n`.
//! With `(φ̂⁰_n, φ̂¹_n)` the optimal holdings after trading at `n`, the pair
//! is the right derivative
//!
//! ```text
//! Z⁰_n = ∂⁺_a 𝓤_n(φ̂⁰_n, φ̂¹_n),   Z¹_n = ∂⁺_b 𝓤_n(φ̂⁰_n, φ̂¹_n)
//! ```
//!
//! at non-terminal nodes, and `Z⁰ = U′(ĝ + e)`, `Z¹ = (1 − λ) S Z⁰` at the
//! leaves. In discrete time the pair needs no regularization across times.
//! The implied price is `S^Z = Z¹ / Z⁰`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::friction::{conditional_outcome, expected_utility, random_admissible_plan, SolveReport, TradePlan};
use crate::frictionless::{solve_frictionless, PriceAssignment};
use crate::market::{EndowmentSpec, ScenarioTree};
use crate::program::SolverOptions;
use crate::utility::UtilitySpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpsMethod {
    FiniteDifference,
    KktMultiplier,
    /// Built by hand, sampled, or read from a file.
    Supplied,
}

/// Positive pair `(Z⁰, Z¹)` per node, indexed like the tree's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CpsPair {
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    /// Base difference step; zero when no differencing was involved.
    pub epsilon_used: f64,
    pub method: CpsMethod,
}

impl CpsPair {
    pub fn implied_price(&self, n: usize) -> f64 {
        self.z1[n] / self.z0[n]
    }

    pub fn implied_prices(&self) -> PriceAssignment {
        PriceAssignment { s_z: self.z0.iter().zip(&self.z1).map(|(z0, z1)| z1 / z0).collect() }
    }
}

/// Thresholds of the verification suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Spread membership of `S^Z`, relative to `S`.
    pub sandwich: f64,
    /// Absolute, per node and component.
    pub supermartingale: f64,
    /// `r₁` and `r₂`, relative to `1 + |Z⁰₀ x|`.
    pub optimality: f64,
    /// Upper end of the shadow gap, relative to `1 + |u|`.
    pub gap: f64,
    /// How far below zero the shadow gap may fall.
    pub gap_floor: f64,
    /// `|bound − u|`, relative to `1 + |u|`.
    pub duality: f64,
    /// Relative slack on the trade-location inclusions.
    pub trade_location: f64,
    pub dp_martingale: f64,
    pub deflated_wealth: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            sandwich: 1e-8,
            supermartingale: 1e-9,
            optimality: 1e-5,
            gap: 1e-5,
            gap_floor: 1e-9,
            duality: 1e-5,
            trade_location: 1e-6,
            dp_martingale: 1e-6,
            deflated_wealth: 1e-9,
        }
    }
}

/// Largest relative disagreement tolerated between the extrapolated and the
/// raw difference quotient.
pub const ILL_CONDITIONING: f64 = 1e-3;

/// Executes independent tasks and returns their results in index order.
pub trait BatchRunner {
    fn map<T, F>(&self, count: usize, task: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs every task on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl BatchRunner for Sequential {
    fn map<T, F>(&self, count: usize, task: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..count).map(task).collect()
    }
}

/// Terminal pair `(U′(ĝ + e), (1 − λ) S U′(ĝ + e))` at leaf `l`.
fn leaf_pair(tree: &ScenarioTree, utility: &UtilitySpec, endow: &EndowmentSpec, plan: &TradePlan, l: usize) -> Result<(f64, f64)> {
    let z0 = utility.marginal(plan.phi0[l] + endow.at(l))?;
    Ok((z0, tree.bid(l) * z0))
}

/// The pair from forward difference quotients of conditional values, without
/// checking the CPS invariants. Each node differences with steps
/// `eps·(1 + |φ̂|)` and half of it and extrapolates the two quotients.
pub fn construct_marginal_cps<R: BatchRunner>(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    report: &SolveReport,
    eps: f64,
    opts: &SolverOptions,
    runner: &R,
) -> Result<CpsPair> {
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.iterations, residual: report.kkt_residual });
    }
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::EpsilonOutOfRange(eps));
    }
    let plan = &report.plan;
    let internal: Vec<usize> = tree.internal_nodes().collect();
    let mut queries = Vec::with_capacity(5 * internal.len());
    let mut steps = Vec::with_capacity(internal.len());
    for &n in &internal {
        let (a, b) = (plan.phi0[n].max(0.0), plan.phi1[n].max(0.0));
        let (h0, h1) = (eps * (1.0 + a), eps * (1.0 + b));
        queries.extend([(n, a, b), (n, a + h0, b), (n, a + 0.5 * h0, b), (n, a, b + h1), (n, a, b + 0.5 * h1)]);
        steps.push((h0, h1));
    }
    let outcomes = runner.map(queries.len(), |i| {
        let (n, a, b) = queries[i];
        conditional_outcome(tree, utility, endow, n, a, b, opts)
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let mut z0 = vec![0.0; tree.len()];
    let mut z1 = vec![0.0; tree.len()];
    for (j, &n) in internal.iter().enumerate() {
        let base = &outcomes[5 * j];
        let (h0, h1) = steps[j];
        let extrapolate = |full: usize, half: usize, h: f64| -> Result<f64> {
            let d_full = base.gain_to(&outcomes[full], utility) / h;
            let d_half = base.gain_to(&outcomes[half], utility) / (0.5 * h);
            let r = 2.0 * d_half - d_full;
            if !((r - d_half).abs() <= ILL_CONDITIONING * r.abs()) {
                return Err(Error::IllConditioned { id: tree.node(n).id.clone(), extrapolated: r, raw: d_half });
            }
            Ok(r)
        };
        z0[n] = extrapolate(5 * j + 1, 5 * j + 2, h0)?;
        z1[n] = extrapolate(5 * j + 3, 5 * j + 4, h1)?;
    }
    for l in tree.leaves() {
        (z0[l], z1[l]) = leaf_pair(tree, utility, endow, plan, l)?;
    }
    Ok(CpsPair { z0, z1, epsilon_used: eps, method: CpsMethod::FiniteDifference })
}

/// [`construct_marginal_cps`] followed by the CPS invariants at the default
/// tolerances; a violation is returned as an error naming the node.
pub fn marginal_cps<R: BatchRunner>(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    report: &SolveReport,
    eps: f64,
    opts: &SolverOptions,
    runner: &R,
) -> Result<CpsPair> {
    let cps = construct_marginal_cps(tree, utility, endow, report, eps, opts, runner)?;
    check_cps(tree, &cps).into_result(&Tolerances::default())?;
    Ok(cps)
}

/// The pair read off the holding multipliers of the frictional solve.
///
/// Perturbing the post-trade bond at `m` shifts every leaf wealth below `m`
/// and every bond constraint below `m`; perturbing the stock shifts the
/// stock constraints below `m` and, through liquidation, the leaves. In
/// unconditional probability units
///
/// ```text
/// P_m Z⁰_m = Σ_{l ≤ m} P_l U′_l + Σ_{n ≤ m} ν⁰_n
/// P_m Z¹_m = Σ_{l ≤ m} (1 − λ) S_l (P_l U′_l + ν⁰_l) + Σ_{n ≤ m, n internal} ν¹_n
/// ```
pub fn kkt_cps(tree: &ScenarioTree, utility: &UtilitySpec, endow: &EndowmentSpec, report: &SolveReport) -> Result<CpsPair> {
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.iterations, residual: report.kkt_residual });
    }
    let duals = report
        .duals
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("the solve report carries no multipliers".into()))?;
    let probs = tree.node_probabilities();
    let mut sum0 = vec![0.0; tree.len()];
    let mut sum1 = vec![0.0; tree.len()];
    for l in tree.leaves() {
        let mu = utility.marginal(report.plan.phi0[l] + endow.at(l))?;
        sum0[l] = probs[l] * mu + duals.bond[l];
        sum1[l] = tree.bid(l) * sum0[l];
    }
    // Children come after parents in the node order.
    for n in (0..tree.len()).rev() {
        if tree.is_leaf(n) {
            continue;
        }
        sum0[n] = duals.bond[n] + tree.children(n).iter().map(|&c| sum0[c]).sum::<f64>();
        sum1[n] = duals.stock[n] + tree.children(n).iter().map(|&c| sum1[c]).sum::<f64>();
    }
    let mut z0 = vec![0.0; tree.len()];
    let mut z1 = vec![0.0; tree.len()];
    for n in 0..tree.len() {
        if tree.is_leaf(n) {
            (z0[n], z1[n]) = leaf_pair(tree, utility, endow, &report.plan, n)?;
        } else {
            z0[n] = sum0[n] / probs[n];
            z1[n] = sum1[n] / probs[n];
        }
    }
    let cps = CpsPair { z0, z1, epsilon_used: 0.0, method: CpsMethod::KktMultiplier };
    check_cps(tree, &cps).into_result(&Tolerances::default())?;
    Ok(cps)
}

/// Worst observed value of one invariant and where it occurs.
#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub value: f64,
    pub node: Option<String>,
}

impl Worst {
    fn new() -> Self {
        Worst { value: f64::NEG_INFINITY, node: None }
    }

    fn update(&mut self, value: f64, tree: &ScenarioTree, n: usize) {
        if value > self.value || value.is_nan() {
            self.value = value;
            self.node = Some(tree.node(n).id.clone());
        }
    }
}

/// The CPS invariants measured node by node.
#[derive(Debug, Clone, PartialEq)]
pub struct CpsCheck {
    /// Smallest entry of `Z⁰` and `Z¹`.
    pub min_z: f64,
    /// Largest `max((1 − λ)S − S^Z, S^Z − S) / S`; nonpositive inside the spread.
    pub sandwich: Worst,
    /// Largest `Σ_c P(c|n) Z^i_c − Z^i_n` over non-terminal nodes and both components.
    pub supermartingale: Worst,
}

impl CpsCheck {
    pub fn passes(&self, tol: &Tolerances) -> bool {
        self.min_z > 0.0 && self.sandwich.value <= tol.sandwich && self.supermartingale.value <= tol.supermartingale
    }

    pub fn into_result(self, tol: &Tolerances) -> Result<()> {
        let unnamed = || String::from("?");
        if !(self.min_z > 0.0) {
            return Err(Error::CpsInvariant { what: "positivity", id: unnamed(), excess: -self.min_z });
        }
        if !(self.sandwich.value <= tol.sandwich) {
            return Err(Error::CpsInvariant {
                what: "sandwich",
                id: self.sandwich.node.unwrap_or_else(unnamed),
                excess: self.sandwich.value,
            });
        }
        if !(self.supermartingale.value <= tol.supermartingale) {
            return Err(Error::CpsInvariant {
                what: "supermartingale",
                id: self.supermartingale.node.unwrap_or_else(unnamed),
                excess: self.supermartingale.value,
            });
        }
        Ok(())
    }
}

/// Walk the tree and measure positivity, spread membership and the
/// supermartingale property of `cps`.
pub fn check_cps(tree: &ScenarioTree, cps: &CpsPair) -> CpsCheck {
    let mut min_z = f64::INFINITY;
    let mut sandwich = Worst::new();
    let mut supermartingale = Worst::new();
    for n in 0..tree.len() {
        min_z = min_z.min(cps.z0[n]).min(cps.z1[n]);
        let s = tree.price(n);
        let p = cps.implied_price(n);
        sandwich.update(((tree.bid(n) - p) / s).max((p - s) / s), tree, n);
        if tree.is_leaf(n) {
            continue;
        }
        for z in [&cps.z0, &cps.z1] {
            let next: f64 = tree.children(n).iter().map(|&c| tree.node(c).prob * z[c]).sum();
            supermartingale.update(next - z[n], tree, n);
        }
    }
    CpsCheck { min_z, sandwich, supermartingale }
}

/// Residuals of the two optimality conditions on the terminal pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalityResiduals {
    /// `max_l |Z⁰_l − U′(ĝ_l + e_l)|`.
    pub r1: f64,
    /// `|Σ_l P_l Z⁰_l ĝ_l − Z⁰₀ x|`.
    pub r2: f64,
    /// `1 + |Z⁰₀ x|`.
    pub scale: f64,
}

impl OptimalityResiduals {
    pub fn passes(&self, tol: &Tolerances) -> bool {
        self.r1 <= tol.optimality * self.scale && self.r2 <= tol.optimality * self.scale
    }
}

pub fn verify_optimality_conditions(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    cps: &CpsPair,
    plan: &TradePlan,
) -> Result<OptimalityResiduals> {
    let probs = tree.node_probabilities();
    let mut r1: f64 = 0.0;
    let mut deflated = 0.0;
    for l in tree.leaves() {
        let g = plan.phi0[l];
        r1 = r1.max((cps.z0[l] - utility.marginal(g + endow.at(l))?).abs());
        deflated += probs[l] * cps.z0[l] * g;
    }
    let initial = cps.z0[tree.root()] * endow.x;
    Ok(OptimalityResiduals { r1, r2: (deflated - initial).abs(), scale: 1.0 + initial.abs() })
}

/// `E[V(Z⁰_T)] + E[Z⁰_T e_T] + Z⁰₀ x`, an upper bound on the value of every
/// plan, frictional or frictionless at `S^Z`.
pub fn duality_upper_bound(tree: &ScenarioTree, utility: &UtilitySpec, endow: &EndowmentSpec, cps: &CpsPair) -> Result<f64> {
    let probs = tree.node_probabilities();
    let mut bound = cps.z0[tree.root()] * endow.x;
    for l in tree.leaves() {
        bound += probs[l] * (utility.conjugate(cps.z0[l])? + cps.z0[l] * endow.at(l));
    }
    Ok(bound)
}

/// `u^Z − u` with `u^Z` the constrained frictionless value at `S^Z`.
pub fn shadow_gap(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    cps: &CpsPair,
    frictional_value: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    Ok(frictionless_value(tree, utility, endow, cps, opts)? - frictional_value)
}

fn frictionless_value(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    cps: &CpsPair,
    opts: &SolverOptions,
) -> Result<f64> {
    let report = solve_frictionless(tree, &cps.implied_prices(), utility, endow, opts)?;
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.iterations, residual: report.kkt_residual });
    }
    Ok(report.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TradeSide {
    Buy,
    Sell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeLocationViolation {
    pub node: String,
    pub side: TradeSide,
    pub quantity: f64,
    pub implied_price: f64,
    /// The ask for a buy, the bid for a sell.
    pub required: f64,
}

/// Nodes where the plan buys while `S^Z` sits below the ask, or sells while
/// `S^Z` sits above the bid, beyond `tol · S`. Trades of at most `tol` shares
/// are ignored.
pub fn trade_location_report(tree: &ScenarioTree, plan: &TradePlan, cps: &CpsPair, tol: f64) -> Vec<TradeLocationViolation> {
    let mut out = Vec::new();
    for n in 0..tree.len() {
        let s = tree.price(n);
        let p = cps.implied_price(n);
        let id = || tree.node(n).id.clone();
        if plan.buy[n] > tol && p < s - tol * s {
            out.push(TradeLocationViolation { node: id(), side: TradeSide::Buy, quantity: plan.buy[n], implied_price: p, required: s });
        }
        if plan.sell[n] > tol && p > tree.bid(n) + tol * s {
            out.push(TradeLocationViolation {
                node: id(),
                side: TradeSide::Sell,
                quantity: plan.sell[n],
                implied_price: p,
                required: tree.bid(n),
            });
        }
    }
    out
}

/// Largest martingale defect of the conditional value along a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct DpMartingale {
    /// `max_n |𝓤_n(φ_n) − Σ_c P(c|n) 𝓤_c(φ_c)|` over non-terminal nodes.
    pub residual: f64,
    pub node: Option<String>,
}

/// Evaluate `𝓤` at the plan's post-trade holdings at every node and measure
/// the one-step martingale defect.
pub fn dp_martingale<R: BatchRunner>(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    plan: &TradePlan,
    opts: &SolverOptions,
    runner: &R,
) -> Result<DpMartingale> {
    let values = runner.map(tree.len(), |n| {
        conditional_outcome(tree, utility, endow, n, plan.phi0[n].max(0.0), plan.phi1[n].max(0.0), opts)
            .map(|o| o.value)
    });
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    let mut worst = DpMartingale { residual: 0.0, node: None };
    for n in tree.internal_nodes() {
        let next: f64 = tree.children(n).iter().map(|&c| tree.node(c).prob * values[c]).sum();
        let r = (values[n] - next).abs();
        if r > worst.residual || r.is_nan() {
            worst = DpMartingale { residual: r, node: Some(tree.node(n).id.clone()) };
        }
    }
    Ok(worst)
}

/// The deflated wealth `Z⁰φ⁰ + Z¹φ¹` of one plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeflatedWealth {
    /// Largest one-step increase in conditional mean, including the root
    /// trade from `(x, 0)`.
    pub excess: f64,
    /// Smallest value over nodes.
    pub min_value: f64,
}

impl DeflatedWealth {
    /// Worst case over several plans.
    pub fn merge(self, other: DeflatedWealth) -> DeflatedWealth {
        DeflatedWealth { excess: self.excess.max(other.excess), min_value: self.min_value.min(other.min_value) }
    }
}

/// Post-trade holdings `(φ⁰, φ¹)` per node starting from `(x, 0)`.
pub fn deflated_wealth(tree: &ScenarioTree, cps: &CpsPair, x: f64, phi0: &[f64], phi1: &[f64]) -> DeflatedWealth {
    let value: Vec<f64> = (0..tree.len()).map(|n| cps.z0[n] * phi0[n] + cps.z1[n] * phi1[n]).collect();
    let root = tree.root();
    let mut excess = value[root] - cps.z0[root] * x;
    for n in tree.internal_nodes() {
        let next: f64 = tree.children(n).iter().map(|&c| tree.node(c).prob * value[c]).sum();
        excess = excess.max(next - value[n]);
    }
    let min_value = value.iter().copied().fold(f64::INFINITY, f64::min);
    DeflatedWealth { excess, min_value }
}

/// Worst deflated-wealth behaviour over `count` random admissible frictional
/// plans from `x`.
pub fn deflated_wealth_random_plans<G: Rng + ?Sized>(
    tree: &ScenarioTree,
    cps: &CpsPair,
    x: f64,
    count: usize,
    rng: &mut G,
) -> DeflatedWealth {
    let mut worst = DeflatedWealth { excess: f64::NEG_INFINITY, min_value: f64::INFINITY };
    for _ in 0..count {
        let plan = random_admissible_plan(tree, x, rng);
        worst = worst.merge(deflated_wealth(tree, cps, x, &plan.phi0, &plan.phi1));
    }
    worst
}

/// Random CPS: implied prices uniform in the spread, and `Z⁰` a positive
/// supermartingale scaled so that `Z¹ = Z⁰ S^Z` is one too.
pub fn random_cps<G: Rng + ?Sized>(tree: &ScenarioTree, rng: &mut G) -> CpsPair {
    let prices = PriceAssignment::random_in_spread(tree, rng);
    let mut z0 = vec![0.0; tree.len()];
    z0[tree.root()] = rng.gen_range(0.2..5.0);
    for n in tree.internal_nodes() {
        let kids = tree.children(n);
        let raw: Vec<f64> = kids.iter().map(|_| rng.gen_range(0.1..2.0)).collect();
        let mean0: f64 = kids.iter().zip(&raw).map(|(&c, q)| tree.node(c).prob * q).sum();
        let mean1: f64 = kids.iter().zip(&raw).map(|(&c, q)| tree.node(c).prob * q * prices.s_z[c]).sum();
        let scale = (1.0 / mean0).min(prices.s_z[n] / mean1) * rng.gen_range(0.5..=1.0);
        for (&c, q) in kids.iter().zip(&raw) {
            z0[c] = z0[n] * q * scale;
        }
    }
    let z1 = z0.iter().zip(&prices.s_z).map(|(z, p)| z * p).collect();
    CpsPair { z0, z1, epsilon_used: 0.0, method: CpsMethod::Supplied }
}

/// Negative control: keep `Z⁰` and move the implied price to the ask.
pub fn corrupt_to_ask(tree: &ScenarioTree, cps: &CpsPair) -> CpsPair {
    let z1 = (0..tree.len()).map(|n| cps.z0[n] * tree.ask(n)).collect();
    CpsPair { z0: cps.z0.clone(), z1, epsilon_used: cps.epsilon_used, method: CpsMethod::Supplied }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub tolerances: Tolerances,
    /// Random admissible plans for the deflated-wealth check.
    pub random_plans: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { tolerances: Tolerances::default(), random_plans: 50, seed: 0, solver: SolverOptions::default() }
    }
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub frictional_value: f64,
    pub frictionless_value: f64,
    pub gap: f64,
    pub dual_bound: f64,
    pub cps: CpsCheck,
    pub optimality: OptimalityResiduals,
    pub trade_location: Vec<TradeLocationViolation>,
    pub dp: DpMartingale,
    /// Over the random plans and the plan under test.
    pub deflated_wealth: DeflatedWealth,
    pub checks: Vec<CheckOutcome>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Run every check of the suite on a plan and a candidate CPS.
pub fn verify_shadow<R: BatchRunner>(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    plan: &TradePlan,
    cps: &CpsPair,
    options: &VerifyOptions,
    runner: &R,
) -> Result<VerificationReport> {
    if cps.z0.len() != tree.len() || cps.z1.len() != tree.len() {
        return Err(Error::InvalidParameter("CPS does not match the tree".into()));
    }
    let tol = &options.tolerances;
    let u = expected_utility(tree, utility, endow, plan);
    let cps_check = check_cps(tree, cps);
    let optimality = verify_optimality_conditions(tree, utility, endow, cps, plan)?;
    let dual_bound = duality_upper_bound(tree, utility, endow, cps)?;
    let u_z = frictionless_value(tree, utility, endow, cps, &options.solver)?;
    let gap = u_z - u;
    let trade_location = trade_location_report(tree, plan, cps, tol.trade_location);
    let dp = dp_martingale(tree, utility, endow, plan, &options.solver, runner)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let deflated = deflated_wealth_random_plans(tree, cps, endow.x, options.random_plans, &mut rng)
        .merge(deflated_wealth(tree, cps, endow.x, &plan.phi0, &plan.phi1));

    let scale_u = 1.0 + u.abs();
    let check = |name, value: f64, threshold: f64| CheckOutcome { name, value, threshold, pass: value <= threshold };
    let checks = vec![
        CheckOutcome { name: "positivity", value: cps_check.min_z, threshold: 0.0, pass: cps_check.min_z > 0.0 },
        check("sandwich", cps_check.sandwich.value, tol.sandwich),
        check("supermartingale", cps_check.supermartingale.value, tol.supermartingale),
        check("r1", optimality.r1, tol.optimality * optimality.scale),
        check("r2", optimality.r2, tol.optimality * optimality.scale),
        check("gap", gap, tol.gap * scale_u),
        check("dominance", -gap, tol.gap_floor),
        check("duality", (dual_bound - u).abs(), tol.duality * scale_u),
        check("weak_duality", u_z - dual_bound, 1e-8),
        check("trade_location", trade_location.len() as f64, 0.0),
        check("dp_martingale", dp.residual, tol.dp_martingale),
        check("deflated_wealth", deflated.excess, tol.deflated_wealth),
        CheckOutcome {
            name: "deflated_positivity",
            value: deflated.min_value,
            threshold: 0.0,
            pass: deflated.min_value > 0.0,
        },
    ];
    Ok(VerificationReport {
        frictional_value: u,
        frictionless_value: u_z,
        gap,
        dual_bound,
        cps: cps_check,
        optimality,
        trade_location,
        dp,
        deflated_wealth: deflated,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::friction::{conditional_value, solve_primal};
    use crate::market::{build_binomial, NodeRecord};
    use proptest::prelude::*;

    const EPS: f64 = 1e-5;

    fn paper_tree() -> ScenarioTree {
        build_binomial(1.0, 2.0, 0.5, 0.5, 1, 0.01).unwrap()
    }

    fn martingale_tree() -> ScenarioTree {
        let records = vec![
            NodeRecord { id: "r".into(), parent: None, t: 0, price: 1.0, prob: 1.0 },
            NodeRecord { id: "u".into(), parent: Some("r".into()), t: 1, price: 2.0, prob: 1.0 / 3.0 },
            NodeRecord { id: "d".into(), parent: Some("r".into()), t: 1, price: 0.5, prob: 2.0 / 3.0 },
        ];
        ScenarioTree::from_records(0.1, 1, records).unwrap()
    }

    fn solved(tree: &ScenarioTree, endow: &EndowmentSpec) -> (SolveReport, CpsPair) {
        let opts = SolverOptions::default();
        let report = solve_primal(tree, &UtilitySpec::Log, endow, &opts).unwrap();
        let cps = marginal_cps(tree, &UtilitySpec::Log, endow, &report, EPS, &opts, &Sequential).unwrap();
        (report, cps)
    }

    #[test]
    fn martingale_tree_prices_cash_at_marginal_utility() {
        let tree = martingale_tree();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let (report, cps) = solved(&tree, &endow);
        for n in 0..tree.len() {
            assert!((cps.z0[n] - 1.0).abs() < 1e-8, "{n}: {}", cps.z0[n]);
        }
        let opt = verify_optimality_conditions(&tree, &UtilitySpec::Log, &endow, &cps, &report.plan).unwrap();
        assert!(opt.r1 == 0.0 && opt.r2 < 1e-8);
        let gap = shadow_gap(&tree, &UtilitySpec::Log, &endow, &cps, report.value, &SolverOptions::default()).unwrap();
        assert!(gap.abs() < 1e-9, "{gap}");
        let bound = duality_upper_bound(&tree, &UtilitySpec::Log, &endow, &cps).unwrap();
        assert!(bound.abs() < 1e-8, "{bound}");
        assert!(trade_location_report(&tree, &report.plan, &cps, 1e-6).is_empty());
    }

    #[test]
    fn root_bond_marginal_is_the_value_derivative() {
        let tree = paper_tree();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let (_, cps) = solved(&tree, &endow);
        let opts = SolverOptions::default();
        let h = 1e-4;
        let value = |x: f64| {
            let e = endow.with_x(x).unwrap();
            solve_primal(&tree, &UtilitySpec::Log, &e, &opts).unwrap().value
        };
        let central = (value(1.0 + h) - value(1.0 - h)) / (2.0 * h);
        assert!((cps.z0[0] - central).abs() < 1e-4, "{} vs {central}", cps.z0[0]);
    }

    #[test]
    fn leaf_pair_is_marginal_utility() {
        let tree = build_binomial(1.0, 1.3, 0.8, 0.55, 2, 0.03).unwrap();
        let endow = EndowmentSpec::new(&tree, 1.0, [("ruu", 0.3), ("rdu", 0.1)]).unwrap();
        let (report, cps) = solved(&tree, &endow);
        let opts = SolverOptions::default();
        for l in tree.leaves() {
            let g = report.plan.phi0[l];
            assert_eq!(cps.z0[l], 1.0 / (g + endow.at(l)));
            // Independent re-derivation from the leaf's conditional value.
            let h = 1e-6;
            let up = conditional_value(&tree, &UtilitySpec::Log, &endow, l, g + h, 0.0, &opts).unwrap();
            let down = conditional_value(&tree, &UtilitySpec::Log, &endow, l, g - h, 0.0, &opts).unwrap();
            assert!(((up - down) / (2.0 * h) - cps.z0[l]).abs() < 1e-6);
        }
    }

    #[test]
    fn one_step_instance_passes_the_suite() {
        let tree = paper_tree();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let (report, cps) = solved(&tree, &endow);
        // Buys at the root and sells at the leaves.
        assert!(report.plan.buy[0] > 0.4);
        assert!((cps.implied_price(0) - 1.0).abs() < 1e-6);
        for l in tree.leaves() {
            assert!((cps.implied_price(l) - tree.bid(l)).abs() < 1e-6 * tree.price(l));
        }
        let v = verify_shadow(&tree, &UtilitySpec::Log, &endow, &report.plan, &cps, &VerifyOptions::default(), &Sequential)
            .unwrap();
        assert!(v.passed(), "{:?}", v.failures().collect::<Vec<_>>());
        assert!(v.gap.abs() <= 1e-5 && v.gap >= -1e-9);
    }

    #[test]
    fn doubled_root_marginal_shows_in_r2() {
        let tree = paper_tree();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let (report, mut cps) = solved(&tree, &endow);
        let before = cps.z0[0];
        cps.z0[0] *= 2.0;
        let opt = verify_optimality_conditions(&tree, &UtilitySpec::Log, &endow, &cps, &report.plan).unwrap();
        assert!((opt.r2 - before).abs() < 1e-6, "{} vs {before}", opt.r2);
    }

    #[test]
    fn corrupted_prices_are_rejected() {
        let tree = paper_tree();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let (report, cps) = solved(&tree, &endow);
        let bad = corrupt_to_ask(&tree, &cps);
        let gap = shadow_gap(&tree, &UtilitySpec::Log, &endow, &bad, report.value, &SolverOptions::default()).unwrap();
        assert!(gap > 1e-3, "{gap}");
        let violations = trade_location_report(&tree, &report.plan, &bad, 1e-6);
        assert_eq!(violations.len(), 2);
        assert!(violations.iter().all(|v| v.side == TradeSide::Sell));
        let v = verify_shadow(&tree, &UtilitySpec::Log, &endow, &report.plan, &bad, &VerifyOptions::default(), &Sequential)
            .unwrap();
        assert!(!v.passed());
    }

    #[test]
    fn kkt_and_difference_quotients_agree_where_trading() {
        let tree = build_binomial(1.0, 1.25, 0.85, 0.6, 3, 0.02).unwrap();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let (report, fd) = solved(&tree, &endow);
        let kkt = kkt_cps(&tree, &UtilitySpec::Log, &endow, &report).unwrap();
        let mut compared = 0;
        for n in 0..tree.len() {
            if report.plan.buy[n] > 1e-6 || report.plan.sell[n] > 1e-6 {
                let (a, b) = (fd.implied_price(n), kkt.implied_price(n));
                assert!((a - b).abs() <= 1e-4 * b, "{n}: {a} vs {b}");
                compared += 1;
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn random_cps_bounds_the_value() {
        let tree = build_binomial(1.0, 1.3, 0.8, 0.5, 2, 0.05).unwrap();
        let endow = EndowmentSpec::new(&tree, 1.0, [("ruu", 0.5)]).unwrap();
        let u = solve_primal(&tree, &UtilitySpec::Log, &endow, &SolverOptions::default()).unwrap().value;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let cps = random_cps(&tree, &mut rng);
            assert!(check_cps(&tree, &cps).passes(&Tolerances::default()));
            let bound = duality_upper_bound(&tree, &UtilitySpec::Log, &endow, &cps).unwrap();
            assert!(bound >= u - 1e-8, "{bound} < {u}");
        }
    }

    #[test]
    fn epsilon_and_convergence_guards() {
        let tree = paper_tree();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let opts = SolverOptions::default();
        let mut report = solve_primal(&tree, &UtilitySpec::Log, &endow, &opts).unwrap();
        for eps in [1e-8, 1e-2] {
            let r = marginal_cps(&tree, &UtilitySpec::Log, &endow, &report, eps, &opts, &Sequential);
            assert_eq!(r, Err(Error::EpsilonOutOfRange(eps)));
        }
        report.converged = false;
        let r = marginal_cps(&tree, &UtilitySpec::Log, &endow, &report, EPS, &opts, &Sequential);
        assert!(matches!(r, Err(Error::NotConverged { .. })));
    }

    /// Naive restatement of the walker: spread membership and one-step
    /// conditional means computed from the node list directly.
    fn naive_ok(tree: &ScenarioTree, cps: &CpsPair, tol: &Tolerances) -> bool {
        let nodes = tree.nodes();
        let lambda = tree.lambda();
        nodes.iter().enumerate().all(|(n, node)| {
            let p = cps.z1[n] / cps.z0[n];
            let inside = p >= (1.0 - lambda) * node.price - tol.sandwich * node.price
                && p <= node.price + tol.sandwich * node.price;
            let kids: Vec<usize> = (0..nodes.len()).filter(|&c| nodes[c].parent == Some(n)).collect();
            let sup = kids.is_empty()
                || [&cps.z0, &cps.z1].iter().all(|z| {
                    kids.iter().map(|&c| nodes[c].prob * z[c]).sum::<f64>() <= z[n] + tol.supermartingale
                });
            cps.z0[n] > 0.0 && cps.z1[n] > 0.0 && inside && sup
        })
    }

    proptest! {
        #[test]
        fn walker_agrees_with_naive_check(seed in any::<u64>(), n in 0usize..15, factor in 0.9f64..1.1, which in 0usize..2) {
            let tree = build_binomial(1.0, 1.2, 0.85, 0.5, 3, 0.05).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cps = random_cps(&tree, &mut rng);
            if which == 0 { cps.z0[n] *= factor } else { cps.z1[n] *= factor }
            let tol = Tolerances::default();
            prop_assert_eq!(check_cps(&tree, &cps).passes(&tol), naive_ok(&tree, &cps, &tol));
        }

        #[test]
        fn random_plans_deflate_to_supermartingales(seed in any::<u64>()) {
            let tree = build_binomial(1.0, 1.25, 0.8, 0.5, 3, 0.05).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cps = random_cps(&tree, &mut rng);
            let d = deflated_wealth_random_plans(&tree, &cps, 1.0, 10, &mut rng);
            prop_assert!(d.excess <= 1e-12 && d.min_value > 0.0);
        }
    }
}

//! Expected-utility maximization under proportional transaction costs with
//! no-short-selling constraints.
//!
//! A plan buys `b_n ≥ 0` shares at the ask and sells `s_n ≥ 0` shares at the
//! bid at every non-terminal node; leaves liquidate the stock position at the
//! bid. Holdings after trading at `n` are
//!
//! ```text
//! φ⁰_n = φ⁰_parent − S_n b_n + (1 − λ) S_n s_n
//! φ¹_n = φ¹_parent + b_n − s_n
//! ```
//!
//! and must stay nonnegative. Terminal wealth is `φ⁰_leaf + e_leaf`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::market::{EndowmentSpec, ScenarioTree};
use crate::program::{ConcaveProgram, ProgramSolution, SolverOptions};
use crate::utility::UtilitySpec;

/// Per-node trades and post-trade holdings, indexed like the tree's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TradePlan {
    pub buy: Vec<f64>,
    pub sell: Vec<f64>,
    pub phi0: Vec<f64>,
    pub phi1: Vec<f64>,
}

impl TradePlan {
    /// Plan from trades at internal nodes; leaves always liquidate and never
    /// buy, and holdings follow the self-financing recursion from `(x, 0)`.
    pub fn from_trades(tree: &ScenarioTree, x: f64, buy: &[f64], sell: &[f64]) -> Self {
        let n = tree.len();
        let lambda = tree.lambda();
        let mut plan = TradePlan { buy: vec![0.0; n], sell: vec![0.0; n], phi0: vec![0.0; n], phi1: vec![0.0; n] };
        for k in 0..n {
            let (p0, p1) = match tree.parent(k) {
                Some(p) => (plan.phi0[p], plan.phi1[p]),
                None => (x, 0.0),
            };
            let s = tree.price(k);
            let (b, sl) = if tree.is_leaf(k) { (0.0, p1) } else { (buy[k], sell[k]) };
            plan.buy[k] = b;
            plan.sell[k] = sl;
            plan.phi0[k] = p0 - s * b + (1.0 - lambda) * s * sl;
            plan.phi1[k] = if tree.is_leaf(k) { 0.0 } else { p1 + b - sl };
        }
        plan
    }

    /// Keep the initial bond position and never trade.
    pub fn hold_only(tree: &ScenarioTree, x: f64) -> Self {
        let zeros = vec![0.0; tree.len()];
        Self::from_trades(tree, x, &zeros, &zeros)
    }

    /// Liquidation value at each leaf, in the tree's leaf order.
    pub fn terminal_wealth(&self, tree: &ScenarioTree) -> Vec<f64> {
        tree.leaves().map(|l| self.phi0[l]).collect()
    }

    /// Replace simultaneous buys and sells at a node by the net trade.
    pub fn net_wash_trades(&self, tree: &ScenarioTree, x: f64) -> Self {
        let net_buy: Vec<f64> = self.buy.iter().zip(&self.sell).map(|(b, s)| (b - s).max(0.0)).collect();
        let net_sell: Vec<f64> = self.buy.iter().zip(&self.sell).map(|(b, s)| (s - b).max(0.0)).collect();
        Self::from_trades(tree, x, &net_buy, &net_sell)
    }
}

/// Multipliers of the holding constraints `φ⁰_n ≥ 0` and `φ¹_n ≥ 0`, in
/// unconditional probability units.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldingDuals {
    pub bond: Vec<f64>,
    pub stock: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub value: f64,
    pub plan: TradePlan,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    /// Present for frictional solves that went through the optimizer.
    pub duals: Option<HoldingDuals>,
}

/// `Σ_leaves P(leaf) U(φ⁰_leaf + e_leaf)`; `-∞` as soon as one leaf is.
pub fn expected_utility(tree: &ScenarioTree, utility: &UtilitySpec, endow: &EndowmentSpec, plan: &TradePlan) -> f64 {
    let probs = tree.node_probabilities();
    let mut total = 0.0;
    for l in tree.leaves() {
        let u = utility.evaluate(plan.phi0[l] + endow.at(l));
        if u == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        total += probs[l] * u;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Row {
    Buy(usize),
    Sell(usize),
    Bond(usize),
    Stock(usize),
}

/// The subtree problem rooted at `root` with pre-trade holdings `(a, b)`.
pub(crate) struct FrictionLayout {
    pub root: usize,
    pub internal: Vec<usize>,
    /// Variable slot of each node (buy at `2k`, sell at `2k + 1`).
    slot: Vec<Option<usize>>,
    pub rows: Vec<Row>,
    pub program: ConcaveProgram,
    a: f64,
    b: f64,
}

impl FrictionLayout {
    pub fn new(
        tree: &ScenarioTree,
        utility: &UtilitySpec,
        endow: &EndowmentSpec,
        root: usize,
        a: f64,
        b: f64,
    ) -> Self {
        let lambda = tree.lambda();
        let nodes = tree.subtree(root);
        let internal: Vec<usize> = nodes.iter().copied().filter(|&k| !tree.is_leaf(k)).collect();
        let leaves: Vec<usize> = nodes.iter().copied().filter(|&k| tree.is_leaf(k)).collect();
        let mut slot = vec![None; tree.len()];
        for (i, &k) in internal.iter().enumerate() {
            slot[k] = Some(i);
        }
        let dim = 2 * internal.len();

        // Affine forms of post-trade holdings: (coefficients, constant).
        let mut bond: Vec<Option<(DVector<f64>, f64)>> = vec![None; tree.len()];
        let mut stock: Vec<Option<(DVector<f64>, f64)>> = vec![None; tree.len()];
        for &k in &nodes {
            let (mut c0, mut k0, mut c1, mut k1) = if k == root {
                (DVector::zeros(dim), a, DVector::zeros(dim), b)
            } else {
                let p = tree.parent(k).expect("subtree node below root has a parent");
                let (c0, k0) = bond[p].clone().expect("parent visited first");
                let (c1, k1) = stock[p].clone().expect("parent visited first");
                (c0, k0, c1, k1)
            };
            let s = tree.price(k);
            if let Some(i) = slot[k] {
                c0[2 * i] -= s;
                c0[2 * i + 1] += (1.0 - lambda) * s;
                c1[2 * i] += 1.0;
                c1[2 * i + 1] -= 1.0;
            } else {
                c0 += &c1 * ((1.0 - lambda) * s);
                k0 += (1.0 - lambda) * s * k1;
                c1.fill(0.0);
                k1 = 0.0;
            }
            bond[k] = Some((c0, k0));
            stock[k] = Some((c1, k1));
        }

        let mut rows = Vec::new();
        let mut g_rows: Vec<DVector<f64>> = Vec::new();
        let mut h = Vec::new();
        for &k in &nodes {
            let (c0, k0) = bond[k].as_ref().unwrap();
            if let Some(i) = slot[k] {
                for (row, j) in [(Row::Buy(k), 2 * i), (Row::Sell(k), 2 * i + 1)] {
                    let mut g = DVector::zeros(dim);
                    g[j] = -1.0;
                    rows.push(row);
                    g_rows.push(g);
                    h.push(0.0);
                }
                let (c1, k1) = stock[k].as_ref().unwrap();
                rows.push(Row::Stock(k));
                g_rows.push(-c1);
                h.push(*k1);
            }
            rows.push(Row::Bond(k));
            g_rows.push(-c0);
            h.push(*k0);
        }

        let p_root = tree.path_probability(root);
        let probs = tree.node_probabilities();
        let weights: Vec<f64> = leaves.iter().map(|&l| probs[l] / p_root).collect();
        let wealth_map = DMatrix::from_fn(leaves.len(), dim, |i, j| bond[leaves[i]].as_ref().unwrap().0[j]);
        let wealth_offset =
            DVector::from_iterator(leaves.len(), leaves.iter().map(|&l| bond[l].as_ref().unwrap().1 + endow.at(l)));
        let constraints = DMatrix::from_fn(g_rows.len(), dim, |i, j| g_rows[i][j]);

        let program = ConcaveProgram {
            utility: *utility,
            weights,
            wealth_map,
            wealth_offset,
            constraints,
            bounds: DVector::from_vec(h),
        };
        FrictionLayout { root, internal, slot, rows, program, a, b }
    }

    /// Strictly feasible start: every node spends a tenth of its cash on
    /// stock and sells a tenth of its shares.
    pub fn start(&self, tree: &ScenarioTree) -> DVector<f64> {
        let lambda = tree.lambda();
        let mut x = DVector::zeros(2 * self.internal.len());
        let mut holdings = vec![(0.0, 0.0); tree.len()];
        for &k in &self.internal {
            let (p0, p1) = if k == self.root {
                (self.a, self.b)
            } else {
                holdings[tree.parent(k).unwrap()]
            };
            let s = tree.price(k);
            let buy = 0.1 * p0 / s + 0.01 * (1.0 - lambda) * p1;
            let sell = 0.1 * p1 + 0.01 * buy;
            let i = self.slot[k].unwrap();
            x[2 * i] = buy;
            x[2 * i + 1] = sell;
            holdings[k] = (p0 - s * buy + (1.0 - lambda) * s * sell, p1 + buy - sell);
        }
        x
    }

    pub fn trades(&self, x: &DVector<f64>, k: usize) -> Option<(f64, f64)> {
        self.slot[k].map(|i| (x[2 * i], x[2 * i + 1]))
    }

    /// Per-node multipliers of the holding rows.
    pub fn holding_duals(&self, tree: &ScenarioTree, sol: &ProgramSolution) -> HoldingDuals {
        let mut duals = HoldingDuals { bond: vec![0.0; tree.len()], stock: vec![0.0; tree.len()] };
        for (r, row) in self.rows.iter().enumerate() {
            match *row {
                Row::Bond(k) => duals.bond[k] = sol.multipliers[r],
                Row::Stock(k) => duals.stock[k] = sol.multipliers[r],
                Row::Buy(_) | Row::Sell(_) => {}
            }
        }
        duals
    }
}

/// Optimal terminal wealth of a conditional (subtree) problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalOutcome {
    pub value: f64,
    /// Leaf probabilities conditional on the subtree root.
    pub weights: Vec<f64>,
    /// Terminal wealth including the endowment, same leaf order.
    pub wealth: Vec<f64>,
}

impl ConditionalOutcome {
    /// `value(other) - value(self)` computed leaf by leaf.
    pub fn gain_to(&self, other: &ConditionalOutcome, utility: &UtilitySpec) -> f64 {
        self.weights
            .iter()
            .zip(self.wealth.iter().zip(&other.wealth))
            .map(|(&p, (&from, &to))| p * utility.difference(to, from))
            .sum()
    }
}

/// Like [`conditional_value`], keeping the optimal leaf wealth so that
/// nearby values can be differenced leaf by leaf.
pub fn conditional_outcome(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    node: usize,
    a: f64,
    b: f64,
    opts: &SolverOptions,
) -> Result<ConditionalOutcome> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::NegativeHoldings { a, b });
    }
    let lambda = tree.lambda();
    if tree.is_leaf(node) {
        let w = a + (1.0 - lambda) * tree.price(node) * b + endow.at(node);
        return Ok(ConditionalOutcome { value: utility.evaluate(w), weights: vec![1.0], wealth: vec![w] });
    }
    let layout = FrictionLayout::new(tree, utility, endow, node, a, b);
    if a == 0.0 && b == 0.0 {
        // Nothing to trade with: wealth is the endowment alone.
        let zero = DVector::zeros(2 * layout.internal.len());
        let wealth: Vec<f64> = layout.program.leaf_wealth(&zero).iter().copied().collect();
        return Ok(ConditionalOutcome { value: layout.program.objective(&zero), weights: layout.program.weights, wealth });
    }
    let sol = layout.program.solve(layout.start(tree), opts)?;
    if !sol.converged {
        return Err(Error::NotConverged { iterations: sol.iterations, residual: sol.kkt_residual });
    }
    let wealth: Vec<f64> = layout.program.leaf_wealth(&sol.x).iter().copied().collect();
    Ok(ConditionalOutcome { value: sol.value, weights: layout.program.weights, wealth })
}

/// Optimal expected utility over the subtree rooted at `node`, starting from
/// pre-trade holdings `(a, b)` with trading allowed at `node` itself.
pub fn conditional_value(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    node: usize,
    a: f64,
    b: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    conditional_outcome(tree, utility, endow, node, a, b, opts).map(|o| o.value)
}

/// Solve the frictional problem from `(x, 0)`.
///
/// A run that stops short of the KKT threshold is returned with
/// `converged = false`; callers decide what to do with it.
pub fn solve_primal(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let x0 = endow.x;
    if !(x0 > 0.0) {
        return Err(Error::NonPositiveWealth(x0));
    }
    let layout = FrictionLayout::new(tree, utility, endow, tree.root(), x0, 0.0);
    let sol = layout.program.solve(layout.start(tree), opts)?;

    let mut buy = vec![0.0; tree.len()];
    let mut sell = vec![0.0; tree.len()];
    for &k in &layout.internal {
        let (b, s) = layout.trades(&sol.x, k).unwrap();
        buy[k] = b.max(0.0);
        sell[k] = s.max(0.0);
    }
    let raw = TradePlan::from_trades(tree, x0, &buy, &sell);
    let plan = clamp_rounding(raw.net_wash_trades(tree, x0), opts.feasibility_tolerance);
    let value = expected_utility(tree, utility, endow, &plan);
    Ok(SolveReport {
        value,
        plan,
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        converged: sol.converged,
        duals: Some(layout.holding_duals(tree, &sol)),
    })
}

/// Holdings that sit on a bound up to rounding are set exactly to it.
fn clamp_rounding(mut plan: TradePlan, tol: f64) -> TradePlan {
    for v in plan.phi0.iter_mut().chain(plan.phi1.iter_mut()) {
        if *v < 0.0 && *v >= -tol {
            *v = 0.0;
        }
    }
    plan
}

/// Result of the exhaustive grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForceResult {
    pub value: f64,
    /// Grid spacing (in trade-fraction units) at the last refinement level.
    pub spacing: f64,
    /// Largest value change between the best point and its grid neighbours
    /// at the last level; bounds how far the grid optimum can sit below the
    /// true optimum.
    pub error_bound: f64,
    pub evaluations: u64,
}

/// Largest number of trade variables the grid search accepts.
pub const BRUTE_FORCE_MAX_VARIABLES: usize = 7;
/// Largest number of grid points per refinement level.
pub const BRUTE_FORCE_MAX_POINTS: u64 = 1_000_000;

/// Grid search over net trades, independent of the optimizer.
///
/// Every non-terminal node carries one trade fraction `θ ∈ [-1, 1]`: `θ ≥ 0`
/// spends that fraction of the pre-trade cash on stock at the ask, `θ < 0`
/// sells that fraction of the pre-trade shares at the bid. The box maps onto
/// the feasible set of wash-free plans, so every grid point is admissible.
/// The search evaluates a full grid of `grid_steps` points per variable, then
/// shrinks the box around the best point and repeats.
pub fn brute_force_primal(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    grid_steps: usize,
) -> Result<BruteForceResult> {
    let internal: Vec<usize> = tree.internal_nodes().collect();
    let k = internal.len();
    if tree.horizon_steps() > 2 || k > BRUTE_FORCE_MAX_VARIABLES {
        return Err(Error::InstanceTooLarge(alloc::format!(
            "grid search handles at most 2 periods and {BRUTE_FORCE_MAX_VARIABLES} trade variables (got {} periods, {k} variables)",
            tree.horizon_steps()
        )));
    }
    if grid_steps < 5 {
        return Err(Error::InvalidParameter("grid search needs at least 5 points per variable".into()));
    }
    let per_level = (grid_steps as f64).powi(k as i32);
    if per_level > BRUTE_FORCE_MAX_POINTS as f64 {
        return Err(Error::InstanceTooLarge(alloc::format!(
            "{grid_steps}^{k} grid points exceed {BRUTE_FORCE_MAX_POINTS}"
        )));
    }

    let probs = tree.node_probabilities();
    let lambda = tree.lambda();
    let evaluate = |theta: &[f64]| -> f64 {
        let mut holdings = vec![(0.0, 0.0); tree.len()];
        let mut total = 0.0;
        for n in 0..tree.len() {
            let (p0, p1) = match tree.parent(n) {
                Some(p) => holdings[p],
                None => (endow.x, 0.0),
            };
            let s = tree.price(n);
            if tree.is_leaf(n) {
                let u = utility.evaluate(p0 + (1.0 - lambda) * s * p1 + endow.at(n));
                if u == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                total += probs[n] * u;
            } else {
                let i = internal.iter().position(|&m| m == n).unwrap();
                let th = theta[i];
                holdings[n] = if th >= 0.0 {
                    let bought = th * p0 / s;
                    (p0 - th * p0, p1 + bought)
                } else {
                    let sold = -th * p1;
                    (p0 + (1.0 - lambda) * s * sold, p1 - sold)
                };
            }
        }
        total
    };

    if k == 0 {
        let v = evaluate(&[]);
        return Ok(BruteForceResult { value: v, spacing: 0.0, error_bound: 0.0, evaluations: 1 });
    }

    let mut center = vec![0.0; k];
    let mut half = 1.0;
    let mut best = (f64::NEG_INFINITY, center.clone());
    let mut evaluations = 0u64;
    let mut spacing = 2.0 / (grid_steps - 1) as f64;
    let mut error_bound = f64::INFINITY;
    let mut theta = vec![0.0; k];
    let mut index = vec![0usize; k];
    for _level in 0..200 {
        let lo: Vec<f64> = center.iter().map(|c| (c - half).max(-1.0)).collect();
        let hi: Vec<f64> = center.iter().map(|c| (c + half).min(1.0)).collect();
        spacing = (0..k).map(|i| (hi[i] - lo[i]) / (grid_steps - 1) as f64).fold(0.0, f64::max);
        index.iter_mut().for_each(|v| *v = 0);
        loop {
            for i in 0..k {
                theta[i] = lo[i] + (hi[i] - lo[i]) * index[i] as f64 / (grid_steps - 1) as f64;
            }
            let v = evaluate(&theta);
            evaluations += 1;
            if v > best.0 {
                best = (v, theta.clone());
            }
            // odometer increment
            let mut i = 0;
            while i < k {
                index[i] += 1;
                if index[i] < grid_steps {
                    break;
                }
                index[i] = 0;
                i += 1;
            }
            if i == k {
                break;
            }
        }

        error_bound = 0.0;
        for i in 0..k {
            for d in [-spacing, spacing] {
                let mut probe = best.1.clone();
                probe[i] = (probe[i] + d).clamp(-1.0, 1.0);
                let v = evaluate(&probe);
                if v.is_finite() {
                    error_bound = f64::max(error_bound, (best.0 - v).abs());
                }
            }
        }
        center.clone_from(&best.1);
        half = 2.0 * spacing;
        if spacing < 1e-12 {
            break;
        }
    }
    Ok(BruteForceResult { value: best.0, spacing, error_bound, evaluations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NegativeBuy,
    NegativeSell,
    NegativeBond,
    NegativeStock,
    SelfFinancingBond,
    SelfFinancingStock,
    TerminalStock,
    TerminalBuy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub node: String,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

/// Every constraint of the admissible set that `plan` breaks, checked
/// independently of the optimizer with tolerance `tol` on holdings.
pub fn check_admissible(tree: &ScenarioTree, plan: &TradePlan, endow: &EndowmentSpec, tol: f64) -> Vec<Violation> {
    let lambda = tree.lambda();
    let mut out = Vec::new();
    let mut flag = |n: usize, kind: ViolationKind, magnitude: f64| {
        if magnitude > tol {
            out.push(Violation { node: tree.node(n).id.clone(), kind, magnitude });
        }
    };
    for n in 0..tree.len() {
        let (p0, p1) = match tree.parent(n) {
            Some(p) => (plan.phi0[p], plan.phi1[p]),
            None => (endow.x, 0.0),
        };
        let s = tree.price(n);
        let (b, sl) = (plan.buy[n], plan.sell[n]);
        flag(n, ViolationKind::NegativeBuy, -b);
        flag(n, ViolationKind::NegativeSell, -sl);
        flag(n, ViolationKind::NegativeBond, -plan.phi0[n]);
        flag(n, ViolationKind::NegativeStock, -plan.phi1[n]);
        let bond = p0 - s * b + (1.0 - lambda) * s * sl;
        flag(n, ViolationKind::SelfFinancingBond, (plan.phi0[n] - bond).abs());
        flag(n, ViolationKind::SelfFinancingStock, (plan.phi1[n] - (p1 + b - sl)).abs());
        if tree.is_leaf(n) {
            flag(n, ViolationKind::TerminalStock, plan.phi1[n].abs());
            flag(n, ViolationKind::TerminalBuy, b.abs());
        }
    }
    out
}

/// Random admissible plan: at each node a uniform trade fraction in [-1, 1]
/// (positive buys that fraction of cash, negative sells that fraction of
/// shares).
pub fn random_admissible_plan<R: Rng + ?Sized>(tree: &ScenarioTree, x: f64, rng: &mut R) -> TradePlan {
    let lambda = tree.lambda();
    let mut buy = vec![0.0; tree.len()];
    let mut sell = vec![0.0; tree.len()];
    let mut holdings = vec![(0.0, 0.0); tree.len()];
    for n in tree.internal_nodes() {
        let (p0, p1) = match tree.parent(n) {
            Some(p) => holdings[p],
            None => (x, 0.0),
        };
        let s = tree.price(n);
        let th: f64 = rng.gen_range(-1.0..=1.0);
        if th >= 0.0 {
            buy[n] = th * p0 / s;
            holdings[n] = (p0 - th * p0, p1 + buy[n]);
        } else {
            sell[n] = -th * p1;
            holdings[n] = (p0 + (1.0 - lambda) * s * sell[n], p1 - sell[n]);
        }
    }
    TradePlan::from_trades(tree, x, &buy, &sell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::build_binomial;
    use crate::market::{NodeRecord, ScenarioTree};

    fn paper_tree(lambda: f64) -> ScenarioTree {
        build_binomial(1.0, 2.0, 0.5, 0.5, 1, lambda).unwrap()
    }

    fn martingale_tree(lambda: f64) -> ScenarioTree {
        let records = vec![
            NodeRecord { id: "r".into(), parent: None, t: 0, price: 1.0, prob: 1.0 },
            NodeRecord { id: "u".into(), parent: Some("r".into()), t: 1, price: 2.0, prob: 1.0 / 3.0 },
            NodeRecord { id: "d".into(), parent: Some("r".into()), t: 1, price: 0.5, prob: 2.0 / 3.0 },
        ];
        ScenarioTree::from_records(lambda, 1, records).unwrap()
    }

    /// Oracle: scan the single root purchase over [0, 1/S₀] in steps of 1e-5.
    fn scan_root_purchase(tree: &ScenarioTree, utility: &UtilitySpec, x: f64) -> (f64, f64) {
        let lambda = tree.lambda();
        let s0 = tree.price(0);
        let steps = (x / s0 / 1e-5).round() as usize;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=steps {
            let b = i as f64 * 1e-5;
            let v: f64 = tree
                .children(0)
                .iter()
                .map(|&c| tree.node(c).prob * utility.evaluate(x - s0 * b + (1.0 - lambda) * tree.price(c) * b))
                .sum();
            if v > best.0 {
                best = (v, b);
            }
        }
        best
    }

    #[test]
    fn one_step_matches_scan() {
        let tree = paper_tree(0.01);
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let u = UtilitySpec::Log;
        let report = solve_primal(&tree, &u, &endow, &SolverOptions::default()).unwrap();
        let (v, b) = scan_root_purchase(&tree, &u, 1.0);
        assert!(report.converged);
        assert!((report.value - v).abs() < 1e-4, "{} vs {v}", report.value);
        assert!((report.plan.buy[0] - b).abs() < 1e-4, "{} vs {b}", report.plan.buy[0]);
        let brute = brute_force_primal(&tree, &u, &endow, 201).unwrap();
        assert!((report.value - brute.value).abs() < 1e-4);
    }

    #[test]
    fn martingale_means_no_trade() {
        for lambda in [0.01, 0.3, 0.9] {
            let tree = martingale_tree(lambda);
            let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
            let report = solve_primal(&tree, &UtilitySpec::Log, &endow, &SolverOptions::default()).unwrap();
            assert!(report.converged);
            assert!(report.value.abs() < 1e-12, "{}", report.value);
            assert!(report.plan.buy.iter().chain(&report.plan.sell).all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn huge_costs_mean_no_trade() {
        let tree = paper_tree(0.99);
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let report = solve_primal(&tree, &UtilitySpec::Log, &endow, &SolverOptions::default()).unwrap();
        assert!(report.value.abs() < 1e-12);
        assert!(report.plan.buy[0] < 1e-9);
    }

    #[test]
    fn leaf_conditional_value_is_forced_liquidation() {
        let tree = paper_tree(0.01);
        let endow = EndowmentSpec::new(&tree, 1.0, [("ru", 0.3)]).unwrap();
        let leaf = tree.index_of("ru").unwrap();
        let v = conditional_value(&tree, &UtilitySpec::Log, &endow, leaf, 0.2, 0.5, &SolverOptions::default()).unwrap();
        assert_eq!(v, (0.2 + 0.99 * 2.0 * 0.5 + 0.3f64).ln());
    }

    #[test]
    fn root_conditional_value_is_the_primal_value() {
        let tree = build_binomial(1.0, 1.2, 0.85, 0.55, 2, 0.02).unwrap();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let opts = SolverOptions::default();
        let report = solve_primal(&tree, &UtilitySpec::Log, &endow, &opts).unwrap();
        let v = conditional_value(&tree, &UtilitySpec::Log, &endow, 0, 1.0, 0.0, &opts).unwrap();
        assert!((v - report.value).abs() < 1e-12);
    }

    #[test]
    fn conditional_value_increases_in_holdings() {
        let tree = build_binomial(1.0, 1.2, 0.85, 0.55, 2, 0.02).unwrap();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let opts = SolverOptions::default();
        for node in [0, 1, 2] {
            let base = conditional_value(&tree, &UtilitySpec::Log, &endow, node, 0.6, 0.3, &opts).unwrap();
            let more_bond = conditional_value(&tree, &UtilitySpec::Log, &endow, node, 0.61, 0.3, &opts).unwrap();
            let more_stock = conditional_value(&tree, &UtilitySpec::Log, &endow, node, 0.6, 0.31, &opts).unwrap();
            assert!(more_bond > base && more_stock > base);
        }
        assert!(matches!(
            conditional_value(&tree, &UtilitySpec::Log, &endow, 0, -1.0, 0.0, &opts),
            Err(Error::NegativeHoldings { .. })
        ));
    }

    #[test]
    fn admissibility_diagnostics() {
        let tree = paper_tree(0.01);
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        assert!(check_admissible(&tree, &TradePlan::hold_only(&tree, 1.0), &endow, 1e-9).is_empty());

        let mut buy = vec![0.0; tree.len()];
        buy[0] = 2.0;
        let plan = TradePlan::from_trades(&tree, 1.0, &buy, &vec![0.0; tree.len()]);
        let v = check_admissible(&tree, &plan, &endow, 1e-9);
        let root_bond: Vec<_> =
            v.iter().filter(|v| v.node == "r" && v.kind == ViolationKind::NegativeBond).collect();
        assert_eq!(root_bond.len(), 1);
        assert!((root_bond[0].magnitude - 1.0).abs() < 1e-15);

        let report = solve_primal(&tree, &UtilitySpec::Log, &endow, &SolverOptions::default()).unwrap();
        assert!(check_admissible(&tree, &report.plan, &endow, 1e-9).is_empty());
    }

    #[test]
    fn brute_force_guards() {
        let deep = build_binomial(1.0, 1.2, 0.85, 0.5, 3, 0.01).unwrap();
        let endow = EndowmentSpec::zero(&deep, 1.0).unwrap();
        assert!(matches!(
            brute_force_primal(&deep, &UtilitySpec::Log, &endow, 10),
            Err(Error::InstanceTooLarge(_))
        ));

        let tree = build_binomial(1.0, 1.2, 0.85, 0.5, 1, 0.999999).unwrap();
        let endow = EndowmentSpec::new(&tree, 1.0, [("ru", 0.2), ("rd", 0.4)]).unwrap();
        let floor: f64 = tree
            .leaves()
            .map(|l| tree.path_probability(l) * UtilitySpec::Log.evaluate(1.0 + endow.at(l)))
            .sum();
        let brute = brute_force_primal(&tree, &UtilitySpec::Log, &endow, 101).unwrap();
        assert!(brute.value >= floor - 1e-15);
    }

    #[test]
    fn random_plans_are_admissible() {
        use rand::SeedableRng;
        let tree = build_binomial(1.0, 1.3, 0.8, 0.5, 3, 0.05).unwrap();
        let endow = EndowmentSpec::zero(&tree, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let plan = random_admissible_plan(&tree, 1.0, &mut rng);
            assert!(check_admissible(&tree, &plan, &endow, 1e-12).is_empty());
        }
    }
}

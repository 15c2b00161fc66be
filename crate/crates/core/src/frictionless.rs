//! The constrained frictionless problem on the same tree: the stock trades
//! at a single price `S^Z_n` per node, both holdings stay nonnegative, and
//! terminal wealth is the liquidation value plus the endowment.
//!
//! The decision vector holds the post-trade stock position `θ_n` at every
//! non-terminal node. The bond position follows from zero-cost rebalancing,
//!
//! ```text
//! φ̃⁰_n = φ̃⁰_parent − S^Z_n (θ_n − θ_parent)
//! ```
//!
//! starting from `(x, 0)` before the root trade.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::friction::{SolveReport, TradePlan};
use crate::market::{EndowmentSpec, ScenarioTree};
use crate::program::{ConcaveProgram, SolverOptions};
use crate::utility::UtilitySpec;

/// Candidate frictionless price per node, indexed like the tree's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceAssignment {
    pub s_z: Vec<f64>,
}

impl PriceAssignment {
    pub fn new(tree: &ScenarioTree, s_z: Vec<f64>) -> Result<Self> {
        if s_z.len() != tree.len() {
            return Err(Error::InvalidPrices(alloc::format!(
                "{} prices for a tree with {} nodes",
                s_z.len(),
                tree.len()
            )));
        }
        if let Some(n) = s_z.iter().position(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::InvalidPrices(alloc::format!(
                "price {} at node {} is not positive",
                s_z[n],
                tree.node(n).id
            )));
        }
        Ok(PriceAssignment { s_z })
    }

    pub fn ask(tree: &ScenarioTree) -> Self {
        PriceAssignment { s_z: (0..tree.len()).map(|n| tree.ask(n)).collect() }
    }

    pub fn bid(tree: &ScenarioTree) -> Self {
        PriceAssignment { s_z: (0..tree.len()).map(|n| tree.bid(n)).collect() }
    }

    /// Uniform draw inside `[(1 − λ) S_n, S_n]` at every node.
    pub fn random_in_spread<R: Rng + ?Sized>(tree: &ScenarioTree, rng: &mut R) -> Self {
        let s_z = (0..tree.len()).map(|n| rng.gen_range(tree.bid(n)..=tree.ask(n))).collect();
        PriceAssignment { s_z }
    }

    /// First node whose price leaves the spread by more than `rel_tol · S_n`.
    pub fn check_spread(&self, tree: &ScenarioTree, rel_tol: f64) -> Result<()> {
        for n in 0..tree.len() {
            let (bid, ask) = (tree.bid(n), tree.ask(n));
            let p = self.s_z[n];
            let slack = rel_tol * ask;
            if p < bid - slack || p > ask + slack {
                return Err(Error::OutsideSpread { id: tree.node(n).id.clone(), price: p, bid, ask });
            }
        }
        Ok(())
    }
}

/// Frictionless holdings after trading, indexed like the tree's nodes; leaves
/// hold only bond.
#[derive(Debug, Clone, PartialEq)]
pub struct FrictionlessPlan {
    pub phi0: Vec<f64>,
    pub phi1: Vec<f64>,
}

impl FrictionlessPlan {
    /// Holdings generated by post-trade stock positions `theta` (ignored at
    /// leaves, which liquidate).
    #[allow(clippy::needless_range_loop)]
    pub fn from_positions(tree: &ScenarioTree, prices: &PriceAssignment, x: f64, theta: &[f64]) -> Self {
        let n = tree.len();
        let mut plan = FrictionlessPlan { phi0: vec![0.0; n], phi1: vec![0.0; n] };
        for k in 0..n {
            let (p0, p1) = match tree.parent(k) {
                Some(p) => (plan.phi0[p], plan.phi1[p]),
                None => (x, 0.0),
            };
            let target = if tree.is_leaf(k) { 0.0 } else { theta[k] };
            plan.phi0[k] = p0 - prices.s_z[k] * (target - p1);
            plan.phi1[k] = target;
        }
        plan
    }

    /// As a `TradePlan`, with trades read off the position changes.
    pub fn to_trade_plan(&self, tree: &ScenarioTree) -> TradePlan {
        let n = tree.len();
        let mut buy = vec![0.0; n];
        let mut sell = vec![0.0; n];
        for k in 0..n {
            let before = tree.parent(k).map_or(0.0, |p| self.phi1[p]);
            let d = self.phi1[k] - before;
            buy[k] = d.max(0.0);
            sell[k] = (-d).max(0.0);
        }
        TradePlan { buy, sell, phi0: self.phi0.clone(), phi1: self.phi1.clone() }
    }
}

/// Random admissible frictionless plan: at each node a uniform fraction of
/// current wealth is held in stock.
pub fn random_frictionless_plan<R: Rng + ?Sized>(
    tree: &ScenarioTree,
    prices: &PriceAssignment,
    x: f64,
    rng: &mut R,
) -> FrictionlessPlan {
    let mut theta = vec![0.0; tree.len()];
    let mut holdings = vec![(0.0, 0.0); tree.len()];
    for k in tree.internal_nodes() {
        let (p0, p1) = match tree.parent(k) {
            Some(p) => holdings[p],
            None => (x, 0.0),
        };
        let s = prices.s_z[k];
        let wealth = p0 + p1 * s;
        let share: f64 = rng.gen_range(0.0..=1.0);
        theta[k] = share * wealth / s;
        holdings[k] = (wealth - s * theta[k], theta[k]);
    }
    FrictionlessPlan::from_positions(tree, prices, x, &theta)
}

struct FrictionlessLayout {
    internal: Vec<usize>,
    program: ConcaveProgram,
}

impl FrictionlessLayout {
    fn new(tree: &ScenarioTree, prices: &PriceAssignment, utility: &UtilitySpec, endow: &EndowmentSpec) -> Self {
        let internal: Vec<usize> = tree.internal_nodes().collect();
        let mut slot = vec![None; tree.len()];
        for (i, &k) in internal.iter().enumerate() {
            slot[k] = Some(i);
        }
        let dim = internal.len();

        // Bond after trading as an affine form in θ.
        let mut bond: Vec<(DVector<f64>, f64)> = Vec::with_capacity(tree.len());
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut h = Vec::new();
        for k in 0..tree.len() {
            let s = prices.s_z[k];
            let (mut c, k0) = match tree.parent(k) {
                Some(p) => bond[p].clone(),
                None => (DVector::zeros(dim), endow.x),
            };
            // Unwind the parent's position at today's price, then set θ_k.
            if let Some(p) = tree.parent(k) {
                c[slot[p].unwrap()] += s;
            }
            if let Some(i) = slot[k] {
                c[i] -= s;
                let mut g = DVector::zeros(dim);
                g[i] = -1.0;
                rows.push(g);
                h.push(0.0);
            }
            rows.push(-&c);
            h.push(k0);
            bond.push((c, k0));
        }

        let probs = tree.node_probabilities();
        let leaves: Vec<usize> = tree.leaves().collect();
        let program = ConcaveProgram {
            utility: *utility,
            weights: leaves.iter().map(|&l| probs[l]).collect(),
            wealth_map: DMatrix::from_fn(leaves.len(), dim, |i, j| bond[leaves[i]].0[j]),
            wealth_offset: DVector::from_iterator(leaves.len(), leaves.iter().map(|&l| bond[l].1 + endow.at(l))),
            constraints: DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]),
            bounds: DVector::from_vec(h),
        };
        FrictionlessLayout { internal, program }
    }

    /// Half of the current wealth in stock at every node.
    fn start(&self, tree: &ScenarioTree, prices: &PriceAssignment, x: f64) -> DVector<f64> {
        let mut theta = DVector::zeros(self.internal.len());
        let mut holdings = vec![(0.0, 0.0); tree.len()];
        for (i, &k) in self.internal.iter().enumerate() {
            let (p0, p1) = match tree.parent(k) {
                Some(p) => holdings[p],
                None => (x, 0.0),
            };
            let s = prices.s_z[k];
            let wealth = p0 + p1 * s;
            theta[i] = 0.5 * wealth / s;
            holdings[k] = (0.5 * wealth, theta[i]);
        }
        theta
    }
}

/// Solve the constrained frictionless problem at prices `S^Z`.
pub fn solve_frictionless(
    tree: &ScenarioTree,
    prices: &PriceAssignment,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    if !(endow.x > 0.0) {
        return Err(Error::NonPositiveWealth(endow.x));
    }
    let prices = PriceAssignment::new(tree, prices.s_z.clone())?;
    let layout = FrictionlessLayout::new(tree, &prices, utility, endow);
    let sol = layout.program.solve(layout.start(tree, &prices, endow.x), opts)?;

    let mut theta = vec![0.0; tree.len()];
    for (i, &k) in layout.internal.iter().enumerate() {
        theta[k] = sol.x[i].max(0.0);
    }
    let mut plan = FrictionlessPlan::from_positions(tree, &prices, endow.x, &theta);
    for v in plan.phi0.iter_mut() {
        if *v < 0.0 && *v >= -opts.feasibility_tolerance {
            *v = 0.0;
        }
    }
    let probs = tree.node_probabilities();
    let mut value = 0.0;
    for l in tree.leaves() {
        value += probs[l] * utility.evaluate(plan.phi0[l] + endow.at(l));
    }
    Ok(SolveReport {
        value,
        plan: plan.to_trade_plan(tree),
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        converged: sol.converged,
        duals: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominanceReport {
    pub frictionless_value: f64,
    pub frictional_value: f64,
    /// `u^Z − u`.
    pub gap: f64,
    /// `u^Z ≥ u − tolerance`.
    pub dominates: bool,
}

/// Compare the frictionless value at `prices` with a frictional value.
/// Refuses prices outside the spread, since the comparison proves nothing
/// there.
pub fn dominance_check(
    tree: &ScenarioTree,
    utility: &UtilitySpec,
    endow: &EndowmentSpec,
    prices: &PriceAssignment,
    frictional_value: f64,
    opts: &SolverOptions,
) -> Result<DominanceReport> {
    prices.check_spread(tree, 1e-8)?;
    let report = solve_frictionless(tree, prices, utility, endow, opts)?;
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.iterations, residual: report.kkt_residual });
    }
    let gap = report.value - frictional_value;
    Ok(DominanceReport {
        frictionless_value: report.value,
        frictional_value,
        gap,
        dominates: gap >= -1e-9,
    })
}

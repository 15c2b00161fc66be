//! Finite discrete-time market: a path-distinct event tree carrying stock
//! prices, conditional transition probabilities and the transaction-cost
//! level, plus the agent's endowment.
//!
//! The bond is the numéraire and is worth 1 at every node. Buying stock at a
//! node costs the ask `S_n`, selling it yields the bid `(1 - λ) S_n`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // unused when std's float methods are in scope
use num_traits::Float;

use crate::error::{Error, Result};

/// Children probabilities must sum to one within this tolerance.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-12;

/// Upper bound on lattice depth for the builders.
pub const MAX_LATTICE_STEPS: usize = 12;

/// Upper bound on the number of leaves the builders will generate.
pub const MAX_LATTICE_LEAVES: usize = 1 << MAX_LATTICE_STEPS;

/// Raw node description, as found in a tree document.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: String,
    pub parent: Option<String>,
    pub t: usize,
    pub price: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub time_index: usize,
    pub parent: Option<usize>,
    pub price: f64,
    /// Probability of reaching this node from its parent (1 at the root).
    pub prob: f64,
}

/// Validated event tree. Nodes are stored in breadth-first order, so the root
/// has index 0 and every parent precedes its children.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    nodes: Vec<Node>,
    children: Vec<Vec<usize>>,
    index: BTreeMap<String, usize>,
    horizon_steps: usize,
    lambda: f64,
}

impl ScenarioTree {
    pub fn from_records(lambda: f64, horizon_steps: usize, records: Vec<NodeRecord>) -> Result<Self> {
        if horizon_steps < 1 {
            return Err(Error::HorizonTooShort(horizon_steps));
        }
        check_lambda(lambda)?;

        let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
        let mut root: Option<usize> = None;
        for (k, rec) in records.iter().enumerate() {
            if !(rec.price > 0.0) || !rec.price.is_finite() {
                return Err(Error::NonPositivePrice { id: rec.id.clone(), price: rec.price });
            }
            if !(rec.prob > 0.0 && rec.prob <= 1.0) {
                return Err(Error::InvalidProbability { id: rec.id.clone(), prob: rec.prob });
            }
            if by_id.insert(rec.id.clone(), k).is_some() {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
            if rec.parent.is_none() {
                if let Some(r) = root {
                    return Err(Error::MultipleRoots(records[r].id.clone(), rec.id.clone()));
                }
                root = Some(k);
            }
        }
        let root = root.ok_or(Error::NoRoot)?;
        if records[root].t != 0 {
            return Err(Error::TimeIndex { id: records[root].id.clone(), t: records[root].t });
        }

        let mut raw_children: Vec<Vec<usize>> = vec![Vec::new(); records.len()];
        for (k, rec) in records.iter().enumerate() {
            if let Some(p) = &rec.parent {
                let pk = *by_id.get(p).ok_or_else(|| Error::Orphan(rec.id.clone()))?;
                if rec.t != records[pk].t + 1 {
                    return Err(Error::TimeIndex { id: rec.id.clone(), t: rec.t });
                }
                raw_children[pk].push(k);
            }
        }

        // Breadth-first relabelling; time indices strictly increase along
        // edges, so there are no cycles and every node reaches the root.
        let mut order = Vec::with_capacity(records.len());
        let mut new_index = vec![usize::MAX; records.len()];
        order.push(root);
        new_index[root] = 0;
        let mut head = 0;
        while head < order.len() {
            let k = order[head];
            head += 1;
            for &c in &raw_children[k] {
                new_index[c] = order.len();
                order.push(c);
            }
        }
        if let Some(k) = new_index.iter().position(|&i| i == usize::MAX) {
            return Err(Error::Unreachable(records[k].id.clone()));
        }

        let mut nodes = Vec::with_capacity(order.len());
        let mut children = vec![Vec::new(); order.len()];
        for &k in &order {
            let rec = &records[k];
            let parent = rec.parent.as_ref().map(|p| new_index[by_id[p]]);
            let prob = if parent.is_some() { rec.prob } else { 1.0 };
            nodes.push(Node { id: rec.id.clone(), time_index: rec.t, parent, price: rec.price, prob });
            children[new_index[k]] = raw_children[k].iter().map(|&c| new_index[c]).collect();
        }

        for (n, node) in nodes.iter().enumerate() {
            if children[n].is_empty() {
                if node.time_index != horizon_steps {
                    return Err(Error::LeafBeforeHorizon {
                        id: node.id.clone(),
                        t: node.time_index,
                        horizon: horizon_steps,
                    });
                }
            } else {
                let sum: f64 = children[n].iter().map(|&c| nodes[c].prob).sum();
                if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                    return Err(Error::ProbabilitySum { id: node.id.clone(), sum: round12(sum) });
                }
            }
        }

        let index = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        Ok(ScenarioTree { nodes, children, index, horizon_steps, lambda })
    }

    /// Records describing this tree, in storage order.
    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id.clone(),
                parent: n.parent.map(|p| self.nodes[p].id.clone()),
                t: n.time_index,
                price: n.price,
                prob: n.prob,
            })
            .collect()
    }

    /// Same tree with a different transaction-cost level.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(ScenarioTree { lambda, ..self.clone() })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn horizon_steps(&self) -> usize {
        self.horizon_steps
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, n: usize) -> &Node {
        &self.nodes[n]
    }

    pub fn price(&self, n: usize) -> f64 {
        self.nodes[n].price
    }

    pub fn parent(&self, n: usize) -> Option<usize> {
        self.nodes[n].parent
    }

    pub fn children(&self, n: usize) -> &[usize] {
        &self.children[n]
    }

    pub fn is_leaf(&self, n: usize) -> bool {
        self.children[n].is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&n| self.is_leaf(n))
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&n| !self.is_leaf(n))
    }

    /// Nodes of the subtree rooted at `n`, parents before children.
    pub fn subtree(&self, n: usize) -> Vec<usize> {
        let mut out = vec![n];
        let mut head = 0;
        while head < out.len() {
            let k = out[head];
            head += 1;
            out.extend_from_slice(&self.children[k]);
        }
        out
    }

    /// Unconditional probability of reaching `n` from the root.
    pub fn path_probability(&self, n: usize) -> f64 {
        let mut p = 1.0;
        let mut k = n;
        while let Some(parent) = self.nodes[k].parent {
            p *= self.nodes[k].prob;
            k = parent;
        }
        p
    }

    /// Unconditional probabilities of every node, computed top-down.
    pub fn node_probabilities(&self) -> Vec<f64> {
        let mut p = vec![1.0; self.nodes.len()];
        for n in 1..self.nodes.len() {
            let parent = self.nodes[n].parent.expect("non-root node has a parent");
            p[n] = p[parent] * self.nodes[n].prob;
        }
        p
    }

    pub fn bid(&self, n: usize) -> f64 {
        (1.0 - self.lambda) * self.nodes[n].price
    }

    pub fn ask(&self, n: usize) -> f64 {
        self.nodes[n].price
    }

    /// Bid and ask price at the named node.
    pub fn bid_ask(&self, id: &str) -> Result<(f64, f64)> {
        let n = self.index_of(id)?;
        Ok((self.bid(n), self.ask(n)))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::LambdaOutOfRange(lambda))
    }
}

fn round12(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

/// Path-distinct recombining-value lattice: each node has one child per
/// factor, priced `parent · factor`, reached with the matching probability.
/// Child ids append one label character per branch to the parent id.
pub fn build_lattice(
    s0: f64,
    factors: &[f64],
    probs: &[f64],
    labels: &[char],
    steps: usize,
    lambda: f64,
) -> Result<ScenarioTree> {
    if factors.is_empty() || factors.len() != probs.len() || factors.len() != labels.len() {
        return Err(Error::InvalidLattice("factors, probabilities and labels must have equal nonzero length"));
    }
    if steps > MAX_LATTICE_STEPS {
        return Err(Error::TooManySteps { steps, max: MAX_LATTICE_STEPS });
    }
    let leaves = (factors.len() as f64).powi(steps as i32);
    if leaves > MAX_LATTICE_LEAVES as f64 {
        return Err(Error::InstanceTooLarge(format!("{leaves} leaves exceed {MAX_LATTICE_LEAVES}")));
    }
    if !(s0 > 0.0) || factors.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidLattice("prices and factors must be positive"));
    }

    let mut records = vec![NodeRecord { id: "r".into(), parent: None, t: 0, price: s0, prob: 1.0 }];
    let mut frontier = vec![0usize];
    for t in 1..=steps {
        let mut next = Vec::with_capacity(frontier.len() * factors.len());
        for &k in &frontier {
            let (pid, price) = (records[k].id.clone(), records[k].price);
            for ((&f, &p), &label) in factors.iter().zip(probs).zip(labels) {
                let mut id = pid.clone();
                id.push(label);
                next.push(records.len());
                records.push(NodeRecord { id, parent: Some(pid.clone()), t, price: price * f, prob: p });
            }
        }
        frontier = next;
    }
    ScenarioTree::from_records(lambda, steps, records)
}

/// Binomial fixture: `2^steps` leaves, node price `s0 · up^#ups · down^#downs`.
pub fn build_binomial(s0: f64, up: f64, down: f64, p_up: f64, steps: usize, lambda: f64) -> Result<ScenarioTree> {
    if !(up > 1.0) {
        return Err(Error::InvalidLattice("up factor must exceed 1"));
    }
    if !(down > 0.0 && down < 1.0) {
        return Err(Error::InvalidLattice("down factor must lie in (0, 1)"));
    }
    if !(p_up > 0.0 && p_up < 1.0) {
        return Err(Error::InvalidLattice("up probability must lie in (0, 1)"));
    }
    build_lattice(s0, &[up, down], &[p_up, 1.0 - p_up], &['u', 'd'], steps, lambda)
}

/// Deterministic initial wealth `x > 0` plus a nonnegative terminal payoff per
/// leaf. Stored per node index; internal nodes carry 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EndowmentSpec {
    pub x: f64,
    e: Vec<f64>,
}

impl EndowmentSpec {
    /// Leaves without an entry receive zero endowment.
    pub fn new<I, S>(tree: &ScenarioTree, x: f64, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: AsRef<str>,
    {
        let mut e = vec![0.0; tree.len()];
        for (id, value) in entries {
            let n = tree.index_of(id.as_ref())?;
            if !tree.is_leaf(n) {
                return Err(Error::NotALeaf(id.as_ref().to_string()));
            }
            e[n] = value;
        }
        Self::from_node_values(tree, x, e)
    }

    pub fn zero(tree: &ScenarioTree, x: f64) -> Result<Self> {
        Self::from_node_values(tree, x, vec![0.0; tree.len()])
    }

    /// Endowment indexed by node; entries at internal nodes must be zero.
    pub fn from_node_values(tree: &ScenarioTree, x: f64, e: Vec<f64>) -> Result<Self> {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::NonPositiveWealth(x));
        }
        if e.len() != tree.len() {
            return Err(Error::InvalidParameter(format!(
                "endowment has {} entries for {} nodes",
                e.len(),
                tree.len()
            )));
        }
        for (n, &v) in e.iter().enumerate() {
            let id = &tree.node(n).id;
            if !v.is_finite() {
                return Err(Error::NonFiniteEndowment { id: id.clone() });
            }
            if v < 0.0 {
                return Err(Error::NegativeEndowment { id: id.clone(), value: v });
            }
            if v != 0.0 && !tree.is_leaf(n) {
                return Err(Error::NotALeaf(id.clone()));
            }
        }
        Ok(EndowmentSpec { x, e })
    }

    /// Same terminal payoff, different initial wealth.
    pub fn with_x(&self, x: f64) -> Result<Self> {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::NonPositiveWealth(x));
        }
        Ok(EndowmentSpec { x, e: self.e.clone() })
    }

    /// Terminal endowment at node `n` (0 off the leaves).
    pub fn at(&self, n: usize) -> f64 {
        self.e[n]
    }

    pub fn values(&self) -> &[f64] {
        &self.e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn one_step_records(p_up: f64, p_down: f64) -> Vec<NodeRecord> {
        vec![
            NodeRecord { id: "r".into(), parent: None, t: 0, price: 1.0, prob: 1.0 },
            NodeRecord { id: "u".into(), parent: Some("r".into()), t: 1, price: 2.0, prob: p_up },
            NodeRecord { id: "d".into(), parent: Some("r".into()), t: 1, price: 0.5, prob: p_down },
        ]
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let records = vec![NodeRecord { id: "r".into(), parent: None, t: 0, price: 1.0, prob: 1.0 }];
        let err = ScenarioTree::from_records(0.01, 0, records).unwrap_err();
        assert_eq!(err, Error::HorizonTooShort(0));
        assert!(err.to_string().contains("horizon must be ≥ 1"));
    }

    #[test]
    fn smallest_valid_tree() {
        let tree = ScenarioTree::from_records(0.01, 1, one_step_records(0.5, 0.5)).unwrap();
        assert_eq!(tree.len(), 3);
        assert_eq!(tree.children(0).len(), 2);
        assert_eq!(tree.leaves().count(), 2);
    }

    #[test]
    fn probabilities_must_sum_to_one() {
        let err = ScenarioTree::from_records(0.01, 1, one_step_records(0.6, 0.3)).unwrap_err();
        assert!(err.to_string().contains("probabilities sum to 0.9"), "{err}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut recs = one_step_records(0.5, 0.5);
        recs[1].price = 0.0;
        assert!(matches!(
            ScenarioTree::from_records(0.01, 1, recs),
            Err(Error::NonPositivePrice { .. })
        ));

        let mut recs = one_step_records(0.5, 0.5);
        recs[2].parent = Some("ghost".into());
        assert_eq!(ScenarioTree::from_records(0.01, 1, recs), Err(Error::Orphan("d".into())));

        for lambda in [0.0, 1.0, -0.1, 1.5] {
            assert_eq!(
                ScenarioTree::from_records(lambda, 1, one_step_records(0.5, 0.5)),
                Err(Error::LambdaOutOfRange(lambda))
            );
        }

        let recs = one_step_records(0.5, 0.5);
        assert!(matches!(ScenarioTree::from_records(0.01, 2, recs), Err(Error::LeafBeforeHorizon { .. })));
    }

    #[test]
    fn binomial_builder() {
        let tree = build_binomial(1.0, 2.0, 0.5, 0.5, 1, 0.01).unwrap();
        let mut leaf_prices: Vec<f64> = tree.leaves().map(|n| tree.price(n)).collect();
        leaf_prices.sort_by(f64::total_cmp);
        assert_eq!(leaf_prices, vec![0.5, 2.0]);

        let tree = build_binomial(100.0, 1.1, 0.9, 0.5, 2, 0.05).unwrap();
        let mut leaf_prices: Vec<f64> = tree.leaves().map(|n| tree.price(n)).collect();
        leaf_prices.sort_by(f64::total_cmp);
        let expected = [81.0, 99.0, 99.0, 121.0];
        assert_eq!(leaf_prices.len(), 4);
        for (got, want) in leaf_prices.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }

        assert!(matches!(
            build_binomial(1.0, 2.0, 0.5, 0.5, 13, 0.01),
            Err(Error::TooManySteps { steps: 13, .. })
        ));
    }

    #[test]
    fn bid_ask_quotes() {
        let tree = build_binomial(1.0, 2.0, 0.5, 0.5, 1, 0.01).unwrap();
        let (bid, ask) = tree.bid_ask("ru").unwrap();
        assert!((bid - 1.98).abs() < 1e-15 && ask == 2.0);

        let tree = build_binomial(1.0, 2.0, 0.5, 0.5, 1, 0.5).unwrap();
        assert_eq!(tree.bid_ask("r").unwrap(), (0.5, 1.0));

        let tree = build_binomial(2.0, 2.0, 0.5, 0.5, 1, 1e-12).unwrap();
        let (bid, ask) = tree.bid_ask("r").unwrap();
        assert!((bid - 2.0).abs() <= 1e-11 && ask == 2.0 && bid < ask);

        assert_eq!(tree.bid_ask("nope"), Err(Error::UnknownNode("nope".into())));
    }

    #[test]
    fn endowment_validation() {
        let tree = build_binomial(1.0, 2.0, 0.5, 0.5, 1, 0.01).unwrap();
        let e = EndowmentSpec::new(&tree, 1.0, [("ru", 0.25)]).unwrap();
        assert_eq!(e.at(tree.index_of("ru").unwrap()), 0.25);
        assert_eq!(e.at(tree.index_of("rd").unwrap()), 0.0);
        assert!(matches!(EndowmentSpec::new(&tree, 1.0, [("ru", -0.1)]), Err(Error::NegativeEndowment { .. })));
        assert!(matches!(EndowmentSpec::new(&tree, 1.0, [("r", 0.1)]), Err(Error::NotALeaf(_))));
        assert_eq!(EndowmentSpec::zero(&tree, 0.0), Err(Error::NonPositiveWealth(0.0)));
    }
}

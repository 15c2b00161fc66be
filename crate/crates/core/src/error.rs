use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("horizon must be ≥ 1 (got {0})")]
    HorizonTooShort(usize),
    #[error("transaction cost level {0} is outside (0, 1)")]
    LambdaOutOfRange(f64),
    #[error("node {id}: price {price} is not strictly positive")]
    NonPositivePrice { id: String, price: f64 },
    #[error("node {id}: probability {prob} is outside (0, 1]")]
    InvalidProbability { id: String, prob: f64 },
    #[error("children of node {id}: probabilities sum to {sum}")]
    ProbabilitySum { id: String, sum: f64 },
    #[error("node {0} refers to a parent that does not exist")]
    Orphan(String),
    #[error("duplicate node id {0}")]
    DuplicateId(String),
    #[error("tree has no root")]
    NoRoot,
    #[error("tree has more than one root ({0} and {1})")]
    MultipleRoots(String, String),
    #[error("node {id}: time index {t} does not follow its parent's")]
    TimeIndex { id: String, t: usize },
    #[error("leaf {id} sits at time {t}, expected the horizon {horizon}")]
    LeafBeforeHorizon { id: String, t: usize, horizon: usize },
    #[error("node {0} is not reachable from the root")]
    Unreachable(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} is not a leaf")]
    NotALeaf(String),
    #[error("invalid lattice parameter: {0}")]
    InvalidLattice(&'static str),
    #[error("{steps} steps exceed the limit of {max}")]
    TooManySteps { steps: usize, max: usize },

    #[error("initial wealth must be positive (got {0})")]
    NonPositiveWealth(f64),
    #[error("leaf {id}: endowment {value} is negative")]
    NegativeEndowment { id: String, value: f64 },
    #[error("endowment value for {id} is not finite")]
    NonFiniteEndowment { id: String },

    #[error("invalid utility parameter: {0}")]
    InvalidUtility(&'static str),
    #[error("argument {0} must be strictly positive")]
    NonPositiveArgument(f64),

    #[error("instance too large: {0}")]
    InstanceTooLarge(String),
    #[error("solver did not converge after {iterations} iterations (kkt residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("holdings must be nonnegative (got a = {a}, b = {b})")]
    NegativeHoldings { a: f64, b: f64 },
    #[error("price assignment: {0}")]
    InvalidPrices(String),
    #[error("prices leave the bid-ask spread at node {id} (price {price}, spread [{bid}, {ask}])")]
    OutsideSpread { id: String, price: f64, bid: f64, ask: f64 },
    #[error("finite-difference step {0} is outside [1e-7, 1e-3]")]
    EpsilonOutOfRange(f64),
    #[error("ill-conditioned marginal at node {id}: extrapolated {extrapolated} vs raw {raw}")]
    IllConditioned { id: String, extrapolated: f64, raw: f64 },
    #[error("constructed pair violates {what} at node {id} by {excess:e}")]
    CpsInvariant { what: &'static str, id: String, excess: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown strategy descriptor {0}")]
    UnknownStrategy(String),
}

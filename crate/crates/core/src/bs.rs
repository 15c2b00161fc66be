//! Black–Scholes market frozen after `T/2` with the negative endowment
//! `e_T = −β (1 − λ) S_{T/2}`, `β` uniform on (0, 1) and independent of the
//! price path.
//!
//! On `[0, T/2]` the price is `S_t = exp(B_t + t/2)`; afterwards it stays at
//! `S_{T/2}`. Buying one share at `S_0 = 1` and selling it at the bid at `T/2`
//! is optimal, and
//!
//! ```text
//! S̃_t = S_t (1 − λ)^{2t/T}   on [0, T/2],    S̃_t = (1 − λ) S_{T/2}   after
//! ```
//!
//! is a shadow price for it. The module samples paths exactly, evaluates that
//! strategy under both prices, and probes alternatives for a ruinous
//! terminal position.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)] // unused when std's float methods are in scope
use num_traits::Float;
use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::utility::UtilitySpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsParams {
    /// Horizon `T`.
    pub horizon: f64,
    pub lambda: f64,
    /// Grid points on `[0, T/2]`, both ends included.
    pub grid_points: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl BsParams {
    pub fn new(horizon: f64, lambda: f64, grid_points: usize, n_paths: usize, seed: u64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::LambdaOutOfRange(lambda));
        }
        if grid_points < 2 {
            return Err(Error::InvalidParameter("the time grid needs at least 2 points".into()));
        }
        if n_paths == 0 {
            return Err(Error::InvalidParameter("at least one path is needed".into()));
        }
        Ok(BsParams { horizon, lambda, grid_points, n_paths, seed })
    }

    pub fn half_horizon(&self) -> f64 {
        0.5 * self.horizon
    }

    /// Uniform grid on `[0, T/2]` with both end points exact.
    pub fn times(&self) -> Vec<f64> {
        let last = self.grid_points - 1;
        let half = self.half_horizon();
        (0..self.grid_points)
            .map(|k| if k == last { half } else { half * k as f64 / last as f64 })
            .collect()
    }

    /// Grid index nearest to `t`, required to lie strictly inside `(0, T/2)`.
    fn interior_index(&self, t: f64) -> Result<usize> {
        let last = self.grid_points - 1;
        let k = (t / self.half_horizon() * last as f64).round();
        if !(k >= 1.0 && k < last as f64) {
            return Err(Error::InvalidParameter(format!(
                "time {t} does not map to an interior point of a {}-point grid on [0, {}]",
                self.grid_points,
                self.half_horizon()
            )));
        }
        Ok(k as usize)
    }
}

/// Prices on the grid and the endowment factor of one path, drawn from two
/// ChaCha20 streams of the seed: `2i` for the Gaussian increments and
/// `2i + 1` for `β`.
pub fn sample_path(params: &BsParams, times: &[f64], i: usize) -> (Vec<f64>, f64) {
    let mut gauss = ChaCha20Rng::seed_from_u64(params.seed);
    gauss.set_stream(2 * i as u64);
    let mut prices = Vec::with_capacity(times.len());
    let mut log_s = 0.0;
    prices.push(1.0);
    for w in times.windows(2) {
        let dt = w[1] - w[0];
        let z: f64 = gauss.sample(StandardNormal);
        log_s += z * dt.sqrt() + 0.5 * dt;
        prices.push(log_s.exp());
    }
    let mut beta_rng = ChaCha20Rng::seed_from_u64(params.seed);
    beta_rng.set_stream(2 * i as u64 + 1);
    let beta: f64 = beta_rng.sample(Open01);
    (prices, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    /// Row-major, one row of `times.len()` prices per path.
    pub s_paths: Vec<f64>,
    pub beta: Vec<f64>,
    pub seed: u64,
}

impl PathEnsemble {
    /// Assemble from per-path samples in path order.
    pub fn from_samples(params: &BsParams, samples: Vec<(Vec<f64>, f64)>) -> Self {
        let times = params.times();
        let mut s_paths = Vec::with_capacity(samples.len() * times.len());
        let mut beta = Vec::with_capacity(samples.len());
        for (prices, b) in samples {
            s_paths.extend_from_slice(&prices);
            beta.push(b);
        }
        PathEnsemble { times, s_paths, beta, seed: params.seed }
    }

    pub fn n_paths(&self) -> usize {
        self.beta.len()
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let g = self.times.len();
        &self.s_paths[i * g..(i + 1) * g]
    }

    /// `S_{T/2}` on path `i`.
    pub fn frozen_price(&self, i: usize) -> f64 {
        self.s_paths[(i + 1) * self.times.len() - 1]
    }

    /// `e_T = −β (1 − λ) S_{T/2}` on path `i`.
    pub fn endowment(&self, i: usize, lambda: f64) -> f64 {
        -self.beta[i] * (1.0 - lambda) * self.frozen_price(i)
    }
}

pub fn simulate_paths(params: &BsParams) -> PathEnsemble {
    let times = params.times();
    let samples = (0..params.n_paths).map(|i| sample_path(params, &times, i)).collect();
    PathEnsemble::from_samples(params, samples)
}

/// Terminal bond holding of buy-hold-sell from `x = 1`: `(1 − λ) S_{T/2}`.
pub fn buy_hold_sell(ensemble: &PathEnsemble, lambda: f64) -> Vec<f64> {
    (0..ensemble.n_paths()).map(|i| (1.0 - lambda) * ensemble.frozen_price(i)).collect()
}

/// `S̃` on the grid, row-major like the ensemble, plus its terminal value.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowPaths {
    pub grid_points: usize,
    pub values: Vec<f64>,
}

impl ShadowPaths {
    pub fn path(&self, i: usize) -> &[f64] {
        &self.values[i * self.grid_points..(i + 1) * self.grid_points]
    }

    /// `S̃_T = S̃_{T/2}`.
    pub fn terminal(&self, i: usize) -> f64 {
        self.values[(i + 1) * self.grid_points - 1]
    }
}

pub fn explicit_shadow(ensemble: &PathEnsemble, params: &BsParams) -> ShadowPaths {
    let g = ensemble.times.len();
    let rate = 2.0 * (1.0 - params.lambda).ln() / params.horizon;
    let mut values = Vec::with_capacity(ensemble.s_paths.len());
    for i in 0..ensemble.n_paths() {
        let path = ensemble.path(i);
        for (k, (&s, &t)) in path.iter().zip(&ensemble.times).enumerate() {
            values.push(if k == 0 {
                s
            } else if k == g - 1 {
                (1.0 - params.lambda) * s
            } else {
                s * (rate * t).exp()
            });
        }
    }
    ShadowPaths { grid_points: g, values }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichReport {
    pub holds: bool,
    pub violations: usize,
    /// Extremes of `ln(S̃_t / S_t)` over all paths and grid times.
    pub min_log_ratio: f64,
    pub max_log_ratio: f64,
    /// `ln(1 − λ)`, the lower end of the admissible range.
    pub lower_bound: f64,
}

/// `(1 − λ) S_t ≤ S̃_t ≤ S_t` at every grid time of every path.
pub fn sandwich_check(ensemble: &PathEnsemble, params: &BsParams) -> SandwichReport {
    let shadow = explicit_shadow(ensemble, params);
    let mut report = SandwichReport {
        holds: true,
        violations: 0,
        min_log_ratio: f64::INFINITY,
        max_log_ratio: f64::NEG_INFINITY,
        lower_bound: (1.0 - params.lambda).ln(),
    };
    for (&s, &st) in ensemble.s_paths.iter().zip(&shadow.values) {
        if st < (1.0 - params.lambda) * s || st > s {
            report.violations += 1;
            report.holds = false;
        }
        let r = (st / s).ln();
        report.min_log_ratio = report.min_log_ratio.min(r);
        report.max_log_ratio = report.max_log_ratio.max(r);
    }
    report
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub standard_error: f64,
    pub n: usize,
}

impl Estimate {
    /// Summed in index order so that equal inputs give equal bits. Any
    /// `-∞` sample makes the mean `-∞`.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if samples.contains(&f64::NEG_INFINITY) {
            return Estimate { mean: f64::NEG_INFINITY, standard_error: f64::INFINITY, n };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Estimate { mean, standard_error: (var / n as f64).sqrt(), n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityReport {
    /// `E[U(φ̂⁰_T + e_T)]` under buy-hold-sell at the frictional prices.
    pub frictional: Estimate,
    /// The same position valued in the frictionless market at `S̃`.
    pub frictionless: Estimate,
    /// Largest path-by-path difference of the two terminal wealths.
    pub max_wealth_difference: f64,
    /// `E[ln(1 − β)] + ln(1 − λ) + T/4 = −1 + ln(1 − λ) + T/4`.
    pub closed_form: f64,
    /// `(frictional mean − closed form) / standard error`.
    pub z_score: f64,
}

/// Monte Carlo value of buy-hold-sell under both prices. Log utility only:
/// the closed form and the finiteness of the value rely on it.
pub fn estimate_utilities(ensemble: &PathEnsemble, params: &BsParams, utility: &UtilitySpec) -> Result<UtilityReport> {
    if *utility != UtilitySpec::Log {
        return Err(Error::InvalidUtility("the Black–Scholes example is evaluated with log utility"));
    }
    let shadow = explicit_shadow(ensemble, params);
    let wealth = buy_hold_sell(ensemble, params.lambda);
    let n = ensemble.n_paths();
    let mut frictional = Vec::with_capacity(n);
    let mut frictionless = Vec::with_capacity(n);
    let mut max_wealth_difference: f64 = 0.0;
    for (i, &w) in wealth.iter().enumerate() {
        let e = ensemble.endowment(i, params.lambda);
        let a = w + e;
        // One share bought at S̃_0 = 1 is worth S̃_T at the end.
        let b = shadow.terminal(i) + e;
        max_wealth_difference = max_wealth_difference.max((a - b).abs());
        frictional.push(utility.evaluate(a));
        frictionless.push(utility.evaluate(b));
    }
    let frictional = Estimate::from_samples(&frictional);
    let frictionless = Estimate::from_samples(&frictionless);
    let closed_form = -1.0 + (1.0 - params.lambda).ln() + 0.25 * params.horizon;
    Ok(UtilityReport {
        frictional,
        frictionless,
        max_wealth_difference,
        closed_form,
        z_score: (frictional.mean - closed_form) / frictional.standard_error,
    })
}

/// Alternatives to buy-hold-sell, each started from `x = 1` and ending in
/// cash at `T/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    BuyHoldSell,
    HoldCash,
    /// Spend the fraction `θ` of the cash on stock at time 0.
    ScaledBuy { theta: f64 },
    /// Keep cash until `t`, then buy with all of it.
    DelayedBuy { t: f64 },
    /// Buy one share at 0 and sell it at `t < T/2`.
    EarlySell { t: f64 },
    /// Buy one share at 0, sell the fraction `f` at `T/4` and the rest at `T/2`.
    PartialLiquidation { fraction: f64 },
}

impl Strategy {
    /// The four alternatives the probe runs by default.
    pub fn catalog(params: &BsParams) -> [Strategy; 4] {
        let quarter = 0.25 * params.horizon;
        [
            Strategy::ScaledBuy { theta: 0.9 },
            Strategy::DelayedBuy { t: quarter },
            Strategy::EarlySell { t: quarter },
            Strategy::PartialLiquidation { fraction: 0.5 },
        ]
    }

    /// Whether the strategy pays exactly buy-hold-sell on every path, so that
    /// the probe must find no witness.
    pub fn replicates_buy_hold_sell(&self) -> bool {
        matches!(
            *self,
            Strategy::BuyHoldSell | Strategy::ScaledBuy { theta: 1.0 } | Strategy::PartialLiquidation { fraction: 0.0 }
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::BuyHoldSell => write!(f, "buy-hold-sell"),
            Strategy::HoldCash => write!(f, "hold-cash"),
            Strategy::ScaledBuy { theta } => write!(f, "scaled-buy:{theta}"),
            Strategy::DelayedBuy { t } => write!(f, "delayed-buy:{t}"),
            Strategy::EarlySell { t } => write!(f, "early-sell:{t}"),
            Strategy::PartialLiquidation { fraction } => write!(f, "partial-liquidation:{fraction}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let unknown = || Error::UnknownStrategy(String::from(s));
        let number = || -> Result<f64> {
            arg.ok_or_else(unknown)?.trim().parse::<f64>().map_err(|_| unknown())
        };
        let strategy = match name.trim() {
            "buy-hold-sell" if arg.is_none() => Strategy::BuyHoldSell,
            "hold-cash" if arg.is_none() => Strategy::HoldCash,
            "scaled-buy" => Strategy::ScaledBuy { theta: number()? },
            "delayed-buy" => Strategy::DelayedBuy { t: number()? },
            "early-sell" => Strategy::EarlySell { t: number()? },
            "partial-liquidation" => Strategy::PartialLiquidation { fraction: number()? },
            _ => return Err(unknown()),
        };
        match strategy {
            Strategy::ScaledBuy { theta: v } | Strategy::PartialLiquidation { fraction: v } if !(0.0..=1.0).contains(&v) => {
                Err(Error::InvalidParameter(format!("{s}: the fraction must lie in [0, 1]")))
            }
            _ => Ok(strategy),
        }
    }
}

/// Terminal cash of `strategy` on path `i` (frictional prices).
fn terminal_cash(strategy: &Strategy, ensemble: &PathEnsemble, params: &BsParams, i: usize) -> Result<f64> {
    let keep = 1.0 - params.lambda;
    let path = ensemble.path(i);
    let last = ensemble.frozen_price(i);
    Ok(match *strategy {
        Strategy::BuyHoldSell => keep * last,
        Strategy::HoldCash => 1.0,
        Strategy::ScaledBuy { theta } => (1.0 - theta) + theta * keep * last,
        Strategy::DelayedBuy { t } => keep * last / path[params.interior_index(t)?],
        Strategy::EarlySell { t } => keep * path[params.interior_index(t)?],
        Strategy::PartialLiquidation { fraction } => {
            let mid = path[params.interior_index(0.25 * params.horizon)?];
            fraction * keep * mid + (1.0 - fraction) * keep * last
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub strategy: Strategy,
    /// Paths with terminal cash plus endowment below zero.
    pub witnesses: usize,
    pub probability: f64,
    /// The first few witness path indices.
    pub witness_paths: Vec<usize>,
    /// `-∞` as soon as one path ends at or below zero.
    pub expected_utility: f64,
}

/// How many witness indices a probe report lists.
pub const WITNESS_LIST_LEN: usize = 10;

/// Look for paths where `strategy` leaves `φ⁰_T + e_T < 0`.
pub fn maximality_probe(ensemble: &PathEnsemble, params: &BsParams, strategy: &Strategy) -> Result<ProbeReport> {
    let n = ensemble.n_paths();
    let mut witnesses = 0;
    let mut witness_paths = Vec::new();
    let mut utilities = Vec::with_capacity(n);
    for i in 0..n {
        let total = terminal_cash(strategy, ensemble, params, i)? + ensemble.endowment(i, params.lambda);
        if total < 0.0 {
            witnesses += 1;
            if witness_paths.len() < WITNESS_LIST_LEN {
                witness_paths.push(i);
            }
        }
        utilities.push(UtilitySpec::Log.evaluate(total));
    }
    Ok(ProbeReport {
        strategy: *strategy,
        witnesses,
        probability: witnesses as f64 / n as f64,
        witness_paths,
        expected_utility: Estimate::from_samples(&utilities).mean,
    })
}

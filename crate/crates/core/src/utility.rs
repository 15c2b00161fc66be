//! Closed-form utility families on (0, ∞) with the conventions used by the
//! solvers: `U(w) = -∞` for `w ≤ 0`, exact marginal utility and exact convex
//! conjugate `V(y) = sup_{w>0} (U(w) - w y)`.

#[allow(unused_imports)] // unused when std's float methods are in scope
use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilitySpec {
    /// `U(w) = ln w`
    Log,
    /// `U(w) = w^γ / γ` with `γ < 1`, `γ ≠ 0`.
    Power { gamma: f64 },
}

impl UtilitySpec {
    pub fn power(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma >= 1.0 {
            return Err(Error::InvalidUtility("power exponent must be finite and below 1"));
        }
        if gamma == 0.0 {
            return Err(Error::InvalidUtility("power exponent must be nonzero (use log)"));
        }
        Ok(UtilitySpec::Power { gamma })
    }

    /// `U(w)`; `-∞` for every nonpositive wealth.
    pub fn evaluate(&self, w: f64) -> f64 {
        if !(w > 0.0) {
            return f64::NEG_INFINITY;
        }
        match *self {
            UtilitySpec::Log => w.ln(),
            UtilitySpec::Power { gamma } => w.powf(gamma) / gamma,
        }
    }

    pub fn marginal(&self, w: f64) -> Result<f64> {
        if !(w > 0.0) {
            return Err(Error::NonPositiveArgument(w));
        }
        Ok(self.marginal_unchecked(w))
    }

    pub(crate) fn marginal_unchecked(&self, w: f64) -> f64 {
        match *self {
            UtilitySpec::Log => 1.0 / w,
            UtilitySpec::Power { gamma } => w.powf(gamma - 1.0),
        }
    }

    /// `U''(w)`, strictly negative on (0, ∞).
    pub fn curvature(&self, w: f64) -> f64 {
        match *self {
            UtilitySpec::Log => -1.0 / (w * w),
            UtilitySpec::Power { gamma } => (gamma - 1.0) * w.powf(gamma - 2.0),
        }
    }

    /// `V(y) = sup_{w>0} (U(w) - w y)`.
    pub fn conjugate(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::NonPositiveArgument(y));
        }
        Ok(match *self {
            UtilitySpec::Log => -y.ln() - 1.0,
            UtilitySpec::Power { gamma } => (1.0 - gamma) / gamma * y.powf(gamma / (gamma - 1.0)),
        })
    }

    /// `limsup_{x→∞} x U'(x) / U(x)`.
    pub fn asymptotic_elasticity(&self) -> f64 {
        match *self {
            UtilitySpec::Log => 0.0,
            UtilitySpec::Power { gamma } if gamma > 0.0 => gamma,
            UtilitySpec::Power { .. } => 0.0,
        }
    }

    pub fn asymptotic_elasticity_ok(&self) -> bool {
        self.asymptotic_elasticity() < 1.0
    }

    /// `U(to) - U(from)` without cancellation when the two are close.
    pub fn difference(&self, to: f64, from: f64) -> f64 {
        if !(from > 0.0) || !(to > 0.0) {
            return self.evaluate(to) - self.evaluate(from);
        }
        let rel = (to - from) / from;
        match *self {
            UtilitySpec::Log => rel.ln_1p(),
            UtilitySpec::Power { gamma } => from.powf(gamma) * (gamma * rel.ln_1p()).exp_m1() / gamma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn families() -> [UtilitySpec; 4] {
        [
            UtilitySpec::Log,
            UtilitySpec::power(0.5).unwrap(),
            UtilitySpec::power(-1.0).unwrap(),
            UtilitySpec::power(0.99).unwrap(),
        ]
    }

    /// Brute-force `sup_w U(w) - w y` on a log-spaced grid over [1e-6, 1e6].
    fn conjugate_by_grid(u: &UtilitySpec, y: f64) -> f64 {
        let points = 1_000_000;
        let (lo, hi) = (1e-6f64.ln(), 1e6f64.ln());
        (0..=points)
            .map(|k| (lo + (hi - lo) * k as f64 / points as f64).exp())
            .map(|w| u.evaluate(w) - w * y)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(UtilitySpec::Log.evaluate(1.0), 0.0);
        for u in families() {
            assert_eq!(u.evaluate(-0.3), f64::NEG_INFINITY);
            assert_eq!(u.evaluate(0.0), f64::NEG_INFINITY);
        }
        assert!((UtilitySpec::power(0.5).unwrap().evaluate(4.0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn marginal_examples() {
        assert_eq!(UtilitySpec::Log.marginal(2.0), Ok(0.5));
        assert!((UtilitySpec::power(0.5).unwrap().marginal(4.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((UtilitySpec::Log.marginal(1e-8).unwrap() - 1e8).abs() < 1e-6);
        assert_eq!(UtilitySpec::Log.marginal(0.0), Err(Error::NonPositiveArgument(0.0)));
    }

    #[test]
    fn conjugate_examples() {
        assert_eq!(UtilitySpec::Log.conjugate(1.0), Ok(-1.0));
        let v = UtilitySpec::Log.conjugate(0.5).unwrap();
        assert!((v - (2f64.ln() - 1.0)).abs() < 1e-15 && (v + 0.3069).abs() < 1e-4);
        assert!(UtilitySpec::Log.conjugate(-1.0).is_err());

        let power = UtilitySpec::power(0.5).unwrap();
        let grid = conjugate_by_grid(&power, 1.0);
        assert!((power.conjugate(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((grid - 1.0).abs() < 1e-6, "grid sup {grid}");
    }

    #[test]
    fn conjugate_matches_grid_search() {
        for u in families() {
            // Keep the maximizer inside the grid: for γ near 1 it sits at
            // y^{1/(γ-1)}, which leaves [1e-6, 1e6] quickly as y moves off 1.
            let ys: &[f64] = match u {
                UtilitySpec::Power { gamma } if gamma > 0.9 => &[0.9, 1.0, 1.1],
                _ => &[0.3, 1.0, 2.5],
            };
            for &y in ys {
                let exact = u.conjugate(y).unwrap();
                let grid = conjugate_by_grid(&u, y);
                assert!((exact - grid).abs() <= 1e-6 * (1.0 + exact.abs()), "{u:?} y={y}: {exact} vs {grid}");
            }
        }
    }

    #[test]
    fn asymptotic_elasticity() {
        assert_eq!(UtilitySpec::Log.asymptotic_elasticity(), 0.0);
        assert_eq!(UtilitySpec::power(0.5).unwrap().asymptotic_elasticity(), 0.5);
        assert_eq!(UtilitySpec::power(0.99).unwrap().asymptotic_elasticity(), 0.99);
        for u in families() {
            assert!(u.asymptotic_elasticity_ok());
        }
        assert!(UtilitySpec::power(1.0).is_err());
        assert!(UtilitySpec::power(0.0).is_err());
    }

    #[test]
    fn marginal_is_the_derivative() {
        for u in families() {
            let mut w = 0.1;
            while w <= 100.0 {
                let h = 1e-6 * w;
                let central = (u.evaluate(w + h) - u.evaluate(w - h)) / (2.0 * h);
                let exact = u.marginal(w).unwrap();
                assert!((exact - central).abs() <= 1e-6, "{u:?} at {w}: {exact} vs {central}");
                w *= 1.37;
            }
        }
    }

    #[test]
    fn increasing_and_concave_on_grid() {
        for u in families() {
            let grid: std::vec::Vec<f64> = (1..400).map(|k| 0.05 * k as f64).collect();
            for win in grid.windows(3) {
                let (a, b, c) = (u.evaluate(win[0]), u.evaluate(win[1]), u.evaluate(win[2]));
                assert!(a < b && b < c);
                assert!(b > 0.5 * (a + c));
            }
        }
    }

    proptest! {
        #[test]
        fn fenchel_inequality(w in 1e-3f64..1e3, y in 1e-3f64..1e3, which in 0usize..4) {
            let u = families()[which];
            let lhs = u.evaluate(w);
            let rhs = u.conjugate(y).unwrap() + w * y;
            prop_assert!(lhs <= rhs + 1e-10 * (1.0 + lhs.abs() + rhs.abs()));
        }

        #[test]
        fn fenchel_equality_at_marginal(w in 1e-3f64..1e3, which in 0usize..4) {
            let u = families()[which];
            let y = u.marginal(w).unwrap();
            let lhs = u.evaluate(w);
            let rhs = u.conjugate(y).unwrap() + w * y;
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }

        #[test]
        fn difference_agrees_with_subtraction(w in 1e-2f64..1e2, d in -0.5f64..0.5, which in 0usize..4) {
            let u = families()[which];
            let to = w * (1.0 + d);
            let direct = u.evaluate(to) - u.evaluate(w);
            prop_assert!((u.difference(to, w) - direct).abs() <= 1e-12 * (1.0 + u.evaluate(w).abs()));
        }
    }
}

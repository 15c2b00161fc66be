//! Concave program over a linear feasible set:
//!
//! ```text
//! maximize   F(x) = Σ_l w_l U(a_l·x + c_l)
//! subject to G x ≤ h
//! ```
//!
//! Both tree problems reduce to this form: the decision vector holds trades
//! (or stock holdings), leaf wealth is affine in it, and every holding
//! constraint is a linear inequality.
//!
//! The solve runs a log-barrier path-following Newton method down to a small
//! barrier weight, reads off the active constraints, and then polishes with
//! Newton steps on the equality-constrained problem over the active set,
//! dropping constraints with negative multipliers and adding blocking ones.
//! The polish brings the value to rounding accuracy, which the marginal
//! construction downstream depends on.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector};
#[allow(unused_imports)] // unused when std's float methods are in scope
use num_traits::Float;

use crate::error::{Error, Result};
use crate::utility::UtilitySpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Initial barrier weight.
    pub mu_initial: f64,
    /// Multiplicative barrier reduction per outer iteration.
    pub mu_factor: f64,
    /// Stop the barrier path once the weight falls to this level.
    pub mu_final: f64,
    /// Centering stops when half the squared Newton decrement is below
    /// `inner_tolerance · (1 + |F|)`.
    pub inner_tolerance: f64,
    /// Newton steps allowed per barrier weight.
    pub max_newton_steps: usize,
    /// Converged iff the KKT residual is at most `kkt_threshold · (1 + |F|)`.
    pub kkt_threshold: f64,
    /// Absolute tolerance on holdings when checking feasibility.
    pub feasibility_tolerance: f64,
    /// Run the active-set polish after the barrier path.
    pub polish: bool,
    /// Refuse instances with more decision variables than this.
    pub max_variables: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            mu_initial: 1.0,
            mu_factor: 0.2,
            mu_final: 1e-10,
            inner_tolerance: 1e-10,
            max_newton_steps: 200,
            kkt_threshold: 1e-8,
            feasibility_tolerance: 1e-9,
            polish: true,
            max_variables: 2048,
        }
    }
}

pub(crate) struct ConcaveProgram {
    pub utility: UtilitySpec,
    pub weights: Vec<f64>,
    /// Leaf wealth map, one row per leaf.
    pub wealth_map: DMatrix<f64>,
    pub wealth_offset: DVector<f64>,
    pub constraints: DMatrix<f64>,
    pub bounds: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ProgramSolution {
    pub x: DVector<f64>,
    pub value: f64,
    /// One nonnegative multiplier per inequality row.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
}

impl ConcaveProgram {
    fn dim(&self) -> usize {
        self.constraints.ncols()
    }

    pub fn leaf_wealth(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.wealth_map * x + &self.wealth_offset
    }

    pub fn slacks(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.bounds - &self.constraints * x
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.leaf_wealth(x)
            .iter()
            .zip(&self.weights)
            .map(|(&w, &p)| p * self.utility.evaluate(w))
            .sum()
    }

    fn gradient_from_wealth(&self, wealth: &DVector<f64>) -> DVector<f64> {
        let weighted = DVector::from_iterator(
            wealth.len(),
            wealth.iter().zip(&self.weights).map(|(&w, &p)| p * self.utility.marginal_unchecked(w)),
        );
        self.wealth_map.tr_mul(&weighted)
    }

    fn hessian_from_wealth(&self, wealth: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.wealth_map.clone();
        for (l, (&w, &p)) in wealth.iter().zip(&self.weights).enumerate() {
            let c = p * self.utility.curvature(w);
            scaled.row_mut(l).scale_mut(c);
        }
        self.wealth_map.tr_mul(&scaled)
    }

    fn strictly_feasible(&self, x: &DVector<f64>) -> bool {
        self.slacks(x).iter().all(|&s| s > 0.0) && self.leaf_wealth(x).iter().all(|&w| w > 0.0)
    }

    fn barrier_value(&self, x: &DVector<f64>, mu: f64) -> f64 {
        self.objective(x) + mu * self.slacks(x).iter().map(|s| s.ln()).sum::<f64>()
    }

    /// Largest violation of the KKT conditions at `(x, ν)`.
    pub fn kkt_residual(&self, x: &DVector<f64>, multipliers: &DVector<f64>) -> f64 {
        let wealth = self.leaf_wealth(x);
        if wealth.iter().any(|&w| !(w > 0.0)) {
            return f64::INFINITY;
        }
        let stationarity = self.gradient_from_wealth(&wealth) - self.constraints.tr_mul(multipliers);
        let slacks = self.slacks(x);
        let mut r = stationarity.amax();
        for (&s, &nu) in slacks.iter().zip(multipliers.iter()) {
            r = r.max((-s).max(0.0)).max((-nu).max(0.0)).max((nu * s).abs());
        }
        r
    }

    pub fn solve(&self, start: DVector<f64>, opts: &SolverOptions) -> Result<ProgramSolution> {
        if self.dim() > opts.max_variables {
            return Err(Error::InstanceTooLarge(alloc::format!(
                "{} decision variables exceed the limit of {}",
                self.dim(),
                opts.max_variables
            )));
        }
        if !self.strictly_feasible(&start) {
            return Err(Error::InvalidParameter("solver start point is not strictly feasible".into()));
        }
        let barrier = self.barrier_path(start, opts);
        let threshold = |v: f64| opts.kkt_threshold * (1.0 + v.abs());
        if !opts.polish {
            return Ok(barrier);
        }
        // Working sets to start the polish from, most selective first: the
        // loose rule misfires when the barrier stops before the small slacks
        // have separated from their multipliers.
        let slacks = self.slacks(&barrier.x);
        let rules: [&dyn Fn(f64, f64) -> bool; 3] =
            [&|s, nu| s <= 1e-3 * nu, &|s, nu| s <= nu, &|_, _| false];
        for rule in rules {
            let active: Vec<bool> = slacks.iter().zip(barrier.multipliers.iter()).map(|(&s, &nu)| rule(s, nu)).collect();
            if let Some(polished) = self.polish(&barrier, active, opts) {
                if polished.kkt_residual <= barrier.kkt_residual.max(threshold(polished.value))
                    && polished.value >= barrier.value - threshold(barrier.value)
                {
                    return Ok(polished);
                }
            }
        }
        Ok(barrier)
    }

    fn barrier_path(&self, start: DVector<f64>, opts: &SolverOptions) -> ProgramSolution {
        let n = self.dim();
        let mut x = start;
        let mut mu = opts.mu_initial;
        let mut iterations = 0;
        loop {
            for _ in 0..opts.max_newton_steps {
                let wealth = self.leaf_wealth(&x);
                let slacks = self.slacks(&x);
                let inv_s = slacks.map(|s| 1.0 / s);
                let grad = self.gradient_from_wealth(&wealth) - self.constraints.tr_mul(&inv_s) * mu;

                let mut neg_hess = -self.hessian_from_wealth(&wealth);
                let mut scaled_g = self.constraints.clone();
                for (k, &is) in inv_s.iter().enumerate() {
                    scaled_g.row_mut(k).scale_mut(is * mu.sqrt());
                }
                neg_hess += scaled_g.tr_mul(&scaled_g);

                let step = match newton_direction(neg_hess, &grad, n) {
                    Some(d) => d,
                    None => break,
                };
                iterations += 1;
                let decrement = grad.dot(&step);
                let f = self.objective(&x);
                if !(decrement > 0.0) || decrement / 2.0 <= opts.inner_tolerance * (1.0 + f.abs()) {
                    break;
                }

                let phi = self.barrier_value(&x, mu);
                let mut t = 1.0;
                while t > 1e-20 && !self.strictly_feasible(&(&x + &step * t)) {
                    t *= 0.5;
                }
                let mut accepted = false;
                while t > 1e-20 {
                    let trial = &x + &step * t;
                    if self.barrier_value(&trial, mu) >= phi + 0.25 * t * decrement {
                        x = trial;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            if mu <= opts.mu_final {
                break;
            }
            mu *= opts.mu_factor;
        }

        let multipliers = self.slacks(&x).map(|s| mu / s);
        let value = self.objective(&x);
        let kkt_residual = self.kkt_residual(&x, &multipliers);
        let converged = kkt_residual <= opts.kkt_threshold * (1.0 + value.abs());
        ProgramSolution { x, value, multipliers, iterations, kkt_residual, converged }
    }

    /// Active-set Newton refinement started from the barrier solution.
    ///
    /// Newton steps run on the face cut out by the working set, and blocking
    /// rows join it. Once the iterate settles, the multipliers come from a
    /// nonnegative least-squares fit of the gradient. A zero fit residual
    /// certifies the KKT conditions. Otherwise the fit residual is an ascent
    /// direction along which every row with a zero multiplier opens up, so
    /// those rows leave the working set. Fitting rather than solving keeps
    /// degenerate vertices (more active rows than the face needs) harmless.
    fn polish(&self, barrier: &ProgramSolution, mut active: Vec<bool>, opts: &SolverOptions) -> Option<ProgramSolution> {
        let m = self.constraints.nrows();
        let mut iterations = barrier.iterations;

        // Snap active constraints onto their bounds first.
        let mut x = self.project_onto_active(&barrier.x, &active)?;
        if self.slacks(&x).iter().any(|&s| s < -opts.feasibility_tolerance) {
            return None;
        }

        let mut multipliers = DVector::zeros(m);
        let mut settled = false;
        for _ in 0..4 * m + 20 {
            self.newton_on_face(&mut x, &mut active, &mut iterations)?;
            let rows: Vec<usize> = (0..m).filter(|&k| active[k]).collect();
            let grad = self.gradient_from_wealth(&self.leaf_wealth(&x));
            let g_t = DMatrix::from_fn(self.dim(), rows.len(), |i, j| self.constraints[(rows[j], i)]);
            let nu = nonnegative_least_squares(&g_t, &grad);
            let residual = (&grad - &g_t * &nu).amax();
            multipliers.fill(0.0);
            for (j, &k) in rows.iter().enumerate() {
                multipliers[k] = nu[j];
            }
            if residual <= 1e-12 * (1.0 + grad.amax()) {
                settled = true;
                break;
            }
            for (j, &k) in rows.iter().enumerate() {
                if nu[j] <= 0.0 {
                    active[k] = false;
                }
            }
        }
        if !settled {
            return None;
        }

        let slack = self.slacks(&x);
        if slack.iter().any(|&s| s < -opts.feasibility_tolerance) {
            return None;
        }
        let value = self.objective(&x);
        let kkt_residual = self.kkt_residual(&x, &multipliers);
        let converged = kkt_residual <= opts.kkt_threshold * (1.0 + value.abs());
        Some(ProgramSolution { x, value, multipliers, iterations, kkt_residual, converged })
    }

    /// Newton iterations for maximizing `F` on `{G_k x = h_k : k active}`,
    /// adding every row that blocks a step. Returns once steps reach the
    /// rounding floor.
    fn newton_on_face(&self, x: &mut DVector<f64>, active: &mut [bool], iterations: &mut usize) -> Option<()> {
        let n = self.dim();
        let m = self.constraints.nrows();
        let mut last_move = f64::INFINITY;
        for _ in 0..60 + m {
            *iterations += 1;
            // Put the active rows back on their bounds so that the line search
            // below only judges moves within the face.
            *x = self.project_onto_active(x, active)?;
            let wealth = self.leaf_wealth(x);
            if wealth.iter().any(|&w| !(w > 0.0)) {
                return None;
            }
            let grad = self.gradient_from_wealth(&wealth);
            let hess = self.hessian_from_wealth(&wealth);
            let rows: Vec<usize> = (0..m).filter(|&k| active[k]).collect();
            let a = rows.len();
            let slack = self.slacks(x);
            let mut kkt = DMatrix::zeros(n + a, n + a);
            kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
            let mut rhs = DVector::zeros(n + a);
            rhs.rows_mut(0, n).copy_from(&(-&grad));
            for (i, &k) in rows.iter().enumerate() {
                for j in 0..n {
                    let g = self.constraints[(k, j)];
                    kkt[(n + i, j)] = g;
                    kkt[(j, n + i)] = g;
                }
                // G_k (x + dx) = h_k
                rhs[n + i] = slack[k];
            }
            let sol = pseudo_solve(kkt, &rhs)?;
            let dx = sol.rows(0, n).into_owned();

            // Ratio test against the inactive rows.
            let gdx = &self.constraints * &dx;
            let mut t_max = 1.0;
            let mut blocking = None;
            for k in 0..m {
                if !active[k] && gdx[k] > 0.0 {
                    let t = slack[k].max(0.0) / gdx[k];
                    if t < t_max {
                        t_max = t;
                        blocking = Some(k);
                    }
                }
            }

            let f0 = self.objective(x);
            let mut t = t_max;
            let mut next = &*x + &dx * t;
            while !(self.objective(&next) >= f0 - 1e-14 * (1.0 + f0.abs())) {
                t *= 0.5;
                if t < 1e-12 {
                    return None;
                }
                next = &*x + &dx * t;
            }
            let moved = (&next - &*x).amax();
            *x = next;
            if let (Some(k), true) = (blocking, t == t_max) {
                active[k] = true;
                last_move = f64::INFINITY;
                continue;
            }
            // Quadratic convergence ends at the rounding floor; once steps
            // near it stop at least halving, further iterations only creep.
            let floor = 64.0 * f64::EPSILON * (1.0 + x.amax());
            if moved <= floor || (moved >= 0.5 * last_move && moved <= 1e6 * floor) {
                return Some(());
            }
            last_move = moved;
        }
        None
    }

    /// Minimum-norm correction putting every active row on its bound.
    fn project_onto_active(&self, x: &DVector<f64>, active: &[bool]) -> Option<DVector<f64>> {
        let rows: Vec<usize> = (0..active.len()).filter(|&k| active[k]).collect();
        if rows.is_empty() {
            return Some(x.clone());
        }
        let slack = self.slacks(x);
        let g = DMatrix::from_fn(rows.len(), self.dim(), |i, j| self.constraints[(rows[i], j)]);
        let r = DVector::from_iterator(rows.len(), rows.iter().map(|&k| slack[k]));
        let dx = pseudo_solve(g, &r)?;
        Some(x + dx)
    }
}

/// Minimum-norm least-squares solution through the SVD, with singular values
/// below `1e-13 σ_max` treated as zero. The decomposition alone can leave a
/// backward error far above rounding, so two refinement steps follow.
fn pseudo_solve(m: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = m.clone().svd(true, true);
    let tol = 1e-13 * svd.singular_values.max();
    let mut x = svd.solve(b, tol).ok()?;
    for _ in 0..2 {
        let r = b - &m * &x;
        x += svd.solve(&r, tol).ok()?;
    }
    Some(x)
}

fn newton_direction(mut neg_hess: DMatrix<f64>, grad: &DVector<f64>, n: usize) -> Option<DVector<f64>> {
    if let Some(chol) = Cholesky::new(neg_hess.clone()) {
        return Some(chol.solve(grad));
    }
    let ridge = 1e-12 * (1.0 + neg_hess.diagonal().amax());
    for i in 0..n {
        neg_hess[(i, i)] += ridge;
    }
    Cholesky::new(neg_hess).map(|c| c.solve(grad))
}

/// Lawson–Hanson: `argmin_{ν ≥ 0} ‖A ν − b‖₂`.
fn nonnegative_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let cols = a.ncols();
    let mut nu = DVector::zeros(cols);
    if cols == 0 {
        return nu;
    }
    let mut passive = vec![false; cols];
    let scale = 1.0 + a.amax() * (1.0 + b.amax());
    let tol = 1e-14 * scale;
    let restricted = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..cols).filter(|&j| passive[j]).collect();
        if idx.is_empty() {
            return DVector::zeros(cols);
        }
        let sub = DMatrix::from_fn(a.nrows(), idx.len(), |i, j| a[(i, idx[j])]);
        let z = pseudo_solve(sub, b).unwrap_or_else(|| DVector::zeros(idx.len()));
        let mut full = DVector::zeros(cols);
        for (j, &c) in idx.iter().enumerate() {
            full[c] = z[j];
        }
        full
    };
    for _ in 0..3 * cols + 10 {
        let w = a.tr_mul(&(b - a * &nu));
        let entering = (0..cols).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = entering else { break };
        passive[j] = true;
        for _ in 0..cols + 1 {
            let z = restricted(&passive);
            if (0..cols).all(|k| !passive[k] || z[k] > 0.0) {
                nu = z;
                break;
            }
            let mut alpha = 1.0;
            for k in 0..cols {
                if passive[k] && z[k] <= 0.0 {
                    alpha = f64::min(alpha, nu[k] / (nu[k] - z[k]));
                }
            }
            nu += (z - &nu) * alpha;
            for k in 0..cols {
                if passive[k] && nu[k] <= 1e-300 {
                    passive[k] = false;
                    nu[k] = 0.0;
                }
            }
        }
    }
    nu
}

#[cfg(test)]
mod tests {
    use super::*;

    /// maximize p ln(1 + x) + (1-p) ln(1 - x/2) over 0 ≤ x ≤ 1.
    fn one_dimensional(p: f64) -> ConcaveProgram {
        ConcaveProgram {
            utility: UtilitySpec::Log,
            weights: alloc::vec![p, 1.0 - p],
            wealth_map: DMatrix::from_row_slice(2, 1, &[1.0, -0.5]),
            wealth_offset: DVector::from_vec(alloc::vec![1.0, 1.0]),
            constraints: DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            bounds: DVector::from_vec(alloc::vec![0.0, 1.0]),
        }
    }

    #[test]
    fn interior_optimum() {
        // FOC: p/(1+x) = (1-p)/(2-x)  =>  x = (3p - 1)
        let prog = one_dimensional(0.5);
        let sol = prog.solve(DVector::from_element(1, 0.3), &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.x[0] - 0.5).abs() < 1e-12, "{}", sol.x[0]);
        assert!(sol.multipliers.amax() < 1e-12);
    }

    #[test]
    fn bound_becomes_active() {
        // p = 0.8 pushes the unconstrained optimum to 1.4, so x = 1 binds.
        let prog = one_dimensional(0.8);
        let sol = prog.solve(DVector::from_element(1, 0.3), &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.x[0], 1.0);
        let expected = 0.8 / 2.0 - 0.2 * 0.5 / 0.5;
        assert!((sol.multipliers[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn lower_bound_active() {
        let prog = one_dimensional(0.2);
        let sol = prog.solve(DVector::from_element(1, 0.3), &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.x[0].abs() < 1e-15, "{}", sol.x[0]);
        assert!((sol.multipliers[0] - (0.4 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn nnls_matches_enumeration() {
        // Oracle: try every support, keep the best nonnegative solution.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, -1.0, 0.0, 1.0, 2.0, 1.0, 1.0, 0.0]);
        let b = DVector::from_vec(alloc::vec![1.0, -2.0, 0.5]);
        let nu = nonnegative_least_squares(&a, &b);
        assert!(nu.iter().all(|&v| v >= 0.0));
        let best = (1u32..8)
            .filter_map(|mask| {
                let idx: Vec<usize> = (0..3).filter(|j| mask & (1 << j) != 0).collect();
                let sub = DMatrix::from_fn(3, idx.len(), |i, j| a[(i, idx[j])]);
                let z = sub.clone().svd(true, true).solve(&b, 1e-14).ok()?;
                z.iter().all(|&v| v >= 0.0).then(|| (&sub * z - &b).norm())
            })
            .fold(b.norm(), f64::min);
        assert!(((&a * &nu - &b).norm() - best).abs() < 1e-12);
    }

    #[test]
    fn degenerate_vertex() {
        // maximize ln(1 + x + y) with x, y ≥ 0, x + y ≤ 1 and x ≤ 1: the
        // optimum face x + y = 1 meets x ≤ 1 and y ≥ 0 at (1, 0).
        let prog = ConcaveProgram {
            utility: UtilitySpec::Log,
            weights: alloc::vec![1.0],
            wealth_map: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            wealth_offset: DVector::from_vec(alloc::vec![1.0]),
            constraints: DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0, 1.0, 0.0]),
            bounds: DVector::from_vec(alloc::vec![0.0, 0.0, 1.0, 1.0]),
        };
        let sol = prog.solve(DVector::from_vec(alloc::vec![0.2, 0.2]), &SolverOptions::default()).unwrap();
        assert!(sol.converged, "{}", sol.kkt_residual);
        assert!((sol.value - 2f64.ln()).abs() < 1e-14);
        assert!(sol.multipliers.iter().all(|&v| v >= 0.0));
    }

    /// A well-conditioned saddle-point system on which the bare SVD solve
    /// leaves errors near 1e-10 in the constrained block.
    #[test]
    fn refined_solve_reaches_rounding_level() {
        let h = [
            [-0.148967033458178, 0.13342890914020422, -0.03976884462987648, 0.06159174688881075, -0.02874713622784516, 0.007476320171028396],
            [0.13342890914020422, -0.14572508060865533, 0.02915372535419763, -0.06826984420485245, 0.022285326562666363, -0.011863350625130675],
            [-0.03976884462987649, 0.02915372535419763, -0.06246687316754661, 0.04731214818433374, 0.0, 0.0],
            [0.06159174688881075, -0.06826984420485244, 0.04731214818433374, -0.056846165241270834, 0.0, 0.0],
            [-0.028747136227845152, 0.022285326562666363, 0.0, 0.0, -0.018733721372683126, 0.014274594678536737],
            [0.007476320171028393, -0.011863350625130675, 0.0, 0.0, 0.014274594678536737, -0.017301970231137352],
        ];
        let mut kkt = DMatrix::zeros(11, 11);
        for i in 0..6 {
            for j in 0..6 {
                kkt[(i, j)] = h[i][j];
            }
        }
        for i in 0..5 {
            kkt[(6 + i, 1 + i)] = -1.0;
            kkt[(1 + i, 6 + i)] = -1.0;
        }
        let mut rhs = DVector::zeros(11);
        for (i, v) in [-1.4276694659809408e-8, 0.16138080521354084, 0.056490997965875984, 0.07060967525797696, 0.021753667460414888, 0.028175386193175413]
            .into_iter()
            .enumerate()
        {
            rhs[i] = v;
        }
        let sol = pseudo_solve(kkt.clone(), &rhs).unwrap();
        assert!((&kkt * &sol - &rhs).amax() < 1e-16);
        assert!(sol.rows(1, 5).amax() < 1e-16);
    }
}

//! Value-function reformulation: smoothed surrogate `g*_μ` and a
//! squared-hinge penalty solver.

use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintSet;
use crate::driver::{stationarity, Clock, RunReport, Termination};
use crate::error::{BloError, Result};
use crate::linalg::{norm_sq, unit, DenseMatrix};
use crate::lower::solve_to_tolerance;
use crate::problem::{BilevelProblem, Counted};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct VfConfig<T> {
    /// Weight of `(μ1/2)‖φ‖²` in the surrogate.
    pub mu1: T,
    /// Constant slack added to the surrogate.
    #[serde(default = "zero")]
    pub mu2: T,
    pub penalty_rho: T,
    pub rho_growth: T,
    pub inner_tol: T,
    pub outer_rounds: usize,
    /// Stepsize of the inner projected-gd solve.
    pub inner_step: T,
    pub inner_max_iters: usize,
    /// Initial stepsize of the joint (θ, φ) penalty steps; backtracked as needed.
    pub step: T,
    pub steps_per_round: usize,
}

impl<T: Scalar> VfConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BloError::Argument(m));
        if !(self.mu1 >= T::zero()) || !(self.mu2 >= T::zero()) {
            return bad("μ1 and μ2 must be nonnegative".into());
        }
        if !(self.penalty_rho >= T::zero()) {
            return bad(format!("penalty weight must be nonnegative, got {}", self.penalty_rho));
        }
        if !(self.rho_growth > T::one()) {
            return bad(format!("ρ growth must exceed 1, got {}", self.rho_growth));
        }
        if !(self.inner_tol > T::zero()) || !(self.inner_step > T::zero()) || !(self.step > T::zero()) {
            return bad("tolerances and stepsizes must be positive".into());
        }
        if self.outer_rounds == 0 || self.steps_per_round == 0 {
            return bad("need at least one round and one step per round".into());
        }
        Ok(())
    }
}

/// Result of [`value_fn`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFnEval<T> {
    pub g_star_mu: T,
    pub phi_hat: Vec<T>,
    pub grad_theta: Vec<T>,
    pub inner_iterations: usize,
}

/// `g + (μ1/2)‖φ‖²` as a lower problem, with the upper level left untouched.
struct Regularized<'a, T, P: ?Sized> {
    inner: &'a P,
    mu1: T,
}

impl<'a, T: Scalar, P: BilevelProblem<T> + ?Sized> BilevelProblem<T> for Regularized<'a, T, P> {
    fn dim_theta(&self) -> usize {
        self.inner.dim_theta()
    }
    fn dim_phi(&self) -> usize {
        self.inner.dim_phi()
    }
    fn upper_value(&self, theta: &[T], phi: &[T]) -> T {
        self.inner.upper_value(theta, phi)
    }
    fn upper_grad_theta(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        self.inner.upper_grad_theta(theta, phi)
    }
    fn upper_grad_phi(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        self.inner.upper_grad_phi(theta, phi)
    }
    fn lower_value(&self, theta: &[T], phi: &[T]) -> T {
        self.inner.lower_value(theta, phi) + self.mu1 * norm_sq(phi) / T::lit(2.0)
    }
    fn lower_grad_phi(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        let g = self.inner.lower_grad_phi(theta, phi);
        g.iter().zip(phi).map(|(&gi, &p)| gi + self.mu1 * p).collect()
    }
    fn lower_grad_theta(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        self.inner.lower_grad_theta(theta, phi)
    }
    fn lower_hvp(&self, theta: &[T], phi: &[T], v: &[T]) -> Vec<T> {
        let h = self.inner.lower_hvp(theta, phi, v);
        h.iter().zip(v).map(|(&hi, &vi)| hi + self.mu1 * vi).collect()
    }
    fn lower_cross_jvp(&self, theta: &[T], phi: &[T], v: &[T]) -> Vec<T> {
        self.inner.lower_cross_jvp(theta, phi, v)
    }
    fn upper_set(&self) -> &ConstraintSet<T> {
        self.inner.upper_set()
    }
    fn lower_set(&self) -> &ConstraintSet<T> {
        self.inner.lower_set()
    }
    fn project_upper(&self, theta: &[T]) -> Result<Vec<T>> {
        self.inner.project_upper(theta)
    }
    fn project_lower(&self, phi: &[T]) -> Result<Vec<T>> {
        self.inner.project_lower(phi)
    }
}

/// Without regularization Danskin's rule needs a unique minimizer; a
/// positive-definite Hessian at `φ̂` on an unconstrained lower level certifies it.
fn check_unique<T: Scalar, P: BilevelProblem<T> + ?Sized>(problem: &P, theta: &[T], phi: &[T]) -> Result<()> {
    let n = problem.dim_phi();
    let cols: Vec<Vec<T>> = (0..n).map(|j| problem.lower_hvp(theta, phi, &unit(n, j))).collect();
    let mut h = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h.set(i, j, (cols[j][i] + cols[i][j]) / T::lit(2.0));
        }
    }
    let scale = (0..n).map(|i| h.get(i, i).abs()).fold(T::zero(), T::max).max(T::one());
    let eps = T::lit(1e-10) * scale;
    // Cholesky
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = h.get(j, j);
        for k in 0..j {
            d = d - l.get(j, k) * l.get(j, k);
        }
        if !(d > eps) {
            return Err(BloError::NonUniqueLowerSolution(
                "lower Hessian is singular at the minimizer and μ1 = 0; set μ1 > 0".into(),
            ));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = h.get(i, j);
            for k in 0..j {
                s = s - l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(())
}

/// Smoothed value function at `θ`, solving the regularized lower problem from `phi_start`.
pub fn value_fn_from<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi_start: &[T],
    cfg: &VfConfig<T>,
) -> Result<ValueFnEval<T>> {
    cfg.validate()?;
    let reg = Regularized { inner: problem, mu1: cfg.mu1 };
    let sol = solve_to_tolerance(&reg, theta, phi_start, cfg.inner_tol, cfg.inner_max_iters, cfg.inner_step)?;
    if cfg.mu1 == T::zero() && problem.lower_set().is_unconstrained() {
        check_unique(problem, theta, &sol.phi)?;
    }
    let g_star_mu = reg.lower_value(theta, &sol.phi) + cfg.mu2;
    let grad_theta = problem.lower_grad_theta(theta, &sol.phi);
    Ok(ValueFnEval { g_star_mu, phi_hat: sol.phi, grad_theta, inner_iterations: sol.iterations })
}

/// `g*_μ(θ) = min_{φ ∈ C} g(θ, φ) + (μ1/2)‖φ‖² + μ2`, its minimizer and
/// its θ-gradient by Danskin's rule.
pub fn value_fn<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    cfg: &VfConfig<T>,
) -> Result<ValueFnEval<T>> {
    value_fn_from(problem, theta, &problem.initial_phi(), cfg)
}

/// Penalized objective and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyEval<T> {
    pub value: T,
    pub upper: T,
    pub violation: T,
    pub grad_theta: Vec<T>,
    pub grad_phi: Vec<T>,
}

/// `f(θ, φ) + (ρ/2) max(0, g(θ, φ) - g*_μ(θ))²` given a value-function evaluation at `θ`.
pub fn penalty_with<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi: &[T],
    rho: T,
    vf: &ValueFnEval<T>,
) -> PenaltyEval<T> {
    let upper = problem.upper_value(theta, phi);
    let violation = (problem.lower_value(theta, phi) - vf.g_star_mu).max(T::zero());
    let mut grad_theta = problem.upper_grad_theta(theta, phi);
    let mut grad_phi = problem.upper_grad_phi(theta, phi);
    if violation > T::zero() && rho > T::zero() {
        let w = rho * violation;
        let gt = problem.lower_grad_theta(theta, phi);
        let gp = problem.lower_grad_phi(theta, phi);
        for ((o, &a), &b) in grad_theta.iter_mut().zip(&gt).zip(&vf.grad_theta) {
            *o = *o + w * (a - b);
        }
        for (o, &a) in grad_phi.iter_mut().zip(&gp) {
            *o = *o + w * a;
        }
    }
    PenaltyEval { value: upper + rho * violation * violation / T::lit(2.0), upper, violation, grad_theta, grad_phi }
}

pub fn penalty_objective<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi: &[T],
    rho: T,
    cfg: &VfConfig<T>,
) -> Result<PenaltyEval<T>> {
    let vf = value_fn(problem, theta, cfg)?;
    Ok(penalty_with(problem, theta, phi, rho, &vf))
}

fn project_or_keep<T: Scalar>(set: &ConstraintSet<T>, x: Vec<T>) -> Result<Vec<T>> {
    if set.is_unconstrained() {
        Ok(x)
    } else {
        set.project(&x)
    }
}

fn zero<T: Scalar>() -> T {
    T::zero()
}

const MAX_BACKTRACKS: usize = 60;

/// Penalty method on `(θ, φ)`: every round runs projected gradient steps with
/// Armijo backtracking on the penalized objective, then multiplies ρ by
/// `rho_growth`. One trace entry is recorded per round.
pub fn solve_vf<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta0: &[T],
    phi0: &[T],
    cfg: &VfConfig<T>,
) -> Result<RunReport<T>> {
    cfg.validate()?;
    if theta0.len() != problem.dim_theta() || phi0.len() != problem.dim_phi() {
        return Err(BloError::Argument("starting point has the wrong dimension".into()));
    }
    let counted = Counted::new(problem);
    let clock = Clock::new(false);
    let mut report = RunReport::empty("vf".into(), 0);
    let uset = problem.upper_set();
    let lset = problem.lower_set();
    let mut theta = project_or_keep(uset, theta0.to_vec())?;
    let mut phi = project_or_keep(lset, phi0.to_vec())?;
    let mut vf = value_fn_from(&counted, &theta, &problem.initial_phi(), cfg)?;
    let mut rho = cfg.penalty_rho;
    let mut alpha = cfg.step;
    let armijo = T::lit(1e-4);
    let half = T::lit(0.5);
    for round in 0..cfg.outer_rounds {
        let mut cur = penalty_with(&counted, &theta, &phi, rho, &vf);
        for _ in 0..cfg.steps_per_round {
            if !cur.value.is_finite() {
                return Err(BloError::NumericalFailure { step: round, what: "non-finite penalty objective".into() });
            }
            let mut accepted = false;
            let mut trial_alpha = (alpha * T::lit(2.0)).min(cfg.step);
            for _ in 0..MAX_BACKTRACKS {
                let tt: Vec<T> = theta.iter().zip(&cur.grad_theta).map(|(&t, &g)| t - trial_alpha * g).collect();
                let tp: Vec<T> = phi.iter().zip(&cur.grad_phi).map(|(&p, &g)| p - trial_alpha * g).collect();
                let tt = project_or_keep(uset, tt)?;
                let tp = project_or_keep(lset, tp)?;
                let moved = norm_sq(&crate::linalg::sub(&tt, &theta)) + norm_sq(&crate::linalg::sub(&tp, &phi));
                if moved == T::zero() {
                    break;
                }
                let tvf = value_fn_from(&counted, &tt, &vf.phi_hat, cfg)?;
                let next = penalty_with(&counted, &tt, &tp, rho, &tvf);
                if next.value.is_finite() && next.value <= cur.value - armijo * moved / trial_alpha {
                    theta = tt;
                    phi = tp;
                    vf = tvf;
                    cur = next;
                    alpha = trial_alpha;
                    accepted = true;
                    break;
                }
                trial_alpha = trial_alpha * half;
            }
            if !accepted {
                break;
            }
        }
        if !cur.value.is_finite() {
            return Err(BloError::NumericalFailure { step: round, what: "non-finite penalty objective".into() });
        }
        let grad: Vec<T> = cur.grad_theta.iter().chain(&cur.grad_phi).copied().collect();
        let stat = stationarity(&theta, &cur.grad_theta, uset, cfg.step) + {
            let g = &grad[theta.len()..];
            stationarity(&phi, g, lset, cfg.step)
        };
        report.theta_trace.push(theta.clone());
        report.objective_trace.push(cur.upper);
        report.stationarity_trace.push(stat);
        report.violation_trace.push(cur.violation);
        report.counter_trace.push(counted.counters());
        report.wall_time_trace.push(clock.elapsed());
        rho = rho * cfg.rho_growth;
    }
    report.phi_final = phi;
    report.counters = counted.counters();
    report.termination = Termination::Budget;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{Kink, NonSingleton, Quad};
    use crate::implicit::hypergrad_if;
    use crate::ihvp::IhvpBackend;
    use crate::linalg::DenseMatrix;

    fn cfg(mu1: f64) -> VfConfig<f64> {
        VfConfig {
            mu1,
            mu2: 0.0,
            penalty_rho: 1.0,
            rho_growth: 10.0,
            inner_tol: 1e-12,
            outer_rounds: 5,
            inner_step: 0.4,
            inner_max_iters: 100_000,
            step: 0.5,
            steps_per_round: 300,
        }
    }

    /// `g = ½(φ - θ)²`
    fn fit() -> Quad {
        Quad::new(DenseMatrix::identity(1), vec![0.0], vec![0.0], 0.0)
    }

    #[test]
    fn perfect_fit_and_regularized_fit() {
        let q = fit();
        let v = value_fn(&q, &[0.8], &cfg(0.0)).unwrap();
        assert!(v.g_star_mu.abs() < 1e-20 && (v.phi_hat[0] - 0.8).abs() < 1e-11 && v.grad_theta[0].abs() < 1e-11);
        let mut c = cfg(1.0);
        c.mu2 = 0.25;
        let v = value_fn(&q, &[0.8], &c).unwrap();
        assert!((v.phi_hat[0] - 0.4).abs() < 1e-11);
        assert!((v.g_star_mu - (0.16 + 0.25)).abs() < 1e-11);
        assert!((v.grad_theta[0] - 0.4).abs() < 1e-11);
    }

    #[test]
    fn kink_value_function() {
        let v = value_fn(&Kink::new(), &[0.25], &cfg(0.0)).unwrap();
        assert!((v.phi_hat[0] - 0.5).abs() < 1e-12);
        assert!((v.g_star_mu - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn danskin_gradient_matches_fd() {
        let q = Quad::small();
        let c = cfg(0.3);
        let th = [0.4, -0.7];
        let v = value_fn(&q, &th, &c).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut tp = th.to_vec();
            let mut tm = th.to_vec();
            tp[j] += h;
            tm[j] -= h;
            let fd = (value_fn(&q, &tp, &c).unwrap().g_star_mu - value_fn(&q, &tm, &c).unwrap().g_star_mu) / (2.0 * h);
            assert!((fd - v.grad_theta[j]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn surrogate_sandwich() {
        let q = Quad::small();
        let th = [0.4, -0.7];
        let mut c = cfg(0.2);
        c.mu2 = 0.01;
        let exact = q.phi_star(&th);
        let g_star = q.lower_value(&th, &exact);
        let v = value_fn(&q, &th, &c).unwrap();
        assert!(g_star <= v.g_star_mu);
        assert!(v.g_star_mu <= g_star + 0.1 * norm_sq(&exact) + 0.01 + 1e-12);
    }

    #[test]
    fn non_unique_lower_needs_regularization() {
        let err = value_fn(&NonSingleton, &[0.3], &cfg(0.0)).unwrap_err();
        assert!(matches!(err, BloError::NonUniqueLowerSolution(_)));
        assert!(value_fn(&NonSingleton, &[0.3], &cfg(0.1)).is_ok());
    }

    #[test]
    fn hinge_algebra() {
        let q = fit();
        let vf = ValueFnEval { g_star_mu: 0.1, phi_hat: vec![0.0], grad_theta: vec![0.0], inner_iterations: 0 };
        let feasible = penalty_with(&q, &[0.5], &[0.4], 7.0, &vf);
        assert_eq!(feasible.value, feasible.upper);
        assert_eq!(feasible.grad_phi, q.upper_grad_phi(&[0.5], &[0.4]));
        let off = penalty_with(&q, &[0.5], &[1.5], 7.0, &vf);
        let v = 0.5 - 0.1;
        assert!((off.value - off.upper - 7.0 * v * v / 2.0).abs() < 1e-14);
    }

    #[test]
    fn solve_vf_tracks_if_solution() {
        let q = Quad::small();
        // Optimal θ solves θ + Wᵀ(φ*(θ) - φ★)/(1+λ) = 0; iterate on the IF gradient.
        let mut th = vec![0.0, 0.0];
        for _ in 0..2000 {
            let phi = q.phi_star(&th);
            let g = hypergrad_if(&q, &th, &phi, &IhvpBackend::cg(50, 1e-14)).unwrap().grad;
            th = th.iter().zip(&g).map(|(t, d)| t - 0.3 * d).collect();
        }
        let mut c = cfg(1e-6);
        c.outer_rounds = 8;
        c.steps_per_round = 400;
        let r = solve_vf(&q, &[0.0, 0.0], &[0.0; 3], &c).unwrap();
        let got = r.theta_final().unwrap();
        assert!(crate::linalg::max_abs_diff(got, &th) < 1e-2, "{got:?} vs {th:?}");
        let viol = &r.violation_trace;
        assert!(viol.windows(2).skip(1).all(|w| w[1] <= w[0] + 1e-12), "{viol:?}");
        assert!(*viol.last().unwrap() <= 1e-4, "{viol:?} {:?}", r.stationarity_trace);
    }

    #[test]
    fn solve_vf_finds_optimistic_solution() {
        let mut c = cfg(1e-3);
        c.outer_rounds = 6;
        let r = solve_vf(&NonSingleton, &[0.7], &[0.0, 0.0], &c).unwrap();
        assert!(r.theta_final().unwrap()[0].abs() < 1e-2);
        assert!((r.phi_final[1] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn zero_penalty_is_plain_minimization() {
        let mut c = cfg(0.1);
        c.penalty_rho = 0.0;
        c.outer_rounds = 2;
        let r = solve_vf(&NonSingleton, &[0.7], &[0.3, 0.0], &c).unwrap();
        assert!(r.theta_final().unwrap()[0].abs() < 1e-6);
        assert!((r.phi_final[1] - 1.0).abs() < 1e-6);
        assert!((r.phi_final[0] - 0.3).abs() < 1e-15);
    }
}

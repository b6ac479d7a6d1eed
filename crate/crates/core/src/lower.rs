//! Lower-level solvers: fixed-step trajectories for unrolling and
//! tolerance-certified solves for implicit differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{arg, BloError, Result};
use crate::linalg::{all_finite, norm, sub};
use crate::problem::BilevelProblem;
use crate::scalar::Scalar;

/// Upper bound on the scalars a stored trajectory may hold.
pub const TRAJECTORY_MEMORY_CAP: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LowerMethod {
    Gd,
    ProjectedGd,
    SignGd,
}

/// Recorded iterates `φ_0 … φ_K` of a constant-step lower solver.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTrajectory<T> {
    pub iterates: Vec<Vec<T>>,
    pub stepsize: T,
    pub method: LowerMethod,
    pub theta_snapshot: Vec<T>,
}

impl<T: Scalar> LowerTrajectory<T> {
    /// Trajectory with no steps (`K = 0`).
    pub fn constant(theta: &[T], phi0: &[T], stepsize: T, method: LowerMethod) -> Self {
        Self { iterates: vec![phi0.to_vec()], stepsize, method, theta_snapshot: theta.to_vec() }
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }

    pub fn last(&self) -> &[T] {
        self.iterates.last().expect("trajectory holds at least φ_0")
    }

    pub fn first(&self) -> &[T] {
        &self.iterates[0]
    }

    /// Rebuilds the trajectory from its first iterate.
    pub fn replay<P: BilevelProblem<T> + ?Sized>(&self, problem: &P) -> Result<Self> {
        run(problem, &self.theta_snapshot, self.first(), self.steps(), self.stepsize, self.method)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerSolution<T> {
    pub phi: Vec<T>,
    pub iterations: usize,
    /// Final stationarity measure (gradient or gradient-mapping norm).
    pub residual: T,
}

fn check_step_args<T: Scalar>(k: usize, beta: T, n: usize) -> Result<()> {
    if k == 0 {
        return arg("number of lower steps K must be at least 1");
    }
    if !(beta > T::zero()) || !beta.is_finite() {
        return arg(format!("stepsize must be positive, got {beta}"));
    }
    let needed = (k + 1).saturating_mul(n);
    if needed > TRAJECTORY_MEMORY_CAP {
        return Err(BloError::MemoryCap {
            needed,
            cap: TRAJECTORY_MEMORY_CAP,
            hint: "use forward-mode unrolling (FGU), which does not store iterates".into(),
        });
    }
    Ok(())
}

fn checked_grad<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi: &[T],
    step: usize,
) -> Result<Vec<T>> {
    let g = problem.lower_grad_phi(theta, phi);
    if !all_finite(&g) {
        return Err(BloError::NumericalFailure { step, what: "non-finite lower gradient".into() });
    }
    Ok(g)
}

fn run<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi0: &[T],
    k: usize,
    beta: T,
    method: LowerMethod,
) -> Result<LowerTrajectory<T>> {
    if phi0.len() != problem.dim_phi() {
        return arg(format!("φ_0 has length {} but n = {}", phi0.len(), problem.dim_phi()));
    }
    let mut iterates = Vec::with_capacity(k + 1);
    iterates.push(phi0.to_vec());
    for step in 1..=k {
        let prev = &iterates[step - 1];
        let g = checked_grad(problem, theta, prev, step)?;
        let next: Vec<T> = match method {
            LowerMethod::Gd => prev.iter().zip(&g).map(|(&p, &gi)| p - beta * gi).collect(),
            LowerMethod::SignGd => prev.iter().zip(&g).map(|(&p, &gi)| p - beta * gi.sign0()).collect(),
            LowerMethod::ProjectedGd => {
                let raw: Vec<T> = prev.iter().zip(&g).map(|(&p, &gi)| p - beta * gi).collect();
                problem.project_lower(&raw)?
            }
        };
        iterates.push(next);
    }
    Ok(LowerTrajectory { iterates, stepsize: beta, method, theta_snapshot: theta.to_vec() })
}

/// `K` gradient steps `φ_k = φ_{k-1} - β ∇_φ g(θ, φ_{k-1})`.
pub fn solve_gd<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi0: &[T],
    k: usize,
    beta: T,
) -> Result<LowerTrajectory<T>> {
    check_step_args(k, beta, problem.dim_phi())?;
    run(problem, theta, phi0, k, beta, LowerMethod::Gd)
}

/// Gradient steps followed by projection onto the lower set.
pub fn solve_projected_gd<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi0: &[T],
    k: usize,
    beta: T,
) -> Result<LowerTrajectory<T>> {
    check_step_args(k, beta, problem.dim_phi())?;
    run(problem, theta, phi0, k, beta, LowerMethod::ProjectedGd)
}

/// Sign-gradient steps, with `sign(0) = 0`.
pub fn solve_signgd<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi0: &[T],
    k: usize,
    beta: T,
) -> Result<LowerTrajectory<T>> {
    check_step_args(k, beta, problem.dim_phi())?;
    run(problem, theta, phi0, k, beta, LowerMethod::SignGd)
}

/// Norm of the gradient (unconstrained) or of the projected-gradient mapping
/// `(φ - P(φ - β∇g)) / β` (constrained). Returns the gradient as well.
pub fn lower_stationarity<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi: &[T],
    beta: T,
    step: usize,
) -> Result<(T, Vec<T>)> {
    let g = checked_grad(problem, theta, phi, step)?;
    if problem.lower_set().is_unconstrained() {
        return Ok((norm(&g), g));
    }
    let raw: Vec<T> = phi.iter().zip(&g).map(|(&p, &gi)| p - beta * gi).collect();
    let proj = problem.project_lower(&raw)?;
    Ok((norm(&sub(phi, &proj)) / beta, g))
}

/// Runs (projected) gradient descent until the stationarity measure drops to `tol`.
pub fn solve_to_tolerance<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi0: &[T],
    tol: T,
    max_iters: usize,
    beta: T,
) -> Result<LowerSolution<T>> {
    if !(beta > T::zero()) {
        return arg(format!("stepsize must be positive, got {beta}"));
    }
    if phi0.len() != problem.dim_phi() {
        return arg(format!("φ_0 has length {} but n = {}", phi0.len(), problem.dim_phi()));
    }
    let constrained = !problem.lower_set().is_unconstrained();
    let mut phi = phi0.to_vec();
    let mut best = (T::infinity(), phi.clone());
    for it in 0..=max_iters {
        let (res, g) = lower_stationarity(problem, theta, &phi, beta, it)?;
        if res < best.0 {
            best = (res, phi.clone());
        }
        if res <= tol {
            return Ok(LowerSolution { phi, iterations: it, residual: res });
        }
        if it == max_iters {
            break;
        }
        let raw: Vec<T> = phi.iter().zip(&g).map(|(&p, &gi)| p - beta * gi).collect();
        phi = if constrained { problem.project_lower(&raw)? } else { raw };
    }
    Err(BloError::NotConverged {
        iterations: max_iters,
        residual: best.0.as_f64(),
        best: best.1.iter().map(|v| v.as_f64()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{HalfNorm, Kink, Quad};

    #[test]
    fn gd_contracts_half_norm() {
        let p = HalfNorm { m: 1, n: 1 };
        let t = solve_gd(&p, &[0.0], &[1.0], 3, 0.5).unwrap();
        let xs: Vec<f64> = t.iterates.iter().map(|v| v[0]).collect();
        assert_eq!(xs, vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(t.steps(), 3);
    }

    #[test]
    fn gd_on_unconstrained_kink_reaches_theta() {
        let p = Kink::unconstrained();
        let t = solve_gd(&p, &[0.75], &[0.0], 200, 0.25).unwrap();
        assert!((t.last()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn projected_gd_stops_at_bound() {
        let p = Kink::new();
        let t = solve_projected_gd(&p, &[0.25], &[0.9], 100, 0.25).unwrap();
        assert!((t.last()[0] - 0.5).abs() < 1e-12);
        assert!(t.iterates.iter().skip(1).all(|v| v[0] >= 0.5 && v[0] <= 1.0));
    }

    #[test]
    fn projected_gd_matches_gd_when_box_is_slack() {
        let mut q = Quad::small();
        let free = solve_gd(&q, &[0.3, -0.2], &[0.0; 3], 30, 0.5).unwrap();
        q.lower = ConstraintSetF::uniform_box(3, -100.0, 100.0).unwrap();
        let boxed = solve_projected_gd(&q, &[0.3, -0.2], &[0.0; 3], 30, 0.5).unwrap();
        assert_eq!(free.iterates, boxed.iterates);
    }

    type ConstraintSetF = crate::constraint::ConstraintSet<f64>;

    #[test]
    fn signgd_unit_step_and_fixed_point() {
        let p = HalfNorm { m: 1, n: 2 };
        let t = solve_signgd(&p, &[0.0], &[1.0, -2.0], 1, 0.1).unwrap();
        assert!((t.last()[0] - 0.9).abs() < 1e-15 && (t.last()[1] + 1.9).abs() < 1e-15);
        let t = solve_signgd(&p, &[0.0], &[0.0, 0.0], 5, 0.1).unwrap();
        assert!(t.iterates.iter().all(|v| v == &vec![0.0, 0.0]));
    }

    #[test]
    fn signgd_oscillates_within_step() {
        let p = Kink::unconstrained();
        let t = solve_signgd(&p, &[0.75], &[0.5], 5, 0.05).unwrap();
        assert!((t.last()[0] - 0.75).abs() < 1e-12);
        let t = solve_signgd(&p, &[0.75], &[0.5], 40, 0.05).unwrap();
        assert!(t.iterates.iter().skip(5).all(|v| (v[0] - 0.75).abs() <= 0.05 + 1e-12));
    }

    #[test]
    fn replay_is_bit_exact() {
        let q = Quad::small();
        let t = solve_gd(&q, &[0.1, 0.2], &[1.0, 2.0, 3.0], 17, 0.4).unwrap();
        assert_eq!(t.replay(&q).unwrap(), t);
    }

    #[test]
    fn gd_descends_monotonically() {
        let q = Quad::small();
        let th = [0.4, -0.7];
        let t = solve_gd(&q, &th, &[1.0, -1.0, 0.5], 50, 1.0 / 1.5).unwrap();
        let vals: Vec<f64> = t.iterates.iter().map(|p| q.lower_value(&th, p)).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn argument_checks() {
        let q = Quad::small();
        assert!(matches!(solve_gd(&q, &[0.0, 0.0], &[0.0; 3], 0, 0.1), Err(BloError::Argument(_))));
        assert!(matches!(solve_gd(&q, &[0.0, 0.0], &[0.0; 3], 3, 0.0), Err(BloError::Argument(_))));
        let big = HalfNorm { m: 1, n: 1_000_000 };
        let err = solve_gd(&big, &[0.0], &vec![0.0; 1_000_000], 20, 0.1).unwrap_err();
        assert!(matches!(err, BloError::MemoryCap { .. }));
    }

    #[test]
    fn tolerance_solve() {
        let q = Quad::small();
        let th = [0.4, -0.7];
        let sol = solve_to_tolerance(&q, &th, &[0.0; 3], 1e-10, 10_000, 1.0 / 1.5).unwrap();
        let exact = q.phi_star(&th);
        assert!(crate::linalg::max_abs_diff(&sol.phi, &exact) < 1e-9);
        let at_opt = solve_to_tolerance(&q, &th, &exact, 1e-6, 10, 0.5).unwrap();
        assert_eq!(at_opt.iterations, 0);
        assert_eq!(at_opt.phi, exact);
        let err = solve_to_tolerance(&q, &th, &[5.0; 3], 1e-14, 1, 0.01).unwrap_err();
        assert!(matches!(err, BloError::NotConverged { iterations: 1, .. }));
    }

    #[test]
    fn constrained_tolerance_uses_gradient_mapping() {
        let p = Kink::new();
        let sol = solve_to_tolerance(&p, &[0.25], &[1.0], 1e-12, 1000, 0.25).unwrap();
        assert!((sol.phi[0] - 0.5).abs() < 1e-12);
    }
}

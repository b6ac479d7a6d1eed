//! Finite-difference references for hypergradients and for the oracles themselves.

use blo_core::linalg::{dot, norm, sub};
use blo_core::{solve_to_tolerance, BilevelProblem, BloError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::util::normal_vec;
use crate::TestProblem;

/// Parameters of the lower solve run at every probe.
#[derive(Debug, Clone, Copy)]
pub struct FdLowerSolve {
    pub tol: f64,
    pub beta: f64,
    pub max_iters: usize,
}

const MAX_LOWER_ITERS: usize = 5_000_000;

impl FdLowerSolve {
    pub fn for_problem<P: TestProblem + ?Sized>(problem: &P, theta: &[f64], tol: f64) -> Self {
        Self { tol, beta: 1.0 / (1.1 * problem.lower_smoothness(theta)), max_iters: MAX_LOWER_ITERS }
    }
}

/// `f(θ, φ̃(θ))` with `φ̃` from (projected) gd started at `warm`, or from the
/// supplied solution map when the lower problem is coupled.
pub fn reduced_objective<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    theta: &[f64],
    warm: &[f64],
    solve: &FdLowerSolve,
) -> Result<(f64, Vec<f64>)> {
    let phi = if problem.coupled_lower() {
        problem
            .analytic_solution(theta)
            .ok_or_else(|| BloError::Config("coupled lower problem without a solution map".into()))?
    } else {
        solve_to_tolerance(problem, theta, warm, solve.tol, solve.max_iters, solve.beta)?.phi
    };
    Ok((problem.upper_value(theta, &phi), phi))
}

fn shifted(theta: &[f64], j: usize, by: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    t[j] += by;
    t
}

/// Central differences of the reduced objective with explicit lower-solve settings.
pub fn finite_diff_with<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    theta: &[f64],
    h: f64,
    solve: &FdLowerSolve,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(BloError::Argument(format!("step h must be positive, got {h}")));
    }
    let (_, base) = reduced_objective(problem, theta, &problem.initial_phi(), solve)?;
    (0..theta.len())
        .map(|j| {
            let (fp, _) = reduced_objective(problem, &shifted(theta, j, h), &base, solve)?;
            let (fm, _) = reduced_objective(problem, &shifted(theta, j, -h), &base, solve)?;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// Central-difference hypergradient; the lower problem is re-solved to
/// `lower_tol` at each of the `2m` probes with stepsize from the problem's
/// smoothness bound.
pub fn finite_diff_hypergrad<P: TestProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    h: f64,
    lower_tol: f64,
) -> Result<Vec<f64>> {
    finite_diff_with(problem, theta, h, &FdLowerSolve::for_problem(problem, theta, lower_tol))
}

/// Backward and forward differences `(F(θ) - F(θ - h e_j))/h` and `(F(θ + h e_j) - F(θ))/h`.
pub fn one_sided_differences<P: TestProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    h: f64,
    lower_tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let solve = FdLowerSolve::for_problem(problem, theta, lower_tol);
    let (f0, base) = reduced_objective(problem, theta, &problem.initial_phi(), &solve)?;
    let mut left = Vec::with_capacity(theta.len());
    let mut right = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let (fm, _) = reduced_objective(problem, &shifted(theta, j, -h), &base, &solve)?;
        let (fp, _) = reduced_objective(problem, &shifted(theta, j, h), &base, &solve)?;
        left.push((f0 - fm) / h);
        right.push((fp - f0) / h);
    }
    Ok((left, right))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinkReport {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    /// Largest coordinate gap between the one-sided estimates.
    pub gap: f64,
    pub kink: bool,
}

pub fn detect_kink<P: TestProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    h: f64,
    lower_tol: f64,
    threshold: f64,
) -> Result<KinkReport> {
    let (left, right) = one_sided_differences(problem, theta, h, lower_tol)?;
    let gap = left.iter().zip(&right).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(KinkReport { left, right, gap, kink: gap >= threshold })
}

/// Relative disagreement of each oracle with central differences along a random direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleCheck {
    pub upper_grad_theta: f64,
    pub upper_grad_phi: f64,
    pub lower_grad_theta: f64,
    pub lower_grad_phi: f64,
    pub hvp: f64,
    pub cross_jvp: f64,
}

impl OracleCheck {
    pub fn worst(&self) -> f64 {
        [self.upper_grad_theta, self.upper_grad_phi, self.lower_grad_theta, self.lower_grad_phi, self.hvp, self.cross_jvp]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = normal_vec(rng, n, 1.0);
    let s = norm(&v).max(f64::MIN_POSITIVE);
    v.iter().map(|x| x / s).collect()
}

fn along(x: &[f64], v: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + t * b).collect()
}

fn scalar_err(exact: f64, approx: f64) -> f64 {
    (exact - approx).abs() / exact.abs().max(1.0)
}

fn vector_err(exact: &[f64], approx: &[f64]) -> f64 {
    norm(&sub(exact, approx)) / norm(exact).max(1.0)
}

/// Checks gradients against value differences, and the HVP and cross-JVP against
/// gradient differences, at `(θ, φ)` with step `h`.
pub fn check_oracles<P: BilevelProblem<f64> + ?Sized>(
    problem: &P,
    theta: &[f64],
    phi: &[f64],
    h: f64,
    seed: u64,
) -> OracleCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vt = unit_direction(&mut rng, theta.len());
    let vp = unit_direction(&mut rng, phi.len());
    let (tp, tm) = (along(theta, &vt, h), along(theta, &vt, -h));
    let (pp, pm) = (along(phi, &vp, h), along(phi, &vp, -h));
    let c = 0.5 / h;

    let upper_grad_theta = scalar_err(
        dot(&problem.upper_grad_theta(theta, phi), &vt),
        c * (problem.upper_value(&tp, phi) - problem.upper_value(&tm, phi)),
    );
    let upper_grad_phi = scalar_err(
        dot(&problem.upper_grad_phi(theta, phi), &vp),
        c * (problem.upper_value(theta, &pp) - problem.upper_value(theta, &pm)),
    );
    let lower_grad_theta = scalar_err(
        dot(&problem.lower_grad_theta(theta, phi), &vt),
        c * (problem.lower_value(&tp, phi) - problem.lower_value(&tm, phi)),
    );
    let lower_grad_phi = scalar_err(
        dot(&problem.lower_grad_phi(theta, phi), &vp),
        c * (problem.lower_value(theta, &pp) - problem.lower_value(theta, &pm)),
    );
    let fd_hvp: Vec<f64> = sub(&problem.lower_grad_phi(theta, &pp), &problem.lower_grad_phi(theta, &pm))
        .into_iter()
        .map(|x| c * x)
        .collect();
    let hvp = vector_err(&problem.lower_hvp(theta, phi, &vp), &fd_hvp);
    let fd_cross: Vec<f64> = sub(&problem.lower_grad_theta(theta, &pp), &problem.lower_grad_theta(theta, &pm))
        .into_iter()
        .map(|x| c * x)
        .collect();
    let cross_jvp = vector_err(&problem.lower_cross_jvp(theta, phi, &vp), &fd_cross);
    OracleCheck { upper_grad_theta, upper_grad_phi, lower_grad_theta, lower_grad_phi, hvp, cross_jvp }
}

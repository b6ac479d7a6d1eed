//! Gradient-unrolling hypergradients over a recorded lower trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{arg, BloError, Result};
use crate::implicit::{ensure_finite, HypergradEstimate};
use crate::lower::{LowerMethod, LowerTrajectory};
use crate::problem::{BilevelProblem, Counted};
use crate::scalar::Scalar;

/// Cap on the `m·n` scalars held by forward-mode unrolling.
pub const FGU_MEMORY_CAP: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UnrollMode {
    Fgu,
    Bgu,
    /// Reverse recursion over the last `tau` steps only.
    Tgu { tau: usize },
    SignGdFree,
}

impl UnrollMode {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Fgu => "fgu",
            Self::Bgu => "bgu",
            Self::Tgu { .. } => "tgu",
            Self::SignGdFree => "signgd-free",
        }
    }

    /// Lower method the mode differentiates through.
    pub fn lower_method(&self) -> LowerMethod {
        match self {
            Self::SignGdFree => LowerMethod::SignGd,
            _ => LowerMethod::Gd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnrollPlan<T> {
    pub mode: UnrollMode,
    pub trajectory: LowerTrajectory<T>,
}

/// Jacobians of one gd step `φ_k = φ_{k-1} - β∇_φ g(θ, φ_{k-1})`:
/// `A_k = I - β∇²_φφ g` and `B_k = -β∇²_φθ g`.
pub struct StepJacobians<'a, T, P: ?Sized> {
    problem: &'a P,
    theta: &'a [T],
    phi_prev: &'a [T],
    beta: T,
}

impl<'a, T: Scalar, P: BilevelProblem<T> + ?Sized> StepJacobians<'a, T, P> {
    /// `A_k v` (one HVP). `A_k` is symmetric, so this is also `A_kᵀ v`.
    pub fn a(&self, v: &[T]) -> Vec<T> {
        if self.beta == T::zero() {
            return v.to_vec();
        }
        let hv = self.problem.lower_hvp(self.theta, self.phi_prev, v);
        v.iter().zip(&hv).map(|(&vi, &hi)| vi - self.beta * hi).collect()
    }

    /// `B_kᵀ d` (one cross-JVP), an m-vector.
    pub fn b_t(&self, d: &[T]) -> Vec<T> {
        if self.beta == T::zero() {
            return vec![T::zero(); self.theta.len()];
        }
        self.problem
            .lower_cross_jvp(self.theta, self.phi_prev, d)
            .into_iter()
            .map(|x| -self.beta * x)
            .collect()
    }
}

pub fn step_jacobians<'a, T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &'a P,
    theta: &'a [T],
    phi_prev: &'a [T],
    beta: T,
    method: LowerMethod,
) -> Result<StepJacobians<'a, T, P>> {
    if method != LowerMethod::Gd {
        return Err(BloError::UnsupportedMap(format!(
            "only the plain gd map can be differentiated step by step, got {method:?}"
        )));
    }
    Ok(StepJacobians { problem, theta, phi_prev, beta })
}

fn check_trajectory<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    traj: &LowerTrajectory<T>,
    expected: LowerMethod,
) -> Result<()> {
    if traj.iterates.is_empty() {
        return Err(BloError::IncompleteTrajectory("trajectory holds no iterates".into()));
    }
    if let Some(k) = traj.iterates.iter().position(|p| p.len() != problem.dim_phi()) {
        return Err(BloError::IncompleteTrajectory(format!(
            "iterate {k} has length {} but n = {}",
            traj.iterates[k].len(),
            problem.dim_phi()
        )));
    }
    if traj.method != expected {
        return Err(BloError::UnsupportedMap(format!(
            "engine expects a {expected:?} trajectory, got {:?}",
            traj.method
        )));
    }
    if theta.len() != problem.dim_theta() {
        return arg(format!("θ has length {} but m = {}", theta.len(), problem.dim_theta()));
    }
    if traj.theta_snapshot.as_slice() != theta {
        return arg("trajectory was recorded at a different θ");
    }
    Ok(())
}

/// Forward mode: propagates the rows of `Z_k = dφ_k/dθ` as n m-vectors.
pub fn hypergrad_fgu<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    traj: &LowerTrajectory<T>,
) -> Result<HypergradEstimate<T>> {
    check_trajectory(problem, theta, traj, LowerMethod::Gd)?;
    let (m, n) = (problem.dim_theta(), problem.dim_phi());
    let needed = m.saturating_mul(n);
    if needed > FGU_MEMORY_CAP {
        return Err(BloError::MemoryCap {
            needed,
            cap: FGU_MEMORY_CAP,
            hint: "use reverse-mode unrolling (BGU), which stores only vectors".into(),
        });
    }
    let counted = Counted::new(problem);
    let beta = traj.stepsize;
    // rows[j] = Z_kᵀ e_j
    let mut rows: Vec<Vec<T>> = vec![vec![T::zero(); m]; n];
    let mut unit = vec![T::zero(); n];
    for k in 1..=traj.steps() {
        let jac = step_jacobians(&counted, theta, &traj.iterates[k - 1], beta, LowerMethod::Gd)?;
        let mut next = Vec::with_capacity(n);
        for j in 0..n {
            unit[j] = T::one();
            let a_col = jac.a(&unit);
            let mut row = jac.b_t(&unit);
            unit[j] = T::zero();
            for (i, &aij) in a_col.iter().enumerate() {
                if aij != T::zero() {
                    for (r, &z) in row.iter_mut().zip(&rows[i]) {
                        *r = *r + aij * z;
                    }
                }
            }
            next.push(row);
        }
        rows = next;
    }
    let phi_k = traj.last();
    let mut grad = counted.upper_grad_theta(theta, phi_k);
    let d = counted.upper_grad_phi(theta, phi_k);
    for (dj, row) in d.iter().zip(&rows) {
        for (g, &z) in grad.iter_mut().zip(row) {
            *g = *g + *dj * z;
        }
    }
    ensure_finite(&grad, "hypergradient")?;
    Ok(HypergradEstimate::plain(grad, "fgu", counted.counters()))
}

fn reverse<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    traj: &LowerTrajectory<T>,
    tau: usize,
    tag: &str,
) -> Result<HypergradEstimate<T>> {
    let counted = Counted::new(problem);
    let phi_k = traj.last();
    let mut c = counted.upper_grad_theta(theta, phi_k);
    let mut d = counted.upper_grad_phi(theta, phi_k);
    let big_k = traj.steps();
    for k in (big_k + 1 - tau..=big_k).rev() {
        let jac = step_jacobians(&counted, theta, &traj.iterates[k - 1], traj.stepsize, LowerMethod::Gd)?;
        let bt = jac.b_t(&d);
        for (ci, bi) in c.iter_mut().zip(bt) {
            *ci = *ci + bi;
        }
        d = jac.a(&d);
    }
    ensure_finite(&c, "hypergradient")?;
    Ok(HypergradEstimate::plain(c, tag, counted.counters()))
}

/// Reverse mode: `c ← c + B_kᵀd`, `d ← A_kᵀd` for `k = K … 1`.
pub fn hypergrad_bgu<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    traj: &LowerTrajectory<T>,
) -> Result<HypergradEstimate<T>> {
    check_trajectory(problem, theta, traj, LowerMethod::Gd)?;
    reverse(problem, theta, traj, traj.steps(), "bgu")
}

/// Reverse mode over the last `tau` steps, treating `dφ_{K-τ}/dθ = 0`.
pub fn hypergrad_tgu<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    traj: &LowerTrajectory<T>,
    tau: usize,
) -> Result<HypergradEstimate<T>> {
    check_trajectory(problem, theta, traj, LowerMethod::Gd)?;
    if tau > traj.steps() {
        return arg(format!("truncation τ = {tau} exceeds K = {}", traj.steps()));
    }
    reverse(problem, theta, traj, tau, "tgu")
}

/// `∇_θ f(θ, φ_K)` for a signGD trajectory, whose iterates are locally
/// constant in θ.
pub fn hypergrad_signgd_free<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    traj: &LowerTrajectory<T>,
) -> Result<HypergradEstimate<T>> {
    check_trajectory(problem, theta, traj, LowerMethod::SignGd)?;
    let counted = Counted::new(problem);
    let grad = counted.upper_grad_theta(theta, traj.last());
    ensure_finite(&grad, "hypergradient")?;
    Ok(HypergradEstimate::plain(grad, "signgd-free", counted.counters()))
}

/// Dispatches on the plan's mode.
pub fn hypergrad_unroll<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    plan: &UnrollPlan<T>,
) -> Result<HypergradEstimate<T>> {
    match plan.mode {
        UnrollMode::Fgu => hypergrad_fgu(problem, theta, &plan.trajectory),
        UnrollMode::Bgu => hypergrad_bgu(problem, theta, &plan.trajectory),
        UnrollMode::Tgu { tau } => hypergrad_tgu(problem, theta, &plan.trajectory, tau),
        UnrollMode::SignGdFree => hypergrad_signgd_free(problem, theta, &plan.trajectory),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{Bilinear, HalfNorm, Quad};
    use crate::lower::{solve_gd, solve_signgd, solve_projected_gd};
    use crate::linalg::max_abs_diff;

    #[test]
    fn step_jacobian_examples() {
        let p = HalfNorm { m: 1, n: 2 };
        let j = step_jacobians(&p, &[0.0], &[1.0, 1.0], 0.5, LowerMethod::Gd).unwrap();
        assert_eq!(j.a(&[2.0, -4.0]), vec![1.0, -2.0]);
        let j = step_jacobians(&Bilinear, &[0.3], &[1.0], 0.2, LowerMethod::Gd).unwrap();
        assert_eq!(j.a(&[3.0]), vec![3.0]);
        assert_eq!(j.b_t(&[3.0]), vec![-0.2 * 3.0]);
        let j = step_jacobians(&Bilinear, &[0.3], &[1.0], 0.0, LowerMethod::Gd).unwrap();
        assert_eq!(j.a(&[3.0]), vec![3.0]);
        assert_eq!(j.b_t(&[3.0]), vec![0.0]);
        assert!(matches!(
            step_jacobians(&Bilinear, &[0.3], &[1.0], 0.2, LowerMethod::SignGd),
            Err(BloError::UnsupportedMap(_))
        ));
    }

    fn fd_unrolled(q: &Quad, th: &[f64], phi0: &[f64], k: usize, beta: f64) -> Vec<f64> {
        let h = 1e-6;
        (0..th.len())
            .map(|j| {
                let mut tp = th.to_vec();
                let mut tm = th.to_vec();
                tp[j] += h;
                tm[j] -= h;
                let fp = q.upper_value(&tp, solve_gd(q, &tp, phi0, k, beta).unwrap().last());
                let fm = q.upper_value(&tm, solve_gd(q, &tm, phi0, k, beta).unwrap().last());
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn fgu_bgu_agree_and_match_fd() {
        let q = Quad::small();
        let th = [0.4, -0.7];
        let phi0 = [0.5, 0.1, -0.2];
        for k in [1, 2, 7, 40] {
            let t = solve_gd(&q, &th, &phi0, k, 0.5).unwrap();
            let f = hypergrad_fgu(&q, &th, &t).unwrap();
            let b = hypergrad_bgu(&q, &th, &t).unwrap();
            assert!(max_abs_diff(&f.grad, &b.grad) < 1e-12, "K = {k}");
            assert!(max_abs_diff(&b.grad, &fd_unrolled(&q, &th, &phi0, k, 0.5)) < 1e-6);
            assert_eq!((b.counters_delta.hvps, b.counters_delta.jvps), (k as u64, k as u64));
            assert_eq!((f.counters_delta.hvps, f.counters_delta.jvps), (3 * k as u64, 3 * k as u64));
        }
    }

    #[test]
    fn one_step_formula() {
        let q = Quad::small();
        let th = [0.4, -0.7];
        let phi0 = [0.5, 0.1, -0.2];
        let beta = 0.3;
        let t = solve_gd(&q, &th, &phi0, 1, beta).unwrap();
        let est = hypergrad_fgu(&q, &th, &t).unwrap();
        let d = q.upper_grad_phi(&th, t.last());
        let cross = q.lower_cross_jvp(&th, &phi0, &d);
        let expect: Vec<f64> = q.upper_grad_theta(&th, t.last()).iter().zip(&cross).map(|(a, c)| a - beta * c).collect();
        assert!(max_abs_diff(&est.grad, &expect) < 1e-15);
    }

    #[test]
    fn truncation_edges() {
        let q = Quad::small();
        let th = [0.4, -0.7];
        let t = solve_gd(&q, &th, &[0.0; 3], 10, 0.5).unwrap();
        let full = hypergrad_bgu(&q, &th, &t).unwrap();
        assert_eq!(hypergrad_tgu(&q, &th, &t, 10).unwrap().grad, full.grad);
        assert_eq!(hypergrad_tgu(&q, &th, &t, 0).unwrap().grad, q.upper_grad_theta(&th, t.last()));
        let mut last = f64::INFINITY;
        for tau in 0..=10 {
            let e = max_abs_diff(&hypergrad_tgu(&q, &th, &t, tau).unwrap().grad, &full.grad);
            assert!(e <= last + 1e-15);
            last = e;
        }
        assert!(hypergrad_tgu(&q, &th, &t, 11).is_err());
    }

    #[test]
    fn zero_steps_and_flat_upper() {
        let q = Quad::small();
        let th = [0.4, -0.7];
        let t = LowerTrajectory::constant(&th, &[0.1, 0.2, 0.3], 0.5, LowerMethod::Gd);
        let est = hypergrad_bgu(&q, &th, &t).unwrap();
        assert_eq!(est.grad, q.upper_grad_theta(&th, &[0.1, 0.2, 0.3]));
        let p = HalfNorm { m: 2, n: 2 };
        let t = solve_gd(&p, &[1.0, 2.0], &[1.0, 1.0], 5, 0.5).unwrap();
        assert_eq!(hypergrad_bgu(&p, &[1.0, 2.0], &t).unwrap().grad, vec![2.0, 4.0]);
    }

    #[test]
    fn signgd_free_uses_no_second_order_calls() {
        let p = HalfNorm { m: 2, n: 2 };
        let t = solve_signgd(&p, &[1.0, 2.0], &[1.0, -1.0], 4, 0.1).unwrap();
        let est = hypergrad_signgd_free(&p, &[1.0, 2.0], &t).unwrap();
        assert_eq!(est.grad, vec![2.0, 4.0]);
        assert_eq!((est.counters_delta.hvps, est.counters_delta.jvps), (0, 0));
        assert!(matches!(hypergrad_bgu(&p, &[1.0, 2.0], &t), Err(BloError::UnsupportedMap(_))));
    }

    #[test]
    fn rejects_projected_and_mismatched_trajectories() {
        let mut q = Quad::small();
        q.lower = crate::constraint::ConstraintSet::uniform_box(3, -1.0, 1.0).unwrap();
        let t = solve_projected_gd(&q, &[0.1, 0.1], &[0.0; 3], 3, 0.5).unwrap();
        assert!(matches!(hypergrad_bgu(&q, &[0.1, 0.1], &t), Err(BloError::UnsupportedMap(_))));
        let q = Quad::small();
        let t = solve_gd(&q, &[0.1, 0.1], &[0.0; 3], 3, 0.5).unwrap();
        assert!(hypergrad_bgu(&q, &[0.2, 0.1], &t).is_err());
        let mut broken = t.clone();
        broken.iterates.clear();
        assert!(matches!(hypergrad_fgu(&q, &[0.1, 0.1], &broken), Err(BloError::IncompleteTrajectory(_))));
    }
}

//! Implicit-function hypergradients, unconstrained and with linear inequality
//! constraints on the lower level (active-set KKT differentiation).

use serde::{Deserialize, Serialize};

use crate::error::{BloError, Result};
use crate::ihvp::{ihvp, HessianOperator, IhvpBackend, IhvpDiagnostics};
use crate::linalg::{all_finite, dot, norm, sub, unit, DenseMatrix};
use crate::problem::{BilevelProblem, Counted, OracleCounters};
use crate::scalar::Scalar;

/// Default absolute tolerance for classifying a constraint as active.
pub const DEFAULT_ACTIVE_TOL: f64 = 1e-7;

/// Estimated total derivative `df/dθ` plus diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergradEstimate<T> {
    pub grad: Vec<T>,
    pub backend_tag: String,
    pub linear_solve_residual: Option<T>,
    pub linear_solve_iters: usize,
    pub active_set: Option<Vec<usize>>,
    pub counters_delta: OracleCounters,
    pub warning: Option<String>,
}

impl<T: Scalar> HypergradEstimate<T> {
    pub(crate) fn plain(grad: Vec<T>, tag: &str, counters_delta: OracleCounters) -> Self {
        Self {
            grad,
            backend_tag: tag.to_string(),
            linear_solve_residual: None,
            linear_solve_iters: 0,
            active_set: None,
            counters_delta,
            warning: None,
        }
    }
}

pub(crate) fn ensure_finite<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    if all_finite(v) {
        Ok(())
    } else {
        Err(BloError::NumericalFailure { step: 0, what: format!("non-finite {what}") })
    }
}

/// `∇²_φφ g(θ, φ)` as an operator, with per-sample products and Fisher vectors
/// drawn from the problem's per-sample lower gradients.
pub struct LowerHessian<'a, T, P: ?Sized> {
    pub problem: &'a P,
    pub theta: &'a [T],
    pub phi: &'a [T],
}

impl<'a, T: Scalar, P: BilevelProblem<T> + ?Sized> HessianOperator<T> for LowerHessian<'a, T, P> {
    fn apply(&self, v: &[T]) -> Vec<T> {
        self.problem.lower_hvp(self.theta, self.phi, v)
    }

    fn num_samples(&self) -> usize {
        self.problem.num_samples()
    }

    fn apply_sample(&self, i: usize, v: &[T]) -> Vec<T> {
        self.problem.sample_lower_hvp(self.theta, self.phi, v, i)
    }

    fn curvature_vectors(&self, rank: usize) -> Vec<Vec<T>> {
        let n = self.problem.num_samples();
        if n == 0 {
            vec![self.problem.lower_grad_phi(self.theta, self.phi)]
        } else {
            (0..rank.min(n))
                .map(|i| self.problem.sample_lower_grad_phi(self.theta, self.phi, i))
                .collect()
        }
    }
}

fn solve_with<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    backend: &IhvpBackend<T>,
    problem: &P,
    theta: &[T],
    phi: &[T],
    rhs: &[T],
) -> Result<(Vec<T>, IhvpDiagnostics<T>)> {
    let op = LowerHessian { problem, theta, phi };
    ihvp(backend, &op, rhs)
}

fn check_dims<T: Scalar, P: BilevelProblem<T> + ?Sized>(problem: &P, theta: &[T], phi: &[T]) -> Result<()> {
    if theta.len() != problem.dim_theta() || phi.len() != problem.dim_phi() {
        return Err(BloError::Argument(format!(
            "expected θ ∈ R^{} and φ ∈ R^{}, got {} and {}",
            problem.dim_theta(),
            problem.dim_phi(),
            theta.len(),
            phi.len()
        )));
    }
    Ok(())
}

/// Shared by both IF entry points so an empty active set reproduces the
/// unconstrained estimate exactly.
fn assemble_unconstrained<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    counted: &Counted<'_, P>,
    theta: &[T],
    phi: &[T],
    backend: &IhvpBackend<T>,
) -> Result<HypergradEstimate<T>> {
    let g_theta = counted.upper_grad_theta(theta, phi);
    let g_phi = counted.upper_grad_phi(theta, phi);
    let (w, diag) = solve_with(backend, counted, theta, phi, &g_phi)?;
    ensure_finite(&w, "inverse-Hessian product")?;
    let cross = counted.lower_cross_jvp(theta, phi, &w);
    let grad = sub(&g_theta, &cross);
    ensure_finite(&grad, "hypergradient")?;
    Ok(HypergradEstimate {
        grad,
        backend_tag: backend.tag().to_string(),
        linear_solve_residual: diag.residual,
        linear_solve_iters: diag.iterations,
        active_set: None,
        counters_delta: counted.counters(),
        warning: diag.warning,
    })
}

/// `∇_θ f - ∇²_θφ g · H⁻¹ ∇_φ f` at a (caller-certified) stationary `φ̃`.
pub fn hypergrad_if<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi: &[T],
    backend: &IhvpBackend<T>,
) -> Result<HypergradEstimate<T>> {
    check_dims(problem, theta, phi)?;
    if !problem.lower_set().is_unconstrained() {
        return Err(BloError::Config(
            "lower set is constrained; use the constrained implicit engine".into(),
        ));
    }
    let counted = Counted::new(problem);
    assemble_unconstrained(&counted, theta, phi, backend)
}

/// Rows `i` with `|a_iᵀφ - b_i| <= tol`.
pub fn active_set<T: Scalar>(a: &DenseMatrix<T>, b: &[T], phi: &[T], tol: T) -> Vec<usize> {
    (0..a.rows).filter(|&i| (dot(a.row(i), phi) - b[i]).abs() <= tol).collect()
}

struct ActiveRows<T> {
    /// Original indices of the rows that define the active set.
    indices: Vec<usize>,
    /// Linearly independent subset used in the reduced system.
    rows: Vec<Vec<T>>,
    /// Rows whose negation is also active (equalities).
    equality: Vec<bool>,
}

fn reduce_active_rows<T: Scalar>(a: &DenseMatrix<T>, active: &[usize]) -> ActiveRows<T> {
    let mut rows: Vec<Vec<T>> = Vec::new();
    let mut basis: Vec<Vec<T>> = Vec::new();
    let mut kept_idx: Vec<usize> = Vec::new();
    let tol = T::lit(1e-10);
    for &i in active {
        let r = a.row(i).to_vec();
        let rn = norm(&r);
        if rn == T::zero() {
            continue;
        }
        let mut q = r.clone();
        for bvec in &basis {
            let c = dot(&q, bvec);
            for (qi, &bi) in q.iter_mut().zip(bvec) {
                *qi = *qi - c * bi;
            }
        }
        let qn = norm(&q);
        if qn > tol * rn {
            basis.push(q.iter().map(|&v| v / qn).collect());
            rows.push(r);
            kept_idx.push(i);
        }
    }
    let equality = kept_idx
        .iter()
        .map(|&i| {
            active.iter().any(|&j| {
                j != i && (0..a.cols).all(|c| (a.get(j, c) + a.get(i, c)).abs() <= tol * T::one().max(a.get(i, c).abs()))
            })
        })
        .collect();
    ActiveRows { indices: active.to_vec(), rows, equality }
}

/// Checks strict complementarity: every inequality in the active set must carry
/// a multiplier above `tol`. Multipliers solve `min ‖∇_φ g + Āᵀλ‖`.
fn check_multipliers<T: Scalar>(rows: &ActiveRows<T>, grad_phi: &[T], tol: T) -> Result<Vec<T>> {
    let r = rows.rows.len();
    let mut gram = DenseMatrix::zeros(r, r);
    let mut rhs = vec![T::zero(); r];
    for i in 0..r {
        for j in 0..r {
            gram.set(i, j, dot(&rows.rows[i], &rows.rows[j]));
        }
        rhs[i] = -dot(&rows.rows[i], grad_phi);
    }
    let lambda = gram.solve(&rhs, T::lit(1e-12)).map_err(|_| {
        BloError::DegenerateActiveSet("active constraint rows are rank deficient".into())
    })?;
    for (k, &l) in lambda.iter().enumerate() {
        if !rows.equality[k] && l <= tol {
            return Err(BloError::DegenerateActiveSet(format!(
                "constraint is weakly active (multiplier {l:e}); the solution map is not differentiable here"
            )));
        }
    }
    Ok(lambda)
}

fn lowered_constraints<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
) -> Result<(DenseMatrix<T>, Vec<T>)> {
    problem.lower_set().as_linear_inequality(problem.dim_phi())
}

/// Hypergradient through the active-set KKT system of a linearly constrained
/// lower problem.
///
/// With `U = H⁻¹Āᵀ`, `S = ĀU` and `w = H⁻¹∇_φ f`, the result is
/// `∇_θ f - ∇²_θφ g · (w - U S⁻¹ Ā w)`, which is the adjoint form of
/// `dφ*/dθ = H⁻¹(-∇²_φθ g - Āᵀ∇λ̄)` with `∇λ̄ = -S⁻¹ Ā H⁻¹ ∇²_φθ g`.
pub fn hypergrad_if_constrained<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi: &[T],
    backend: &IhvpBackend<T>,
    active_tol: T,
) -> Result<HypergradEstimate<T>> {
    check_dims(problem, theta, phi)?;
    let counted = Counted::new(problem);
    if problem.lower_set().is_unconstrained() {
        let mut est = assemble_unconstrained(&counted, theta, phi, backend)?;
        est.active_set = Some(Vec::new());
        return Ok(est);
    }
    let (a, b) = lowered_constraints(problem)?;
    let active = active_set(&a, &b, phi, active_tol);
    if active.is_empty() {
        let mut est = assemble_unconstrained(&counted, theta, phi, backend)?;
        est.active_set = Some(active);
        return Ok(est);
    }
    let rows = reduce_active_rows(&a, &active);
    let grad_phi_g = counted.lower_grad_phi(theta, phi);
    check_multipliers(&rows, &grad_phi_g, active_tol)?;

    let g_theta = counted.upper_grad_theta(theta, phi);
    let g_phi = counted.upper_grad_phi(theta, phi);
    let (w, diag) = solve_with(backend, &counted, theta, phi, &g_phi)?;
    let mut iters = diag.iterations;
    let mut worst_residual = diag.residual;
    let mut warning = diag.warning;
    let r = rows.rows.len();
    let mut cols: Vec<Vec<T>> = Vec::with_capacity(r);
    for row in &rows.rows {
        let (u, d) = solve_with(backend, &counted, theta, phi, row)?;
        iters += d.iterations;
        worst_residual = match (worst_residual, d.residual) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, y) => x.or(y),
        };
        warning = warning.or(d.warning);
        cols.push(u);
    }
    let mut s = DenseMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            s.set(i, j, dot(&rows.rows[i], &cols[j]));
        }
    }
    let aw: Vec<T> = rows.rows.iter().map(|row| dot(row, &w)).collect();
    let y = s.solve(&aw, T::lit(1e-12)).map_err(|_| {
        BloError::DegenerateActiveSet("reduced system Ā H⁻¹ Āᵀ is singular".into())
    })?;
    let mut p = w;
    for (u, &yj) in cols.iter().zip(&y) {
        for (pi, &ui) in p.iter_mut().zip(u) {
            *pi = *pi - yj * ui;
        }
    }
    ensure_finite(&p, "projected adjoint")?;
    let cross = counted.lower_cross_jvp(theta, phi, &p);
    let grad = sub(&g_theta, &cross);
    ensure_finite(&grad, "hypergradient")?;
    Ok(HypergradEstimate {
        grad,
        backend_tag: format!("{}+active-set", backend.tag()),
        linear_solve_residual: worst_residual,
        linear_solve_iters: iters,
        active_set: Some(rows.indices),
        counters_delta: counted.counters(),
        warning,
    })
}

/// Explicit implicit Jacobian `dφ*/dθ` (n×m) by the direct KKT formula.
///
/// Builds `∇²_φθ g` row by row from cross-JVPs against unit vectors, then
/// applies one inverse-Hessian product per column. Intended for small problems
/// and for cross-checking [`hypergrad_if_constrained`].
pub fn implicit_jacobian<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi: &[T],
    backend: &IhvpBackend<T>,
    active_tol: T,
) -> Result<DenseMatrix<T>> {
    check_dims(problem, theta, phi)?;
    let (n, m) = (problem.dim_phi(), problem.dim_theta());
    // mixed[i][j] = ∂(∇_φ g)_i / ∂θ_j
    let mixed: Vec<Vec<T>> = (0..n).map(|i| problem.lower_cross_jvp(theta, phi, &unit(n, i))).collect();
    let (a, b) = if problem.lower_set().is_unconstrained() {
        (DenseMatrix::zeros(0, n), Vec::new())
    } else {
        lowered_constraints(problem)?
    };
    let active = active_set(&a, &b, phi, active_tol);
    let rows = reduce_active_rows(&a, &active);
    if !rows.rows.is_empty() {
        let gphi = problem.lower_grad_phi(theta, phi);
        check_multipliers(&rows, &gphi, active_tol)?;
    }
    // H⁻¹ J columns and H⁻¹ Āᵀ columns
    let hinv_j: Vec<Vec<T>> = (0..m)
        .map(|j| {
            let col: Vec<T> = (0..n).map(|i| mixed[i][j]).collect();
            solve_with(backend, problem, theta, phi, &col).map(|x| x.0)
        })
        .collect::<Result<_>>()?;
    let hinv_at: Vec<Vec<T>> = rows
        .rows
        .iter()
        .map(|row| solve_with(backend, problem, theta, phi, row).map(|x| x.0))
        .collect::<Result<_>>()?;
    let r = rows.rows.len();
    let mut out = DenseMatrix::zeros(n, m);
    let mut s = DenseMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            s.set(i, j, dot(&rows.rows[i], &hinv_at[j]));
        }
    }
    for j in 0..m {
        // ∇λ̄ column j: -S⁻¹ Ā H⁻¹ J e_j
        let mut col = hinv_j[j].iter().map(|&v| -v).collect::<Vec<T>>();
        if r > 0 {
            let rhs: Vec<T> = rows.rows.iter().map(|row| dot(row, &hinv_j[j])).collect();
            let lam = s.solve(&rhs, T::lit(1e-12)).map_err(|_| {
                BloError::DegenerateActiveSet("reduced system Ā H⁻¹ Āᵀ is singular".into())
            })?;
            // dφ/dθ_j = -H⁻¹J e_j - H⁻¹Āᵀ ∇λ̄ e_j = -H⁻¹J e_j + U S⁻¹ Ā H⁻¹ J e_j
            for (k, &lk) in lam.iter().enumerate() {
                for (ci, &ui) in col.iter_mut().zip(&hinv_at[k]) {
                    *ci = *ci + lk * ui;
                }
            }
        }
        for i in 0..n {
            out.set(i, j, col[i]);
        }
    }
    Ok(out)
}

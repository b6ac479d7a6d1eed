//! Feasible sets for the upper and lower variables, with Euclidean projections.

use crate::error::{BloError, Result};
use crate::linalg::{dot, norm_sq, DenseMatrix};
use crate::scalar::Scalar;

/// Absolute feasibility tolerance used by membership checks.
pub const FEASIBILITY_TOL: f64 = 1e-12;

const HILDRETH_MAX_SWEEPS: usize = 200_000;
const BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet<T> {
    Unconstrained,
    Box { lo: Vec<T>, hi: Vec<T> },
    /// `{x | A x <= b}`
    LinearInequality { a: DenseMatrix<T>, b: Vec<T> },
    /// `{x | x >= 0, sum(x) = radius}`
    Simplex { radius: T },
    /// `{x | lo <= x <= hi, sum(x) <= budget}`
    BoxBudget { lo: Vec<T>, hi: Vec<T>, budget: T },
}

impl<T: Scalar> ConstraintSet<T> {
    pub fn boxed(lo: Vec<T>, hi: Vec<T>) -> Result<Self> {
        let set = Self::Box { lo, hi };
        set.validate()?;
        Ok(set)
    }

    pub fn uniform_box(dim: usize, lo: T, hi: T) -> Result<Self> {
        Self::boxed(vec![lo; dim], vec![hi; dim])
    }

    pub fn linear(a: DenseMatrix<T>, b: Vec<T>) -> Result<Self> {
        let set = Self::LinearInequality { a, b };
        set.validate()?;
        Ok(set)
    }

    pub fn simplex(radius: T) -> Result<Self> {
        let set = Self::Simplex { radius };
        set.validate()?;
        Ok(set)
    }

    pub fn box_budget(lo: Vec<T>, hi: Vec<T>, budget: T) -> Result<Self> {
        let set = Self::BoxBudget { lo, hi, budget };
        set.validate()?;
        Ok(set)
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self, Self::Unconstrained)
    }

    /// Fixed dimension of the set, if it has one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::Unconstrained | Self::Simplex { .. } => None,
            Self::Box { lo, .. } | Self::BoxBudget { lo, .. } => Some(lo.len()),
            Self::LinearInequality { a, .. } => Some(a.cols),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Unconstrained => Ok(()),
            Self::Box { lo, hi } => check_bounds(lo, hi),
            Self::BoxBudget { lo, hi, budget } => {
                check_bounds(lo, hi)?;
                let floor: T = lo.iter().copied().sum();
                if floor > *budget {
                    return Err(BloError::InvalidSet(format!(
                        "budget {budget} is below the sum of lower bounds {floor}"
                    )));
                }
                Ok(())
            }
            Self::LinearInequality { a, b } => {
                if a.rows != b.len() {
                    return Err(BloError::InvalidSet(format!(
                        "A has {} rows but b has length {}",
                        a.rows,
                        b.len()
                    )));
                }
                Ok(())
            }
            Self::Simplex { radius } => {
                if !(*radius > T::zero()) || !radius.is_finite() {
                    return Err(BloError::InvalidSet(format!("simplex radius must be positive, got {radius}")));
                }
                Ok(())
            }
        }
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        match self.dim() {
            Some(d) if d != x.len() => Err(BloError::Argument(format!(
                "point has dimension {} but the set has dimension {d}",
                x.len()
            ))),
            _ if x.is_empty() && matches!(self, Self::Simplex { .. }) => {
                Err(BloError::Argument("cannot project an empty vector onto a simplex".into()))
            }
            _ => Ok(()),
        }
    }

    /// Euclidean projection of `x` onto the set.
    pub fn project(&self, x: &[T]) -> Result<Vec<T>> {
        self.validate()?;
        self.check_dim(x)?;
        match self {
            Self::Unconstrained => Ok(x.to_vec()),
            Self::Box { lo, hi } => Ok(clamp(x, lo, hi)),
            Self::Simplex { radius } => Ok(project_simplex(x, *radius)),
            Self::BoxBudget { lo, hi, budget } => Ok(project_box_budget(x, lo, hi, *budget)),
            Self::LinearInequality { a, b } => project_polyhedron(a, b, x),
        }
    }

    /// Membership to absolute tolerance `tol`.
    pub fn contains(&self, x: &[T], tol: T) -> bool {
        if self.check_dim(x).is_err() {
            return false;
        }
        match self {
            Self::Unconstrained => true,
            Self::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&v, (&l, &h))| v >= l - tol && v <= h + tol),
            Self::Simplex { radius } => {
                let s: T = x.iter().copied().sum();
                x.iter().all(|&v| v >= -tol) && (s - *radius).abs() <= tol
            }
            Self::BoxBudget { lo, hi, budget } => {
                let s: T = x.iter().copied().sum();
                x.iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(&v, (&l, &h))| v >= l - tol && v <= h + tol)
                    && s <= *budget + tol
            }
            Self::LinearInequality { a, b } => {
                (0..a.rows).all(|i| dot(a.row(i), x) - b[i] <= tol)
            }
        }
    }

    /// Rewrites the set as `A x <= b` for a point of dimension `dim`.
    ///
    /// Box rows come in (lower, upper) pairs per coordinate, lower first;
    /// infinite bounds produce no row. Equalities become two opposite rows.
    pub fn as_linear_inequality(&self, dim: usize) -> Result<(DenseMatrix<T>, Vec<T>)> {
        self.validate()?;
        if let Some(d) = self.dim() {
            if d != dim {
                return Err(BloError::Argument(format!("set dimension {d} does not match {dim}")));
            }
        }
        let mut rows: Vec<Vec<T>> = Vec::new();
        let mut rhs = Vec::new();
        let push_bounds = |lo: &[T], hi: &[T], rows: &mut Vec<Vec<T>>, rhs: &mut Vec<T>| {
            for i in 0..dim {
                if lo[i].is_finite() {
                    let mut r = vec![T::zero(); dim];
                    r[i] = -T::one();
                    rows.push(r);
                    rhs.push(-lo[i]);
                }
                if hi[i].is_finite() {
                    let mut r = vec![T::zero(); dim];
                    r[i] = T::one();
                    rows.push(r);
                    rhs.push(hi[i]);
                }
            }
        };
        match self {
            Self::Unconstrained => {}
            Self::Box { lo, hi } => push_bounds(lo, hi, &mut rows, &mut rhs),
            Self::BoxBudget { lo, hi, budget } => {
                push_bounds(lo, hi, &mut rows, &mut rhs);
                rows.push(vec![T::one(); dim]);
                rhs.push(*budget);
            }
            Self::Simplex { radius } => {
                let zeros = vec![T::zero(); dim];
                let inf = vec![T::infinity(); dim];
                push_bounds(&zeros, &inf, &mut rows, &mut rhs);
                rows.push(vec![T::one(); dim]);
                rhs.push(*radius);
                rows.push(vec![-T::one(); dim]);
                rhs.push(-*radius);
            }
            Self::LinearInequality { a, b } => return Ok((a.clone(), b.clone())),
        }
        let a = if rows.is_empty() { DenseMatrix::zeros(0, dim) } else { DenseMatrix::from_rows(&rows) };
        Ok((a, rhs))
    }
}

fn check_bounds<T: Scalar>(lo: &[T], hi: &[T]) -> Result<()> {
    if lo.len() != hi.len() {
        return Err(BloError::InvalidSet(format!(
            "box bounds have lengths {} and {}",
            lo.len(),
            hi.len()
        )));
    }
    if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i])) {
        return Err(BloError::InvalidSet(format!(
            "box has lo[{i}] = {} > hi[{i}] = {}",
            lo[i], hi[i]
        )));
    }
    Ok(())
}

fn clamp<T: Scalar>(x: &[T], lo: &[T], hi: &[T]) -> Vec<T> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| v.max(l).min(h))
        .collect()
}

/// Sorting-based projection onto `{y >= 0, sum(y) = radius}`.
pub fn project_simplex<T: Scalar>(x: &[T], radius: T) -> Vec<T> {
    let mut u = x.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = T::zero();
    let mut tau = T::zero();
    for (j, &uj) in u.iter().enumerate() {
        cumsum = cumsum + uj;
        let t = (cumsum - radius) / T::from_usize_lossy(j + 1);
        if uj - t > T::zero() {
            tau = t;
        }
    }
    x.iter().map(|&v| (v - tau).max(T::zero())).collect()
}

fn project_box_budget<T: Scalar>(x: &[T], lo: &[T], hi: &[T], budget: T) -> Vec<T> {
    let clamped = clamp(x, lo, hi);
    let total: T = clamped.iter().copied().sum();
    if total <= budget {
        return clamped;
    }
    // sum(clamp(x - tau)) is nonincreasing in tau; find the root by bisection.
    let shifted_sum = |tau: T| -> T {
        x.iter()
            .zip(lo.iter().zip(hi))
            .map(|(&v, (&l, &h))| (v - tau).max(l).min(h))
            .sum()
    };
    let mut lo_tau = T::zero();
    let mut hi_tau = x
        .iter()
        .zip(lo)
        .fold(T::zero(), |m, (&v, &l)| m.max(v - l));
    for _ in 0..BISECTION_STEPS {
        let mid = (lo_tau + hi_tau) / T::lit(2.0);
        if mid <= lo_tau || mid >= hi_tau {
            break;
        }
        if shifted_sum(mid) > budget {
            lo_tau = mid;
        } else {
            hi_tau = mid;
        }
    }
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| (v - hi_tau).max(l).min(h))
        .collect()
}

/// Hildreth's dual coordinate ascent for the projection onto `{A y <= b}`.
fn project_polyhedron<T: Scalar>(a: &DenseMatrix<T>, b: &[T], x: &[T]) -> Result<Vec<T>> {
    let mut y = x.to_vec();
    let mut mu = vec![T::zero(); a.rows];
    let row_norms: Vec<T> = (0..a.rows).map(|i| norm_sq(a.row(i))).collect();
    let tol = T::lit(FEASIBILITY_TOL) * T::lit(0.1);
    for _ in 0..HILDRETH_MAX_SWEEPS {
        let mut max_change = T::zero();
        for i in 0..a.rows {
            if row_norms[i] == T::zero() {
                continue;
            }
            let ai = a.row(i);
            let resid = dot(ai, &y) - b[i];
            let new_mu = (mu[i] + resid / row_norms[i]).max(T::zero());
            let delta = new_mu - mu[i];
            if delta != T::zero() {
                for (yj, &aij) in y.iter_mut().zip(ai) {
                    *yj = *yj - delta * aij;
                }
                mu[i] = new_mu;
                max_change = max_change.max((delta * row_norms[i].sqrt()).abs());
            }
        }
        let max_viol = (0..a.rows).fold(T::zero(), |m, i| m.max(dot(a.row(i), &y) - b[i]));
        if max_viol <= tol && max_change <= tol {
            return Ok(y);
        }
    }
    Err(BloError::InvalidSet(
        "projection onto the polyhedron did not converge (set may be empty)".into(),
    ))
}

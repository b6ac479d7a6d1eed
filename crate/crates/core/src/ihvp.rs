//! Inverse-Hessian-vector products `H⁻¹ v` from Hessian-vector products only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, BloError, Result};
use crate::linalg::{axpy, dot, norm, scale, zeros};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WoodFisherMode {
    OneShot,
    /// Rank-one Sherman–Morrison recurrence over `rank` curvature vectors.
    Iterative { rank: usize },
}

/// How the IF engine approximates `H⁻¹ v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IhvpBackend<T> {
    Cg { max_iter: usize, residual_tol: T },
    /// `(1/L) Σ_{i=0}^{K} (I - H/L)^i v`
    NeumannSum { terms: usize, smoothness: T },
    /// `(K/L) Π_{i=1}^{k} (I - H_i/L) v` with `k ~ U{0..K-1}`.
    NeumannProduct { terms: usize, smoothness: T, seed: u64 },
    /// `H ≈ F + γI` with `F` built from curvature vectors.
    WoodFisher { damping: T, mode: WoodFisherMode },
    /// `H ≈ λI`
    HessianFree { lambda: T },
}

impl<T: Scalar> IhvpBackend<T> {
    pub fn cg(max_iter: usize, residual_tol: T) -> Self {
        Self::Cg { max_iter, residual_tol }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Cg { .. } => "cg",
            Self::NeumannSum { .. } => "neumann-sum",
            Self::NeumannProduct { .. } => "neumann-product",
            Self::WoodFisher { .. } => "woodfisher",
            Self::HessianFree { .. } => "hessian-free",
        }
    }

    /// Same backend with a different seed (only NeumannProduct is seeded).
    pub fn reseeded(&self, seed: u64) -> Self {
        match *self {
            Self::NeumannProduct { terms, smoothness, .. } => Self::NeumannProduct { terms, smoothness, seed },
            other => other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: T, name: &str| -> Result<()> {
            if x > T::zero() && x.is_finite() {
                Ok(())
            } else {
                arg(format!("{name} must be positive, got {x}"))
            }
        };
        match *self {
            Self::Cg { residual_tol, .. } => pos(residual_tol, "CG residual tolerance"),
            Self::NeumannSum { smoothness, .. } => pos(smoothness, "smoothness bound L"),
            Self::NeumannProduct { terms, smoothness, .. } => {
                pos(smoothness, "smoothness bound L")?;
                if terms == 0 {
                    return arg("Neumann product estimator needs K >= 1");
                }
                Ok(())
            }
            Self::WoodFisher { damping, mode } => {
                pos(damping, "damping γ")?;
                if let WoodFisherMode::Iterative { rank: 0 } = mode {
                    return arg("iterative WoodFisher needs rank >= 1");
                }
                Ok(())
            }
            Self::HessianFree { lambda } => pos(lambda, "regularization λ"),
        }
    }
}

/// Symmetric linear operator `v ↦ H v`.
pub trait HessianOperator<T: Scalar> {
    fn apply(&self, v: &[T]) -> Vec<T>;

    /// Number of samples available to [`HessianOperator::apply_sample`]; 0 if deterministic.
    fn num_samples(&self) -> usize {
        0
    }

    /// Single-sample product `H_i v`.
    fn apply_sample(&self, _i: usize, v: &[T]) -> Vec<T> {
        self.apply(v)
    }

    /// Gradient vectors for the Fisher surrogate.
    fn curvature_vectors(&self, _rank: usize) -> Vec<Vec<T>> {
        Vec::new()
    }
}

/// Closure-backed operator, mostly for tests and small experiments.
pub struct FnHessian<F, T> {
    f: F,
    curvature: Vec<Vec<T>>,
}

impl<F, T> FnHessian<F, T> {
    pub fn new(f: F) -> Self {
        Self { f, curvature: Vec::new() }
    }

    pub fn with_curvature(f: F, curvature: Vec<Vec<T>>) -> Self {
        Self { f, curvature }
    }
}

impl<T: Scalar, F: Fn(&[T]) -> Vec<T>> HessianOperator<T> for FnHessian<F, T> {
    fn apply(&self, v: &[T]) -> Vec<T> {
        (self.f)(v)
    }

    fn curvature_vectors(&self, rank: usize) -> Vec<Vec<T>> {
        self.curvature.iter().take(rank).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IhvpDiagnostics<T> {
    /// Hessian-vector products consumed.
    pub iterations: usize,
    /// `‖H x - v‖` (CG only).
    pub residual: Option<T>,
    pub warning: Option<String>,
}

pub fn ihvp<T: Scalar, H: HessianOperator<T> + ?Sized>(
    backend: &IhvpBackend<T>,
    op: &H,
    rhs: &[T],
) -> Result<(Vec<T>, IhvpDiagnostics<T>)> {
    backend.validate()?;
    match *backend {
        IhvpBackend::Cg { max_iter, residual_tol } => cg(op, rhs, max_iter, residual_tol),
        IhvpBackend::NeumannSum { terms, smoothness } => Ok(neumann_sum(op, rhs, terms, smoothness)),
        IhvpBackend::NeumannProduct { terms, smoothness, seed } => {
            Ok(neumann_product(op, rhs, terms, smoothness, seed))
        }
        IhvpBackend::WoodFisher { damping, mode } => {
            let rank = match mode {
                WoodFisherMode::OneShot => 1,
                WoodFisherMode::Iterative { rank } => rank,
            };
            let vecs = op.curvature_vectors(rank);
            if vecs.is_empty() {
                return arg("WoodFisher needs at least one curvature vector");
            }
            if vecs.iter().any(|v| v.len() != rhs.len()) {
                return arg("curvature vector dimension mismatch");
            }
            let x = match mode {
                WoodFisherMode::OneShot => woodbury_rank_one(&vecs[0], damping, rhs),
                WoodFisherMode::Iterative { .. } => woodfisher_iterative(&vecs, damping, rhs),
            };
            Ok((x, IhvpDiagnostics::default()))
        }
        IhvpBackend::HessianFree { lambda } => {
            Ok((scale(T::one() / lambda, rhs), IhvpDiagnostics::default()))
        }
    }
}

fn cg<T: Scalar, H: HessianOperator<T> + ?Sized>(
    op: &H,
    rhs: &[T],
    max_iter: usize,
    tol: T,
) -> Result<(Vec<T>, IhvpDiagnostics<T>)> {
    let mut x = zeros(rhs.len());
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while iterations < max_iter && rr.sqrt() > tol {
        let hp = op.apply(&p);
        iterations += 1;
        let curvature = dot(&p, &hp);
        if !(curvature > T::zero()) {
            return Err(BloError::IndefiniteHessian { iteration: iterations, curvature: curvature.as_f64() });
        }
        let alpha = rr / curvature;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &hp, &mut r);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    let residual = rr.sqrt();
    let warning = (residual > tol).then(|| format!("CG stopped at max_iter with residual {residual:e}"));
    Ok((x, IhvpDiagnostics { iterations, residual: Some(residual), warning }))
}

fn neumann_sum<T: Scalar, H: HessianOperator<T> + ?Sized>(
    op: &H,
    rhs: &[T],
    terms: usize,
    smoothness: T,
) -> (Vec<T>, IhvpDiagnostics<T>) {
    let inv_l = T::one() / smoothness;
    let mut term = rhs.to_vec();
    let mut sum = term.clone();
    let mut warning = None;
    let mut prev_norm = norm(&term);
    for _ in 0..terms {
        let ht = op.apply(&term);
        axpy(-inv_l, &ht, &mut term);
        let tn = norm(&term);
        if warning.is_none() && tn > prev_norm * (T::one() + T::lit(1e-12)) {
            warning = Some(format!(
                "Neumann series term grew ({prev_norm:e} -> {tn:e}); ‖I - H/L‖ > 1, series may diverge"
            ));
        }
        prev_norm = tn;
        axpy(T::one(), &term, &mut sum);
    }
    (scale(inv_l, &sum), IhvpDiagnostics { iterations: terms, residual: None, warning })
}

fn neumann_product<T: Scalar, H: HessianOperator<T> + ?Sized>(
    op: &H,
    rhs: &[T],
    terms: usize,
    smoothness: T,
    seed: u64,
) -> (Vec<T>, IhvpDiagnostics<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(0..terms);
    let inv_l = T::one() / smoothness;
    let samples = op.num_samples();
    let mut t = rhs.to_vec();
    for _ in 0..k {
        let ht = if samples > 0 { op.apply_sample(rng.gen_range(0..samples), &t) } else { op.apply(&t) };
        axpy(-inv_l, &ht, &mut t);
    }
    let factor = T::from_usize_lossy(terms) * inv_l;
    (scale(factor, &t), IhvpDiagnostics { iterations: k, residual: None, warning: None })
}

/// `(vvᵀ + γI)⁻¹ x = x/γ - v (vᵀx) / (γ (γ + vᵀv))`
pub fn woodbury_rank_one<T: Scalar>(v: &[T], damping: T, x: &[T]) -> Vec<T> {
    let vx = dot(v, x);
    let vv = dot(v, v);
    let coef = vx / (damping * (damping + vv));
    x.iter().zip(v).map(|(&xi, &vi)| xi / damping - coef * vi).collect()
}

/// Inverse of `γI + (1/r) Σ g_k g_kᵀ` applied to `x`, built by rank-one updates.
fn woodfisher_iterative<T: Scalar>(grads: &[Vec<T>], damping: T, x: &[T]) -> Vec<T> {
    let r = T::from_usize_lossy(grads.len());
    // u_k = F_{k-1}⁻¹ g_k and den_k = r + g_kᵀ u_k define
    // F_k⁻¹ y = F_{k-1}⁻¹ y - u_k (u_kᵀ y) / den_k.
    let mut us: Vec<Vec<T>> = Vec::with_capacity(grads.len());
    let mut dens: Vec<T> = Vec::with_capacity(grads.len());
    let apply = |us: &[Vec<T>], dens: &[T], y: &[T]| -> Vec<T> {
        let mut out = scale(T::one() / damping, y);
        for (u, &d) in us.iter().zip(dens) {
            let c = dot(u, y) / d;
            axpy(-c, u, &mut out);
        }
        out
    };
    for g in grads {
        let u = apply(&us, &dens, g);
        let den = r + dot(g, &u);
        us.push(u);
        dens.push(den);
    }
    apply(&us, &dens, x)
}

//! Small hand-written problems for unit tests.

use crate::constraint::ConstraintSet;
use crate::linalg::{dot, DenseMatrix};
use crate::problem::BilevelProblem;

/// `g = ½‖φ - Wθ - c‖² + (λ/2)‖φ‖²`, `f = ½‖φ - φ★‖² + ½‖θ‖²`.
pub struct Quad {
    pub w: DenseMatrix<f64>,
    pub c: Vec<f64>,
    pub target: Vec<f64>,
    pub lambda: f64,
    pub upper: ConstraintSet<f64>,
    pub lower: ConstraintSet<f64>,
}

impl Quad {
    pub fn new(w: DenseMatrix<f64>, c: Vec<f64>, target: Vec<f64>, lambda: f64) -> Self {
        Self { w, c, target, lambda, upper: ConstraintSet::Unconstrained, lower: ConstraintSet::Unconstrained }
    }

    /// 3×2 example with a non-trivial coupling.
    pub fn small() -> Self {
        let w = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.7, -1.2]]);
        Self::new(w, vec![0.2, -0.1, 0.4], vec![1.0, -0.5, 0.25], 0.5)
    }

    pub fn phi_star(&self, theta: &[f64]) -> Vec<f64> {
        let wt = self.w.matvec(theta);
        wt.iter().zip(&self.c).map(|(a, b)| (a + b) / (1.0 + self.lambda)).collect()
    }

    pub fn hypergrad(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.phi_star(theta);
        let r: Vec<f64> = p.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        let wr = self.w.tmatvec(&r);
        theta.iter().zip(&wr).map(|(t, x)| t + x / (1.0 + self.lambda)).collect()
    }

    fn residual(&self, theta: &[f64], phi: &[f64]) -> Vec<f64> {
        let wt = self.w.matvec(theta);
        phi.iter().zip(&wt).zip(&self.c).map(|((p, a), c)| p - a - c).collect()
    }
}

impl BilevelProblem<f64> for Quad {
    fn dim_theta(&self) -> usize {
        self.w.cols
    }
    fn dim_phi(&self) -> usize {
        self.w.rows
    }
    fn upper_value(&self, theta: &[f64], phi: &[f64]) -> f64 {
        let d: Vec<f64> = phi.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        0.5 * dot(&d, &d) + 0.5 * dot(theta, theta)
    }
    fn upper_grad_theta(&self, theta: &[f64], _phi: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }
    fn upper_grad_phi(&self, _theta: &[f64], phi: &[f64]) -> Vec<f64> {
        phi.iter().zip(&self.target).map(|(a, b)| a - b).collect()
    }
    fn lower_value(&self, theta: &[f64], phi: &[f64]) -> f64 {
        let r = self.residual(theta, phi);
        0.5 * dot(&r, &r) + 0.5 * self.lambda * dot(phi, phi)
    }
    fn lower_grad_phi(&self, theta: &[f64], phi: &[f64]) -> Vec<f64> {
        let r = self.residual(theta, phi);
        r.iter().zip(phi).map(|(a, p)| a + self.lambda * p).collect()
    }
    fn lower_grad_theta(&self, theta: &[f64], phi: &[f64]) -> Vec<f64> {
        let r = self.residual(theta, phi);
        self.w.tmatvec(&r).into_iter().map(|x| -x).collect()
    }
    fn lower_hvp(&self, _theta: &[f64], _phi: &[f64], v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| (1.0 + self.lambda) * x).collect()
    }
    fn lower_cross_jvp(&self, _theta: &[f64], _phi: &[f64], v: &[f64]) -> Vec<f64> {
        self.w.tmatvec(v).into_iter().map(|x| -x).collect()
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.upper
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.lower
    }
}

/// `f = θ + φ`, `g = (θ - φ)²` with `φ ∈ [lo, hi]`.
pub struct Kink {
    pub upper: ConstraintSet<f64>,
    pub lower: ConstraintSet<f64>,
}

impl Kink {
    pub fn new() -> Self {
        Self {
            upper: ConstraintSet::Box { lo: vec![0.0], hi: vec![1.0] },
            lower: ConstraintSet::Box { lo: vec![0.5], hi: vec![1.0] },
        }
    }

    pub fn unconstrained() -> Self {
        Self { upper: ConstraintSet::Unconstrained, lower: ConstraintSet::Unconstrained }
    }
}

impl BilevelProblem<f64> for Kink {
    fn dim_theta(&self) -> usize {
        1
    }
    fn dim_phi(&self) -> usize {
        1
    }
    fn upper_value(&self, t: &[f64], p: &[f64]) -> f64 {
        t[0] + p[0]
    }
    fn upper_grad_theta(&self, _t: &[f64], _p: &[f64]) -> Vec<f64> {
        vec![1.0]
    }
    fn upper_grad_phi(&self, _t: &[f64], _p: &[f64]) -> Vec<f64> {
        vec![1.0]
    }
    fn lower_value(&self, t: &[f64], p: &[f64]) -> f64 {
        (t[0] - p[0]).powi(2)
    }
    fn lower_grad_phi(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![2.0 * (p[0] - t[0])]
    }
    fn lower_grad_theta(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![2.0 * (t[0] - p[0])]
    }
    fn lower_hvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        vec![2.0 * v[0]]
    }
    fn lower_cross_jvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        vec![-2.0 * v[0]]
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.upper
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.lower
    }
}

/// `g = θφ` (scalar), `f = θ² + φ²`; unbounded below, used only for Jacobians.
pub struct Bilinear;

static FREE: ConstraintSet<f64> = ConstraintSet::Unconstrained;

impl BilevelProblem<f64> for Bilinear {
    fn dim_theta(&self) -> usize {
        1
    }
    fn dim_phi(&self) -> usize {
        1
    }
    fn upper_value(&self, t: &[f64], p: &[f64]) -> f64 {
        t[0] * t[0] + p[0] * p[0]
    }
    fn upper_grad_theta(&self, t: &[f64], _p: &[f64]) -> Vec<f64> {
        vec![2.0 * t[0]]
    }
    fn upper_grad_phi(&self, _t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![2.0 * p[0]]
    }
    fn lower_value(&self, t: &[f64], p: &[f64]) -> f64 {
        t[0] * p[0]
    }
    fn lower_grad_phi(&self, t: &[f64], _p: &[f64]) -> Vec<f64> {
        vec![t[0]]
    }
    fn lower_grad_theta(&self, _t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![p[0]]
    }
    fn lower_hvp(&self, _t: &[f64], _p: &[f64], _v: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
    fn lower_cross_jvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        vec![v[0]]
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &FREE
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &FREE
    }
}

/// `g = ½‖φ‖²`, `f = θᵀθ + φᵀφ`, independent of θ at the lower level.
pub struct HalfNorm {
    pub m: usize,
    pub n: usize,
}

impl BilevelProblem<f64> for HalfNorm {
    fn dim_theta(&self) -> usize {
        self.m
    }
    fn dim_phi(&self) -> usize {
        self.n
    }
    fn upper_value(&self, t: &[f64], p: &[f64]) -> f64 {
        dot(t, t) + dot(p, p)
    }
    fn upper_grad_theta(&self, t: &[f64], _p: &[f64]) -> Vec<f64> {
        t.iter().map(|x| 2.0 * x).collect()
    }
    fn upper_grad_phi(&self, _t: &[f64], p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| 2.0 * x).collect()
    }
    fn lower_value(&self, _t: &[f64], p: &[f64]) -> f64 {
        0.5 * dot(p, p)
    }
    fn lower_grad_phi(&self, _t: &[f64], p: &[f64]) -> Vec<f64> {
        p.to_vec()
    }
    fn lower_grad_theta(&self, t: &[f64], _p: &[f64]) -> Vec<f64> {
        vec![0.0; t.len()]
    }
    fn lower_hvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
    fn lower_cross_jvp(&self, t: &[f64], _p: &[f64], _v: &[f64]) -> Vec<f64> {
        vec![0.0; t.len()]
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &FREE
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &FREE
    }
}

/// `g = (φ₁ - θ)²` (φ₂ free), `f = (φ₂ - 1)² + θ²`.
pub struct NonSingleton;

impl BilevelProblem<f64> for NonSingleton {
    fn dim_theta(&self) -> usize {
        1
    }
    fn dim_phi(&self) -> usize {
        2
    }
    fn upper_value(&self, t: &[f64], p: &[f64]) -> f64 {
        (p[1] - 1.0).powi(2) + t[0] * t[0]
    }
    fn upper_grad_theta(&self, t: &[f64], _p: &[f64]) -> Vec<f64> {
        vec![2.0 * t[0]]
    }
    fn upper_grad_phi(&self, _t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![0.0, 2.0 * (p[1] - 1.0)]
    }
    fn lower_value(&self, t: &[f64], p: &[f64]) -> f64 {
        (p[0] - t[0]).powi(2)
    }
    fn lower_grad_phi(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![2.0 * (p[0] - t[0]), 0.0]
    }
    fn lower_grad_theta(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![2.0 * (t[0] - p[0])]
    }
    fn lower_hvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        vec![2.0 * v[0], 0.0]
    }
    fn lower_cross_jvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        vec![-2.0 * v[0]]
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &FREE
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &FREE
    }
}

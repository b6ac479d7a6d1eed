//! Small problems with hand-checkable structure: the coupled and kinked scalar
//! examples, a non-singleton lower problem and a min-max instance.

use blo_core::linalg::{dot, DenseMatrix};
use blo_core::{BilevelProblem, ConstraintSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::util::normal_vec;
use crate::TestProblem;

/// `f = θ² - θφ - φ²`, `g = -f`, with the coupling constraint `θ - φ = 0`
/// folded into the supplied solution map `φ*(θ) = θ`. Both variables live in `[-1, 1]`.
pub struct Example1 {
    set: ConstraintSet<f64>,
}

impl Example1 {
    pub fn new() -> Self {
        Self { set: ConstraintSet::uniform_box(1, -1.0, 1.0).expect("valid box") }
    }

    /// Outer function after substituting the solution map.
    pub fn reduced(theta: f64) -> f64 {
        -theta * theta
    }
}

impl Default for Example1 {
    fn default() -> Self {
        Self::new()
    }
}

impl BilevelProblem<f64> for Example1 {
    fn dim_theta(&self) -> usize {
        1
    }
    fn dim_phi(&self) -> usize {
        1
    }
    fn upper_value(&self, t: &[f64], p: &[f64]) -> f64 {
        t[0] * t[0] - t[0] * p[0] - p[0] * p[0]
    }
    fn upper_grad_theta(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![2.0 * t[0] - p[0]]
    }
    fn upper_grad_phi(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![-t[0] - 2.0 * p[0]]
    }
    fn lower_value(&self, t: &[f64], p: &[f64]) -> f64 {
        -self.upper_value(t, p)
    }
    fn lower_grad_phi(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![t[0] + 2.0 * p[0]]
    }
    fn lower_grad_theta(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        vec![-2.0 * t[0] + p[0]]
    }
    fn lower_hvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        vec![2.0 * v[0]]
    }
    fn lower_cross_jvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        vec![v[0]]
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.set
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.set
    }
    fn analytic_solution(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(theta.to_vec())
    }
    fn analytic_solution_vjp(&self, _theta: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        Some(v.to_vec())
    }
    fn coupled_lower(&self) -> bool {
        true
    }
}

impl TestProblem for Example1 {
    fn name(&self) -> &'static str {
        "example1"
    }
    fn exact_hypergrad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(vec![-2.0 * theta[0]])
    }
    fn lower_smoothness(&self, _theta: &[f64]) -> f64 {
        2.0
    }
    fn theta0(&self) -> Vec<f64> {
        vec![0.1]
    }
}

/// `f = θ + φ`, `g = (θ - φ)²`, `θ ∈ [0, 1]`, `φ ∈ [1/2, 1]`.
/// The solution map `max(θ, 1/2)` has a kink at `θ = 1/2`.
pub struct Example2 {
    upper: ConstraintSet<f64>,
    lower: ConstraintSet<f64>,
}

impl Example2 {
    pub fn new() -> Self {
        Self {
            upper: ConstraintSet::uniform_box(1, 0.0, 1.0).expect("valid box"),
            lower: ConstraintSet::uniform_box(1, 0.5, 1.0).expect("valid box"),
        }
    }

    pub fn phi_star(theta: f64) -> f64 {
        theta.clamp(0.5, 1.0)
    }

    pub fn outer(theta: f64) -> f64 {
        theta + Self::phi_star(theta)
    }
}

impl Default for Example2 {
    fn default() -> Self {
        Self::new()
    }
}

impl BilevelProblem<f64> for Example2 {
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
    fn initial_phi(&self) -> Vec<f64> {
        vec![0.75]
    }
    fn analytic_solution(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(vec![Self::phi_star(theta[0])])
    }
    fn analytic_solution_vjp(&self, theta: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        let inside = theta[0] > 0.5 && theta[0] < 1.0;
        Some(vec![if inside { v[0] } else { 0.0 }])
    }
}

impl TestProblem for Example2 {
    fn name(&self) -> &'static str {
        "example2"
    }
    fn exact_hypergrad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let t = theta[0];
        if t == 0.5 || t == 1.0 {
            None
        } else if t < 0.5 || t > 1.0 {
            Some(vec![1.0])
        } else {
            Some(vec![2.0])
        }
    }
    fn lower_smoothness(&self, _theta: &[f64]) -> f64 {
        2.0
    }
    fn theta0(&self) -> Vec<f64> {
        vec![0.75]
    }
    fn smooth(&self) -> bool {
        false
    }
}

/// `g = (φ₁ - θ)²`, `f = (φ₂ - 1)² + θ²`: every `φ₂` is lower-optimal, and the
/// optimistic solution is `θ = 0, φ = (0, 1)`.
pub struct NsToy {
    free: ConstraintSet<f64>,
}

impl NsToy {
    pub fn new() -> Self {
        Self { free: ConstraintSet::Unconstrained }
    }
}

impl Default for NsToy {
    fn default() -> Self {
        Self::new()
    }
}

impl BilevelProblem<f64> for NsToy {
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
        &self.free
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
}

impl TestProblem for NsToy {
    fn name(&self) -> &'static str {
        "ns_toy"
    }
    fn lower_smoothness(&self, _theta: &[f64]) -> f64 {
        2.0
    }
    fn theta0(&self) -> Vec<f64> {
        vec![1.0]
    }
}

/// Min-max instance `f = ½‖θ‖² + θᵀBφ - (μ/2)‖φ‖²` with `g = -f`.
pub struct MmoToy {
    pub b: DenseMatrix<f64>,
    pub mu: f64,
    free: ConstraintSet<f64>,
}

impl MmoToy {
    pub fn new(b: DenseMatrix<f64>, mu: f64) -> Self {
        Self { b, mu, free: ConstraintSet::Unconstrained }
    }

    /// `B` is `m × n` with N(0, 1/m) entries.
    pub fn random(m: usize, n: usize, mu: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (m as f64).sqrt();
        let rows: Vec<Vec<f64>> = (0..m).map(|_| normal_vec(&mut rng, n, scale)).collect();
        Self::new(DenseMatrix::from_rows(&rows), mu)
    }

    pub fn phi_star(&self, theta: &[f64]) -> Vec<f64> {
        self.b.tmatvec(theta).into_iter().map(|x| x / self.mu).collect()
    }
}

impl BilevelProblem<f64> for MmoToy {
    fn dim_theta(&self) -> usize {
        self.b.rows
    }
    fn dim_phi(&self) -> usize {
        self.b.cols
    }
    fn upper_value(&self, t: &[f64], p: &[f64]) -> f64 {
        0.5 * dot(t, t) + dot(t, &self.b.matvec(p)) - 0.5 * self.mu * dot(p, p)
    }
    fn upper_grad_theta(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        t.iter().zip(self.b.matvec(p)).map(|(a, b)| a + b).collect()
    }
    fn upper_grad_phi(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        self.b.tmatvec(t).into_iter().zip(p).map(|(a, q)| a - self.mu * q).collect()
    }
    fn lower_value(&self, t: &[f64], p: &[f64]) -> f64 {
        -self.upper_value(t, p)
    }
    fn lower_grad_phi(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        self.upper_grad_phi(t, p).into_iter().map(|x| -x).collect()
    }
    fn lower_grad_theta(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        self.upper_grad_theta(t, p).into_iter().map(|x| -x).collect()
    }
    fn lower_hvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| self.mu * x).collect()
    }
    fn lower_cross_jvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        self.b.matvec(v).into_iter().map(|x| -x).collect()
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn analytic_solution(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(self.phi_star(theta))
    }
    fn analytic_solution_vjp(&self, _theta: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        Some(self.b.matvec(v).into_iter().map(|x| x / self.mu).collect())
    }
}

impl TestProblem for MmoToy {
    fn name(&self) -> &'static str {
        "mmo_toy"
    }
    /// `θ + BBᵀθ/μ`.
    fn exact_hypergrad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let bbt = self.b.matvec(&self.b.tmatvec(theta));
        Some(theta.iter().zip(bbt).map(|(t, x)| t + x / self.mu).collect())
    }
    fn lower_smoothness(&self, _theta: &[f64]) -> f64 {
        self.mu
    }
}

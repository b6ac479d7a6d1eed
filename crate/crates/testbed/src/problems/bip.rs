//! Pruning with a relaxed mask at the upper level and weights at the lower level.

use blo_core::linalg::dot;
use blo_core::{BilevelProblem, ConstraintSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::util::normal_vec;
use crate::TestProblem;

/// Mask `m ∈ [0,1]ⁿ` with `1ᵀm ≤ k`, weights `φ ∈ Rⁿ`, pruned model `z = m ⊙ φ`.
///
/// `g = ½‖z - z̃‖² + (γ/2)‖φ‖²` (training batch), `f = ½‖z - z★‖²` (held-out batch).
/// With `hessian_free` the HVP and cross-JVP oracles drop the curvature of the
/// training loss, i.e. they return `γv` and `v ⊙ ∇_z ℓ̃(z)`.
pub struct Bip {
    pub z_train: Vec<f64>,
    pub z_val: Vec<f64>,
    pub gamma: f64,
    pub hessian_free: bool,
    mask_set: ConstraintSet<f64>,
    free: ConstraintSet<f64>,
}

impl Bip {
    pub fn new(z_train: Vec<f64>, z_val: Vec<f64>, gamma: f64, budget: f64, hessian_free: bool) -> Self {
        let n = z_train.len();
        Self {
            z_train,
            z_val,
            gamma,
            hessian_free,
            mask_set: ConstraintSet::box_budget(vec![0.0; n], vec![1.0; n], budget).expect("valid budget"),
            free: ConstraintSet::Unconstrained,
        }
    }

    /// Targets share a planted signal; the budget keeps half of the mask.
    pub fn random(n: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signal = normal_vec(&mut rng, n, 1.0);
        let z_train = signal.iter().zip(normal_vec(&mut rng, n, 0.3)).map(|(s, e)| s + e).collect();
        let z_val = signal.iter().zip(normal_vec(&mut rng, n, 0.3)).map(|(s, e)| s + e).collect();
        Self::new(z_train, z_val, gamma, n as f64 / 2.0, false)
    }

    pub fn with_hessian_free(mut self, on: bool) -> Self {
        self.hessian_free = on;
        self
    }

    fn z(m: &[f64], phi: &[f64]) -> Vec<f64> {
        m.iter().zip(phi).map(|(a, b)| a * b).collect()
    }

    /// `∇_z ℓ̃(z) = z - z̃`.
    fn train_grad(&self, m: &[f64], phi: &[f64]) -> Vec<f64> {
        Self::z(m, phi).iter().zip(&self.z_train).map(|(z, t)| z - t).collect()
    }

    /// `φ*_j = m_j z̃_j / (m_j² + γ)`.
    pub fn phi_star(&self, m: &[f64]) -> Vec<f64> {
        m.iter().zip(&self.z_train).map(|(m, t)| m * t / (m * m + self.gamma)).collect()
    }

    /// Diagonal of `dφ*/dm ≈ -(1/γ) diag(∇_z ℓ̃(m ⊙ φ))`.
    pub fn diagonal_ig(&self, m: &[f64], phi: &[f64]) -> Vec<f64> {
        self.train_grad(m, phi).iter().map(|g| -g / self.gamma).collect()
    }

    /// `∂f/∂m + diag(IG) ⊙ ∂f/∂φ` at `φ`.
    pub fn diagonal_ig_hypergrad(&self, m: &[f64], phi: &[f64]) -> Vec<f64> {
        let ig = self.diagonal_ig(m, phi);
        let fm = self.upper_grad_theta(m, phi);
        let fp = self.upper_grad_phi(m, phi);
        (0..m.len()).map(|j| fm[j] + ig[j] * fp[j]).collect()
    }
}

impl BilevelProblem<f64> for Bip {
    fn dim_theta(&self) -> usize {
        self.z_train.len()
    }
    fn dim_phi(&self) -> usize {
        self.z_train.len()
    }
    fn upper_value(&self, m: &[f64], p: &[f64]) -> f64 {
        let r: Vec<f64> = Self::z(m, p).iter().zip(&self.z_val).map(|(z, t)| z - t).collect();
        0.5 * dot(&r, &r)
    }
    fn upper_grad_theta(&self, m: &[f64], p: &[f64]) -> Vec<f64> {
        (0..m.len()).map(|j| (m[j] * p[j] - self.z_val[j]) * p[j]).collect()
    }
    fn upper_grad_phi(&self, m: &[f64], p: &[f64]) -> Vec<f64> {
        (0..m.len()).map(|j| (m[j] * p[j] - self.z_val[j]) * m[j]).collect()
    }
    fn lower_value(&self, m: &[f64], p: &[f64]) -> f64 {
        let r = self.train_grad(m, p);
        0.5 * dot(&r, &r) + 0.5 * self.gamma * dot(p, p)
    }
    fn lower_grad_phi(&self, m: &[f64], p: &[f64]) -> Vec<f64> {
        let r = self.train_grad(m, p);
        (0..m.len()).map(|j| m[j] * r[j] + self.gamma * p[j]).collect()
    }
    fn lower_grad_theta(&self, m: &[f64], p: &[f64]) -> Vec<f64> {
        let r = self.train_grad(m, p);
        (0..m.len()).map(|j| p[j] * r[j]).collect()
    }
    fn lower_hvp(&self, m: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        if self.hessian_free {
            return v.iter().map(|x| self.gamma * x).collect();
        }
        (0..m.len()).map(|j| (m[j] * m[j] + self.gamma) * v[j]).collect()
    }
    fn lower_cross_jvp(&self, m: &[f64], p: &[f64], v: &[f64]) -> Vec<f64> {
        let r = self.train_grad(m, p);
        if self.hessian_free {
            return (0..m.len()).map(|j| v[j] * r[j]).collect();
        }
        (0..m.len()).map(|j| v[j] * (r[j] + m[j] * p[j])).collect()
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.mask_set
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn analytic_solution(&self, m: &[f64]) -> Option<Vec<f64>> {
        Some(self.phi_star(m))
    }
    /// `dφ*_j/dm_j = z̃_j (γ - m_j²) / (m_j² + γ)²`.
    fn analytic_solution_vjp(&self, m: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        Some(
            (0..m.len())
                .map(|j| {
                    let den = m[j] * m[j] + self.gamma;
                    v[j] * self.z_train[j] * (self.gamma - m[j] * m[j]) / (den * den)
                })
                .collect(),
        )
    }
}

impl TestProblem for Bip {
    fn name(&self) -> &'static str {
        "bip_toy"
    }
    fn exact_hypergrad(&self, m: &[f64]) -> Option<Vec<f64>> {
        let p = self.phi_star(m);
        let vjp = self.analytic_solution_vjp(m, &self.upper_grad_phi(m, &p))?;
        Some(self.upper_grad_theta(m, &p).iter().zip(vjp).map(|(a, b)| a + b).collect())
    }
    fn lower_smoothness(&self, theta: &[f64]) -> f64 {
        theta.iter().map(|m| m * m).fold(0.0, f64::max) + self.gamma
    }
    fn theta0(&self) -> Vec<f64> {
        vec![0.5; self.dim_theta()]
    }
}

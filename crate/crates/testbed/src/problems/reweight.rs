//! Sample reweighting with a simplex-constrained, ridge-regularized lower level.

use blo_core::linalg::dot;
use blo_core::{project_simplex, BilevelProblem, ConstraintSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::util::{normal_vec, sigmoid, softplus};
use crate::TestProblem;

/// Power model `π_i(θ) = softplus(θᵀh_i)` with rate `R_i = log(1 + s_i π_i)`.
///
/// `g(θ, λ) = Σ λ_i R_i(θ) + (γ/2)‖λ‖²` over the unit simplex, so low-rate samples
/// receive more weight; `f(θ, λ) = Σ λ_i (p_i - π_i(θ))²`.
pub struct Reweight {
    pub h: Vec<Vec<f64>>,
    pub gains: Vec<f64>,
    pub targets: Vec<f64>,
    pub gamma: f64,
    free: ConstraintSet<f64>,
    simplex: ConstraintSet<f64>,
}

pub const REWEIGHT_FEATURES: usize = 3;

impl Reweight {
    pub fn new(h: Vec<Vec<f64>>, gains: Vec<f64>, targets: Vec<f64>, gamma: f64) -> Self {
        assert!(!h.is_empty() && h.len() == gains.len() && h.len() == targets.len());
        Self {
            h,
            gains,
            targets,
            gamma,
            free: ConstraintSet::Unconstrained,
            simplex: ConstraintSet::simplex(1.0).expect("unit simplex"),
        }
    }

    pub fn random(samples: usize, gamma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planted = normal_vec(&mut rng, REWEIGHT_FEATURES, 1.0);
        let mut h = Vec::new();
        let mut gains = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..samples {
            let hi = normal_vec(&mut rng, REWEIGHT_FEATURES, 1.0);
            gains.push(rng.gen_range(0.2..2.0));
            targets.push(softplus(dot(&planted, &hi)) + 0.1 * normal_vec(&mut rng, 1, 1.0)[0]);
            h.push(hi);
        }
        Self::new(h, gains, targets, gamma)
    }

    fn e(&self) -> usize {
        self.h.len()
    }

    pub fn power(&self, theta: &[f64], i: usize) -> f64 {
        softplus(dot(theta, &self.h[i]))
    }

    pub fn rate(&self, theta: &[f64], i: usize) -> f64 {
        (self.gains[i] * self.power(theta, i)).ln_1p()
    }

    pub fn rates(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.e()).map(|i| self.rate(theta, i)).collect()
    }

    fn rate_grad(&self, theta: &[f64], i: usize) -> Vec<f64> {
        let z = dot(theta, &self.h[i]);
        let c = self.gains[i] * sigmoid(z) / (1.0 + self.gains[i] * softplus(z));
        self.h[i].iter().map(|x| c * x).collect()
    }

    /// `λ* = P_Δ(-R/γ)`, the exact minimizer of the regularized simplex QP.
    pub fn weights(&self, theta: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = self.rates(theta).iter().map(|r| -r / self.gamma).collect();
        project_simplex(&raw, 1.0)
    }

    fn accumulate(&self, theta: &[f64], coef: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; theta.len()];
        for i in 0..self.e() {
            let c = coef(i);
            if c != 0.0 {
                for (o, g) in out.iter_mut().zip(self.rate_grad(theta, i)) {
                    *o += c * g;
                }
            }
        }
        out
    }
}

impl BilevelProblem<f64> for Reweight {
    fn dim_theta(&self) -> usize {
        REWEIGHT_FEATURES
    }
    fn dim_phi(&self) -> usize {
        self.e()
    }
    fn upper_value(&self, t: &[f64], lam: &[f64]) -> f64 {
        (0..self.e()).map(|i| lam[i] * (self.targets[i] - self.power(t, i)).powi(2)).sum()
    }
    fn upper_grad_theta(&self, t: &[f64], lam: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; t.len()];
        for i in 0..self.e() {
            let z = dot(t, &self.h[i]);
            let c = lam[i] * 2.0 * (softplus(z) - self.targets[i]) * sigmoid(z);
            for (o, x) in out.iter_mut().zip(&self.h[i]) {
                *o += c * x;
            }
        }
        out
    }
    fn upper_grad_phi(&self, t: &[f64], _lam: &[f64]) -> Vec<f64> {
        (0..self.e()).map(|i| (self.targets[i] - self.power(t, i)).powi(2)).collect()
    }
    fn lower_value(&self, t: &[f64], lam: &[f64]) -> f64 {
        dot(lam, &self.rates(t)) + 0.5 * self.gamma * dot(lam, lam)
    }
    fn lower_grad_phi(&self, t: &[f64], lam: &[f64]) -> Vec<f64> {
        self.rates(t).iter().zip(lam).map(|(r, l)| r + self.gamma * l).collect()
    }
    fn lower_grad_theta(&self, t: &[f64], lam: &[f64]) -> Vec<f64> {
        self.accumulate(t, |i| lam[i])
    }
    fn lower_hvp(&self, _t: &[f64], _lam: &[f64], v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| self.gamma * x).collect()
    }
    fn lower_cross_jvp(&self, t: &[f64], _lam: &[f64], v: &[f64]) -> Vec<f64> {
        self.accumulate(t, |i| v[i])
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.simplex
    }
    fn initial_phi(&self) -> Vec<f64> {
        vec![1.0 / self.e() as f64; self.e()]
    }
    fn analytic_solution(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(self.weights(theta))
    }
    /// On the support `S` of `λ*` the projection acts as `I - 11ᵀ/|S|`.
    fn analytic_solution_vjp(&self, theta: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        let lam = self.weights(theta);
        let support: Vec<usize> = (0..self.e()).filter(|&i| lam[i] > 0.0).collect();
        let mean = support.iter().map(|&i| v[i]).sum::<f64>() / support.len() as f64;
        let mut jv = vec![0.0; self.e()];
        for &i in &support {
            jv[i] = v[i] - mean;
        }
        Some(self.accumulate(theta, |i| -jv[i] / self.gamma))
    }
}

impl TestProblem for Reweight {
    fn name(&self) -> &'static str {
        "reweight_simplex"
    }
    fn exact_hypergrad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let lam = self.weights(theta);
        let vjp = self.analytic_solution_vjp(theta, &self.upper_grad_phi(theta, &lam))?;
        Some(self.upper_grad_theta(theta, &lam).iter().zip(vjp).map(|(a, b)| a + b).collect())
    }
    fn lower_smoothness(&self, _theta: &[f64]) -> f64 {
        self.gamma
    }
    fn smooth(&self) -> bool {
        false
    }
}

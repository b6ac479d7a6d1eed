//! Adversarial training of a logistic classifier with a linearized, regularized
//! attack as the lower level.

use blo_core::linalg::dot;
use blo_core::{BilevelProblem, ConstraintSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::util::{normal, sigmoid, softplus};
use crate::TestProblem;

/// Two-class data with one weakly separated robust feature and `d - 1` features
/// that are predictive but smaller than typical attack budgets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn sample(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Self {
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let label = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mut xi = Vec::with_capacity(d);
            xi.push(label + normal(rng));
            for _ in 1..d {
                xi.push(0.3 * label + 0.1 * normal(rng));
            }
            x.push(xi);
            y.push(label);
        }
        Self { x, y }
    }

    /// Accuracy of `θ = (w, b)` when each point is moved by `ε·sign(∇_x ℓ)`.
    pub fn attacked_accuracy(&self, theta: &[f64], eps: f64) -> f64 {
        let d = theta.len() - 1;
        let l1: f64 = theta[..d].iter().map(|w| w.abs()).sum();
        let hits = self
            .x
            .iter()
            .zip(&self.y)
            .filter(|(x, &y)| y * (dot(&theta[..d], x) + theta[d]) - eps * l1 > 0.0)
            .count();
        hits as f64 / self.x.len() as f64
    }
}

/// `θ = (w, b)`, `φ = (δ_1 … δ_N)` in the `ℓ∞` box of radius `ε`.
///
/// With `u_i = ∇_x ℓ(θ; x_i, y_i)` at the clean point, the lower objective is
/// `Σ_i -δ_iᵀu_i + (γ/2)‖δ_i‖²`, whose minimizer is `clip(u_i/γ, -ε, ε)`.
/// The upper objective is the mean logistic loss at `x_i + δ_i` plus `(r/2)‖w‖²`.
pub struct FastBat {
    pub data: Dataset,
    pub eps: f64,
    pub gamma: f64,
    pub reg: f64,
    free: ConstraintSet<f64>,
    attack: ConstraintSet<f64>,
}

impl FastBat {
    pub fn new(data: Dataset, eps: f64, gamma: f64, reg: f64) -> Self {
        let n = data.x.len() * data.x[0].len();
        Self {
            data,
            eps,
            gamma,
            reg,
            free: ConstraintSet::Unconstrained,
            attack: ConstraintSet::uniform_box(n, -eps, eps).expect("ε >= 0"),
        }
    }

    pub fn random(samples: usize, d: usize, eps: f64, gamma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(Dataset::sample(&mut rng, samples, d), eps, gamma, 1e-3)
    }

    fn d(&self) -> usize {
        self.data.x[0].len()
    }

    fn n(&self) -> usize {
        self.data.x.len()
    }

    fn margin(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        y * (dot(&theta[..self.d()], x) + theta[self.d()])
    }

    /// `(1/N) Σ ℓ(θ; x_i + δ_i)` without the regularizer.
    pub fn logistic_loss(&self, theta: &[f64], delta: &[f64]) -> f64 {
        let d = self.d();
        let total: f64 = (0..self.n())
            .map(|i| {
                let xi: Vec<f64> = self.data.x[i].iter().zip(&delta[i * d..(i + 1) * d]).map(|(a, b)| a + b).collect();
                softplus(-self.margin(theta, &xi, self.data.y[i]))
            })
            .sum();
        total / self.n() as f64
    }

    /// `u_i = -y_i σ(-m_i) w`.
    fn input_grad(&self, theta: &[f64], i: usize) -> Vec<f64> {
        let y = self.data.y[i];
        let s = sigmoid(-self.margin(theta, &self.data.x[i], y));
        theta[..self.d()].iter().map(|w| -y * s * w).collect()
    }

    pub fn attack(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n() * self.d());
        for i in 0..self.n() {
            out.extend(self.input_grad(theta, i).iter().map(|u| (u / self.gamma).clamp(-self.eps, self.eps)));
        }
        out
    }

    /// `Σ_i (∂u_i/∂θ)ᵀ v_i`.
    fn input_grad_vjp(&self, theta: &[f64], v: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut out = vec![0.0; d + 1];
        for i in 0..self.n() {
            let (x, y) = (&self.data.x[i], self.data.y[i]);
            let s = sigmoid(-self.margin(theta, x, y));
            let vi = &v[i * d..(i + 1) * d];
            let wv = dot(&theta[..d], vi);
            let curv = s * (1.0 - s) * wv;
            for j in 0..d {
                out[j] += -y * s * vi[j] + curv * x[j];
            }
            out[d] += curv;
        }
        out
    }
}

impl BilevelProblem<f64> for FastBat {
    fn dim_theta(&self) -> usize {
        self.d() + 1
    }
    fn dim_phi(&self) -> usize {
        self.n() * self.d()
    }
    fn upper_value(&self, t: &[f64], p: &[f64]) -> f64 {
        self.logistic_loss(t, p) + 0.5 * self.reg * dot(&t[..self.d()], &t[..self.d()])
    }
    fn upper_grad_theta(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut out = vec![0.0; d + 1];
        for i in 0..self.n() {
            let y = self.data.y[i];
            let xi: Vec<f64> = self.data.x[i].iter().zip(&p[i * d..(i + 1) * d]).map(|(a, b)| a + b).collect();
            let s = sigmoid(-self.margin(t, &xi, y));
            for j in 0..d {
                out[j] -= y * s * xi[j];
            }
            out[d] -= y * s;
        }
        let n = self.n() as f64;
        for j in 0..=d {
            out[j] /= n;
            if j < d {
                out[j] += self.reg * t[j];
            }
        }
        out
    }
    fn upper_grad_phi(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        let d = self.d();
        let n = self.n() as f64;
        let mut out = Vec::with_capacity(p.len());
        for i in 0..self.n() {
            let y = self.data.y[i];
            let xi: Vec<f64> = self.data.x[i].iter().zip(&p[i * d..(i + 1) * d]).map(|(a, b)| a + b).collect();
            let s = sigmoid(-self.margin(t, &xi, y));
            out.extend(t[..d].iter().map(|w| -y * s * w / n));
        }
        out
    }
    fn lower_value(&self, t: &[f64], p: &[f64]) -> f64 {
        let d = self.d();
        (0..self.n())
            .map(|i| {
                let di = &p[i * d..(i + 1) * d];
                -dot(di, &self.input_grad(t, i)) + 0.5 * self.gamma * dot(di, di)
            })
            .sum()
    }
    fn lower_grad_phi(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut out = Vec::with_capacity(p.len());
        for i in 0..self.n() {
            let u = self.input_grad(t, i);
            out.extend(u.iter().zip(&p[i * d..(i + 1) * d]).map(|(u, q)| -u + self.gamma * q));
        }
        out
    }
    fn lower_grad_theta(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        self.input_grad_vjp(t, p).into_iter().map(|x| -x).collect()
    }
    fn lower_hvp(&self, _t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| self.gamma * x).collect()
    }
    fn lower_cross_jvp(&self, t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        self.input_grad_vjp(t, v).into_iter().map(|x| -x).collect()
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.attack
    }
    fn analytic_solution(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(self.attack(theta))
    }
    /// Only unclipped coordinates move with `θ`, at rate `(1/γ) ∂u/∂θ`.
    fn analytic_solution_vjp(&self, theta: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        let d = self.d();
        let mut masked = v.to_vec();
        for i in 0..self.n() {
            for (j, u) in self.input_grad(theta, i).into_iter().enumerate() {
                if (u / self.gamma).abs() >= self.eps {
                    masked[i * d + j] = 0.0;
                }
            }
        }
        Some(self.input_grad_vjp(theta, &masked).into_iter().map(|x| x / self.gamma).collect())
    }
}

impl TestProblem for FastBat {
    fn name(&self) -> &'static str {
        "fastbat_toy"
    }
    fn exact_hypergrad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let delta = self.attack(theta);
        let vjp = self.analytic_solution_vjp(theta, &self.upper_grad_phi(theta, &delta))?;
        Some(self.upper_grad_theta(theta, &delta).iter().zip(vjp).map(|(a, b)| a + b).collect())
    }
    fn lower_smoothness(&self, _theta: &[f64]) -> f64 {
        self.gamma
    }
    fn theta0(&self) -> Vec<f64> {
        let mut t = vec![0.1; self.d()];
        t.push(0.0);
        t
    }
    fn smooth(&self) -> bool {
        false
    }
    fn permits_vf(&self) -> bool {
        false
    }
}

//! Invariant risk minimization with a consensus (shared) prediction head.

use blo_core::linalg::dot;
use blo_core::{BilevelProblem, ConstraintSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::util::normal;
use crate::TestProblem;

/// Averages per-environment heads; the consensus set is the image of this map.
pub fn consensus_project(heads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let e = heads.len();
    if e == 0 {
        return Vec::new();
    }
    let mut mean = vec![0.0; heads[0].len()];
    for h in heads {
        for (m, v) in mean.iter_mut().zip(h) {
            *m += v / e as f64;
        }
    }
    vec![mean; e]
}

#[derive(Debug, Clone)]
pub struct Environment {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

/// Feature 0 is invariant (`y = x_0 + noise` everywhere); features `1..d` are
/// `a_{e,j} y + noise` with environment-specific `a_{e,j}`.
///
/// Representation `z = θᵀx` with `θ` on the unit simplex (which fixes the scale
/// the head could otherwise absorb) and a scalar head, `ŷ = φ z`. Lower:
/// `φ* = argmin (1/E) Σ_e ℓ_e + (ρ/2)φ²`, the consensus of the per-environment
/// heads. Upper: `(1/E) Σ_e [ℓ_e + γ (∂ℓ_e/∂φ)²]`.
pub struct IrmConsensus {
    pub envs: Vec<Environment>,
    pub gamma: f64,
    pub rho: f64,
    simplex: ConstraintSet<f64>,
    free: ConstraintSet<f64>,
}

impl IrmConsensus {
    pub fn new(envs: Vec<Environment>, gamma: f64, rho: f64) -> Self {
        assert!(!envs.is_empty());
        Self { envs, gamma, rho, simplex: ConstraintSet::simplex(1.0).expect("unit simplex"), free: ConstraintSet::Unconstrained }
    }

    pub fn random(e: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_env = 200;
        let envs = (0..e)
            .map(|_| {
                let coef: Vec<f64> = (1..d).map(|_| rng.gen_range(0.0..2.0)).collect();
                let (mut x, mut y) = (Vec::new(), Vec::new());
                for _ in 0..per_env {
                    let inv = normal(&mut rng);
                    let label = inv + 0.5 * normal(&mut rng);
                    let mut xi = vec![inv];
                    xi.extend(coef.iter().map(|a| a * label + 0.5 * normal(&mut rng)));
                    x.push(xi);
                    y.push(label);
                }
                Environment { x, y }
            })
            .collect();
        Self::new(envs, 10.0, 1e-3)
    }

    fn d(&self) -> usize {
        self.envs[0].x[0].len()
    }

    fn e(&self) -> f64 {
        self.envs.len() as f64
    }

    fn loss(&self, env: &Environment, th: &[f64], phi: f64) -> f64 {
        let s: f64 = env.x.iter().zip(&env.y).map(|(x, y)| (phi * dot(th, x) - y).powi(2)).sum();
        0.5 * s / env.y.len() as f64
    }

    /// `∂ℓ_e/∂φ`.
    fn grad_phi(&self, env: &Environment, th: &[f64], phi: f64) -> f64 {
        let s: f64 = env.x.iter().zip(&env.y).map(|(x, y)| {
            let z = dot(th, x);
            (phi * z - y) * z
        }).sum();
        s / env.y.len() as f64
    }

    /// `∂²ℓ_e/∂φ²`.
    fn curvature(&self, env: &Environment, th: &[f64]) -> f64 {
        env.x.iter().map(|x| dot(th, x).powi(2)).sum::<f64>() / env.y.len() as f64
    }

    /// `∇_θ ℓ_e`.
    fn grad_theta(&self, env: &Environment, th: &[f64], phi: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.d()];
        let n = env.y.len() as f64;
        for (x, y) in env.x.iter().zip(&env.y) {
            let c = (phi * dot(th, x) - y) * phi / n;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += c * xj;
            }
        }
        g
    }

    /// `∂/∂θ (v ∂ℓ_e/∂φ)`.
    fn cross_env(&self, env: &Environment, th: &[f64], phi: f64, v: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.d()];
        let n = env.y.len() as f64;
        for (x, y) in env.x.iter().zip(&env.y) {
            let z = dot(th, x);
            let c = v * (2.0 * phi * z - y) / n;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += c * xj;
            }
        }
        g
    }

    fn mean_envs(&self, f: impl Fn(&Environment) -> Vec<f64>) -> Vec<f64> {
        let mut acc = vec![0.0; self.d()];
        for env in &self.envs {
            for (a, v) in acc.iter_mut().zip(f(env)) {
                *a += v / self.e();
            }
        }
        acc
    }

    fn mean_scalar(&self, f: impl Fn(&Environment) -> f64) -> f64 {
        self.envs.iter().map(f).sum::<f64>() / self.e()
    }

    fn lower_curvature(&self, th: &[f64]) -> f64 {
        self.mean_scalar(|env| self.curvature(env, th)) + self.rho
    }

    /// `θ φ`, the coefficient each raw feature receives.
    pub fn effective_weights(&self, th: &[f64], phi: &[f64]) -> Vec<f64> {
        th.iter().map(|t| t * phi[0]).collect()
    }

    /// Per-environment heads after one gd step from the shared head.
    pub fn env_step(&self, th: &[f64], phi: &[f64], beta: f64) -> Vec<Vec<f64>> {
        self.envs
            .iter()
            .map(|env| vec![phi[0] - beta * (self.grad_phi(env, th, phi[0]) + self.rho * phi[0])])
            .collect()
    }
}

impl BilevelProblem<f64> for IrmConsensus {
    fn dim_theta(&self) -> usize {
        self.d()
    }
    fn dim_phi(&self) -> usize {
        1
    }
    fn upper_value(&self, th: &[f64], p: &[f64]) -> f64 {
        self.mean_scalar(|env| self.loss(env, th, p[0]) + self.gamma * self.grad_phi(env, th, p[0]).powi(2))
    }
    fn upper_grad_theta(&self, th: &[f64], p: &[f64]) -> Vec<f64> {
        self.mean_envs(|env| {
            let c = self.cross_env(env, th, p[0], 2.0 * self.gamma * self.grad_phi(env, th, p[0]));
            self.grad_theta(env, th, p[0]).iter().zip(c).map(|(a, b)| a + b).collect()
        })
    }
    fn upper_grad_phi(&self, th: &[f64], p: &[f64]) -> Vec<f64> {
        vec![self.mean_scalar(|env| {
            let g = self.grad_phi(env, th, p[0]);
            g + 2.0 * self.gamma * self.curvature(env, th) * g
        })]
    }
    fn lower_value(&self, th: &[f64], p: &[f64]) -> f64 {
        self.mean_scalar(|env| self.loss(env, th, p[0])) + 0.5 * self.rho * p[0] * p[0]
    }
    fn lower_grad_phi(&self, th: &[f64], p: &[f64]) -> Vec<f64> {
        vec![self.mean_scalar(|env| self.grad_phi(env, th, p[0])) + self.rho * p[0]]
    }
    fn lower_grad_theta(&self, th: &[f64], p: &[f64]) -> Vec<f64> {
        self.mean_envs(|env| self.grad_theta(env, th, p[0]))
    }
    fn lower_hvp(&self, th: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        vec![self.lower_curvature(th) * v[0]]
    }
    fn lower_cross_jvp(&self, th: &[f64], p: &[f64], v: &[f64]) -> Vec<f64> {
        self.mean_envs(|env| self.cross_env(env, th, p[0], v[0]))
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.simplex
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn analytic_solution(&self, th: &[f64]) -> Option<Vec<f64>> {
        let b = self.mean_scalar(|env| {
            env.x.iter().zip(&env.y).map(|(x, y)| y * dot(th, x)).sum::<f64>() / env.y.len() as f64
        });
        Some(vec![b / self.lower_curvature(th)])
    }
    fn analytic_solution_vjp(&self, th: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        let p = self.analytic_solution(th)?;
        let q = [v[0] / self.lower_curvature(th)];
        Some(self.lower_cross_jvp(th, &p, &q).into_iter().map(|x| -x).collect())
    }
}

impl TestProblem for IrmConsensus {
    fn name(&self) -> &'static str {
        "irm_consensus"
    }
    fn exact_hypergrad(&self, th: &[f64]) -> Option<Vec<f64>> {
        let p = self.analytic_solution(th)?;
        let vjp = self.analytic_solution_vjp(th, &self.upper_grad_phi(th, &p))?;
        Some(self.upper_grad_theta(th, &p).iter().zip(vjp).map(|(a, b)| a + b).collect())
    }
    fn lower_smoothness(&self, theta: &[f64]) -> f64 {
        self.lower_curvature(theta)
    }
    fn theta0(&self) -> Vec<f64> {
        vec![1.0 / self.d() as f64; self.d()]
    }
}

//! Coreset selection: upper weights over training samples, lower weighted ridge
//! regression, upper validation loss.

use blo_core::linalg::{dot, DenseMatrix};
use blo_core::{BilevelProblem, ConstraintSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::util::normal_vec;
use crate::TestProblem;

/// `θ = (w_1 … w_N, s)` on the simplex of radius `k`, so `w ≥ 0` and `‖w‖₁ ≤ k`.
///
/// `g = (1/k) Σ w_i ½(x_iᵀφ - y_i)² + (λ/2)‖φ‖²`, `f = (1/V) Σ_v ½(x_vᵀφ - y_v)²`.
pub struct Coreset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub x_val: Vec<Vec<f64>>,
    pub y_val: Vec<f64>,
    pub corrupted: Vec<bool>,
    pub k: f64,
    pub lambda: f64,
    upper: ConstraintSet<f64>,
    free: ConstraintSet<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CoresetParams {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub corrupt_frac: f64,
    pub lambda: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CoresetParams {
    fn default() -> Self {
        Self { n: 40, d: 5, k: 20, corrupt_frac: 0.2, lambda: 1e-2, noise: 0.1, seed: 0 }
    }
}

impl Coreset {
    pub fn new(p: CoresetParams) -> Self {
        assert!(p.n > 0 && p.d > 0 && p.k > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let w_true = normal_vec(&mut rng, p.d, 1.0);
        let sample = |rng: &mut ChaCha8Rng| {
            let x = normal_vec(rng, p.d, 1.0);
            let y = dot(&x, &w_true) + p.noise * normal_vec(rng, 1, 1.0)[0];
            (x, y)
        };
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for _ in 0..p.n {
            let (xi, yi) = sample(&mut rng);
            x.push(xi);
            y.push(yi);
        }
        let (mut x_val, mut y_val) = (Vec::new(), Vec::new());
        for _ in 0..p.n {
            let (xi, yi) = sample(&mut rng);
            x_val.push(xi);
            y_val.push(yi);
        }
        let n_bad = (p.corrupt_frac * p.n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..p.n).collect();
        idx.shuffle(&mut rng);
        let mut corrupted = vec![false; p.n];
        for &i in idx.iter().take(n_bad.min(p.n)) {
            corrupted[i] = true;
            y[i] = 3.0 * normal_vec(&mut rng, 1, 1.0)[0];
        }
        let k = p.k as f64;
        Self {
            x,
            y,
            x_val,
            y_val,
            corrupted,
            k,
            lambda: p.lambda,
            upper: ConstraintSet::simplex(k).expect("positive radius"),
            free: ConstraintSet::Unconstrained,
        }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    fn d(&self) -> usize {
        self.x[0].len()
    }

    /// Uniform weights `k/N` with zero slack.
    pub fn uniform_theta(&self) -> Vec<f64> {
        let mut t = vec![self.k / self.n() as f64; self.n()];
        t.push(0.0);
        t
    }

    fn residuals(&self, phi: &[f64]) -> Vec<f64> {
        self.x.iter().zip(&self.y).map(|(x, y)| dot(x, phi) - y).collect()
    }

    fn weighted_hessian(&self, theta: &[f64]) -> DenseMatrix<f64> {
        let d = self.d();
        let mut h = DenseMatrix::zeros(d, d);
        for (x, w) in self.x.iter().zip(theta) {
            for a in 0..d {
                for b in 0..d {
                    h.set(a, b, h.get(a, b) + w * x[a] * x[b] / self.k);
                }
            }
        }
        for a in 0..d {
            h.set(a, a, h.get(a, a) + self.lambda);
        }
        h
    }

    /// Mean squared error on the training samples, optionally restricted to clean ones.
    pub fn train_mse(&self, phi: &[f64], clean_only: bool) -> f64 {
        let r = self.residuals(phi);
        let kept: Vec<f64> =
            r.iter().zip(&self.corrupted).filter(|(_, &c)| !(clean_only && c)).map(|(r, _)| r * r).collect();
        kept.iter().sum::<f64>() / kept.len().max(1) as f64
    }

    /// Mean weight on clean samples divided by mean weight on corrupted ones.
    pub fn clean_to_corrupt_ratio(&self, theta: &[f64]) -> f64 {
        let (mut clean, mut nc, mut bad, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (w, &c) in theta.iter().zip(&self.corrupted) {
            if c {
                bad += w;
                nb += 1;
            } else {
                clean += w;
                nc += 1;
            }
        }
        (clean / nc.max(1) as f64) / (bad / nb.max(1) as f64)
    }

    fn cross(&self, phi: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.residuals(phi).iter().zip(&self.x).map(|(r, x)| r * dot(x, v) / self.k).collect();
        out.push(0.0);
        out
    }
}

impl BilevelProblem<f64> for Coreset {
    fn dim_theta(&self) -> usize {
        self.n() + 1
    }
    fn dim_phi(&self) -> usize {
        self.d()
    }
    fn upper_value(&self, _t: &[f64], p: &[f64]) -> f64 {
        let s: f64 = self.x_val.iter().zip(&self.y_val).map(|(x, y)| 0.5 * (dot(x, p) - y).powi(2)).sum();
        s / self.x_val.len() as f64
    }
    fn upper_grad_theta(&self, t: &[f64], _p: &[f64]) -> Vec<f64> {
        vec![0.0; t.len()]
    }
    fn upper_grad_phi(&self, _t: &[f64], p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        for (x, y) in self.x_val.iter().zip(&self.y_val) {
            let r = dot(x, p) - y;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += r * xj;
            }
        }
        g.iter().map(|v| v / self.x_val.len() as f64).collect()
    }
    fn lower_value(&self, t: &[f64], p: &[f64]) -> f64 {
        let fit: f64 = self.residuals(p).iter().zip(t).map(|(r, w)| w * 0.5 * r * r).sum();
        fit / self.k + 0.5 * self.lambda * dot(p, p)
    }
    fn lower_grad_phi(&self, t: &[f64], p: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = p.iter().map(|v| self.lambda * v).collect();
        for ((x, r), w) in self.x.iter().zip(self.residuals(p)).zip(t) {
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += w * r * xj / self.k;
            }
        }
        g
    }
    fn lower_grad_theta(&self, _t: &[f64], p: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = self.residuals(p).iter().map(|r| 0.5 * r * r / self.k).collect();
        g.push(0.0);
        g
    }
    fn lower_hvp(&self, t: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|x| self.lambda * x).collect();
        for (x, w) in self.x.iter().zip(t) {
            let s = w * dot(x, v) / self.k;
            for (o, xj) in out.iter_mut().zip(x) {
                *o += s * xj;
            }
        }
        out
    }
    fn lower_cross_jvp(&self, _t: &[f64], p: &[f64], v: &[f64]) -> Vec<f64> {
        self.cross(p, v)
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.upper
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn analytic_solution(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let mut rhs = vec![0.0; self.d()];
        for ((x, y), w) in self.x.iter().zip(&self.y).zip(theta) {
            for (r, xj) in rhs.iter_mut().zip(x) {
                *r += w * y * xj / self.k;
            }
        }
        self.weighted_hessian(theta).solve(&rhs, 1e-14).ok()
    }
    fn analytic_solution_vjp(&self, theta: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        let phi = self.analytic_solution(theta)?;
        let q = self.weighted_hessian(theta).solve(v, 1e-14).ok()?;
        Some(self.cross(&phi, &q).into_iter().map(|x| -x).collect())
    }
}

impl TestProblem for Coreset {
    fn name(&self) -> &'static str {
        "coreset"
    }
    fn exact_hypergrad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let phi = self.analytic_solution(theta)?;
        self.analytic_solution_vjp(theta, &self.upper_grad_phi(theta, &phi))
    }
    /// Bound `max_i ‖x_i‖² + λ`, valid whenever `‖w‖₁ ≤ k`.
    fn lower_smoothness(&self, _theta: &[f64]) -> f64 {
        self.x.iter().map(|x| dot(x, x)).fold(0.0, f64::max) + self.lambda
    }
    fn theta0(&self) -> Vec<f64> {
        self.uniform_theta()
    }
}

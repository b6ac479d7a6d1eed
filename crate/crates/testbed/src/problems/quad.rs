//! Quadratic bilevel problem with closed-form solution map and hypergradient.

use blo_core::linalg::{dot, DenseMatrix};
use blo_core::{mean_over, mean_over_scalar, BilevelProblem, ConstraintSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::util::normal_vec;
use crate::TestProblem;

/// `g = ½‖φ - Wθ - c‖² + (λ/2)‖φ‖²`, `f = ½‖φ - φ★‖² + ½‖θ‖²`.
///
/// With `samples > 0` the problem is a finite sum over per-sample `(c_i, φ★_i)`.
pub struct QuadBilevel {
    pub w: DenseMatrix<f64>,
    pub cs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub lambda: f64,
    finite_sum: bool,
    cross_scale: f64,
    c_bar: Vec<f64>,
    target_bar: Vec<f64>,
    free: ConstraintSet<f64>,
}

impl QuadBilevel {
    pub fn new(w: DenseMatrix<f64>, cs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, lambda: f64, finite_sum: bool) -> Self {
        assert!(!cs.is_empty() && cs.len() == targets.len());
        let n = w.rows;
        let c_bar = mean_over(0..cs.len(), n, |i| cs[i].clone());
        let target_bar = mean_over(0..targets.len(), n, |i| targets[i].clone());
        Self { w, cs, targets, lambda, finite_sum, cross_scale: 1.0, c_bar, target_bar, free: ConstraintSet::Unconstrained }
    }

    /// Seeded instance: `W` has N(0, 1/m) entries, `c` and `φ★` are N(0, 1).
    pub fn random(m: usize, n: usize, lambda: f64, samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (m as f64).sqrt();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, m, scale)).collect();
        let w = DenseMatrix::from_rows(&rows);
        let count = samples.max(1);
        let cs = (0..count).map(|_| normal_vec(&mut rng, n, 1.0)).collect();
        let targets = (0..count).map(|_| normal_vec(&mut rng, n, 1.0)).collect();
        Self::new(w, cs, targets, lambda, samples > 0)
    }

    /// Scales the cross-JVP oracle so that it no longer matches the objective.
    /// Only useful as a negative fixture for gradient checks.
    pub fn corrupted(mut self, factor: f64) -> Self {
        self.cross_scale = factor;
        self
    }

    pub fn phi_star(&self, theta: &[f64]) -> Vec<f64> {
        let wt = self.w.matvec(theta);
        wt.iter().zip(&self.c_bar).map(|(a, c)| (a + c) / (1.0 + self.lambda)).collect()
    }

    /// `θ + Wᵀ(φ*(θ) - φ★)/(1+λ)` with sample means of `c` and `φ★`.
    pub fn exact_hypergrad(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.phi_star(theta);
        let r: Vec<f64> = p.iter().zip(&self.target_bar).map(|(a, b)| a - b).collect();
        let wr = self.w.tmatvec(&r);
        theta.iter().zip(&wr).map(|(t, x)| t + x / (1.0 + self.lambda)).collect()
    }

    /// Minimizer of `F(θ) = f(θ, φ*(θ))`: `(I + WᵀW/(1+λ)²) θ = Wᵀ(φ★ - c/(1+λ))/(1+λ)`.
    pub fn optimum(&self) -> Vec<f64> {
        let (m, s) = (self.w.cols, 1.0 + self.lambda);
        let mut a = DenseMatrix::identity(m);
        for i in 0..m {
            for j in 0..m {
                let wij: f64 = (0..self.w.rows).map(|k| self.w.get(k, i) * self.w.get(k, j)).sum();
                a.set(i, j, a.get(i, j) + wij / (s * s));
            }
        }
        let r: Vec<f64> = self.target_bar.iter().zip(&self.c_bar).map(|(t, c)| t - c / s).collect();
        let rhs: Vec<f64> = self.w.tmatvec(&r).into_iter().map(|x| x / s).collect();
        a.solve(&rhs, 1e-14).expect("I + WᵀW/s² is positive definite")
    }

    fn g_i(&self, theta: &[f64], phi: &[f64], i: usize) -> f64 {
        let r = self.res(theta, phi, i);
        0.5 * dot(&r, &r) + 0.5 * self.lambda * dot(phi, phi)
    }

    fn res(&self, theta: &[f64], phi: &[f64], i: usize) -> Vec<f64> {
        let wt = self.w.matvec(theta);
        phi.iter().zip(&wt).zip(&self.cs[i]).map(|((p, a), c)| p - a - c).collect()
    }

    fn grad_phi_i(&self, theta: &[f64], phi: &[f64], i: usize) -> Vec<f64> {
        let r = self.res(theta, phi, i);
        r.iter().zip(phi).map(|(a, p)| a + self.lambda * p).collect()
    }

    fn grad_theta_i(&self, theta: &[f64], phi: &[f64], i: usize) -> Vec<f64> {
        self.w.tmatvec(&self.res(theta, phi, i)).into_iter().map(|x| -x).collect()
    }

    fn f_i(&self, theta: &[f64], phi: &[f64], i: usize) -> f64 {
        let d: Vec<f64> = phi.iter().zip(&self.targets[i]).map(|(a, b)| a - b).collect();
        0.5 * dot(&d, &d) + 0.5 * dot(theta, theta)
    }

    fn f_phi_i(&self, phi: &[f64], i: usize) -> Vec<f64> {
        phi.iter().zip(&self.targets[i]).map(|(a, b)| a - b).collect()
    }

    fn hvp(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| (1.0 + self.lambda) * x).collect()
    }

    fn cross(&self, v: &[f64]) -> Vec<f64> {
        self.w.tmatvec(v).into_iter().map(|x| -self.cross_scale * x).collect()
    }

    fn all(&self) -> std::ops::Range<usize> {
        0..self.cs.len()
    }
}

impl BilevelProblem<f64> for QuadBilevel {
    fn dim_theta(&self) -> usize {
        self.w.cols
    }
    fn dim_phi(&self) -> usize {
        self.w.rows
    }
    fn upper_value(&self, theta: &[f64], phi: &[f64]) -> f64 {
        mean_over_scalar(self.all(), |i| self.f_i(theta, phi, i))
    }
    fn upper_grad_theta(&self, theta: &[f64], _phi: &[f64]) -> Vec<f64> {
        mean_over(self.all(), theta.len(), |_| theta.to_vec())
    }
    fn upper_grad_phi(&self, _theta: &[f64], phi: &[f64]) -> Vec<f64> {
        mean_over(self.all(), phi.len(), |i| self.f_phi_i(phi, i))
    }
    fn lower_value(&self, theta: &[f64], phi: &[f64]) -> f64 {
        mean_over_scalar(self.all(), |i| self.g_i(theta, phi, i))
    }
    fn lower_grad_phi(&self, theta: &[f64], phi: &[f64]) -> Vec<f64> {
        mean_over(self.all(), phi.len(), |i| self.grad_phi_i(theta, phi, i))
    }
    fn lower_grad_theta(&self, theta: &[f64], phi: &[f64]) -> Vec<f64> {
        mean_over(self.all(), theta.len(), |i| self.grad_theta_i(theta, phi, i))
    }
    fn lower_hvp(&self, _theta: &[f64], _phi: &[f64], v: &[f64]) -> Vec<f64> {
        mean_over(self.all(), v.len(), |_| self.hvp(v))
    }
    fn lower_cross_jvp(&self, _theta: &[f64], _phi: &[f64], v: &[f64]) -> Vec<f64> {
        mean_over(self.all(), self.w.cols, |_| self.cross(v))
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn num_samples(&self) -> usize {
        if self.finite_sum {
            self.cs.len()
        } else {
            0
        }
    }
    fn sample_upper_value(&self, theta: &[f64], phi: &[f64], i: usize) -> f64 {
        self.f_i(theta, phi, i)
    }
    fn sample_upper_grad_theta(&self, theta: &[f64], _phi: &[f64], _i: usize) -> Vec<f64> {
        theta.to_vec()
    }
    fn sample_upper_grad_phi(&self, _theta: &[f64], phi: &[f64], i: usize) -> Vec<f64> {
        self.f_phi_i(phi, i)
    }
    fn sample_lower_value(&self, theta: &[f64], phi: &[f64], i: usize) -> f64 {
        self.g_i(theta, phi, i)
    }
    fn sample_lower_grad_phi(&self, theta: &[f64], phi: &[f64], i: usize) -> Vec<f64> {
        self.grad_phi_i(theta, phi, i)
    }
    fn sample_lower_grad_theta(&self, theta: &[f64], phi: &[f64], i: usize) -> Vec<f64> {
        self.grad_theta_i(theta, phi, i)
    }
    fn sample_lower_hvp(&self, _theta: &[f64], _phi: &[f64], v: &[f64], _i: usize) -> Vec<f64> {
        self.hvp(v)
    }
    fn sample_lower_cross_jvp(&self, _theta: &[f64], _phi: &[f64], v: &[f64], _i: usize) -> Vec<f64> {
        self.cross(v)
    }
    fn analytic_solution(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(self.phi_star(theta))
    }
    fn analytic_solution_vjp(&self, _theta: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        Some(self.w.tmatvec(v).into_iter().map(|x| x / (1.0 + self.lambda)).collect())
    }
}

impl TestProblem for QuadBilevel {
    fn name(&self) -> &'static str {
        "quad_bilevel"
    }
    fn exact_hypergrad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(self.exact_hypergrad(theta))
    }
    fn lower_smoothness(&self, _theta: &[f64]) -> f64 {
        1.0 + self.lambda
    }
}

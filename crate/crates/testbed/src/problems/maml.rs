//! Few-shot sinusoid regression as a bilevel problem over a shared initialization.

use blo_core::linalg::dot;
use blo_core::{BilevelProblem, ConstraintSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::TestProblem;

pub const BASIS: usize = 5;

/// `[1, sin x, cos x, sin 2x, cos 2x]`
pub fn features(x: f64) -> [f64; BASIS] {
    [1.0, x.sin(), x.cos(), (2.0 * x).sin(), (2.0 * x).cos()]
}

/// One regression task `y = a sin(x - b)` with support and query sets.
#[derive(Debug, Clone)]
pub struct Task {
    pub amplitude: f64,
    pub phase: f64,
    pub support: Vec<(f64, f64)>,
    pub query: Vec<(f64, f64)>,
}

impl Task {
    pub fn sample(rng: &mut ChaCha8Rng, shots: usize) -> Self {
        let amplitude = rng.gen_range(0.1..5.0);
        let phase = rng.gen_range(0.0..std::f64::consts::PI);
        let draw = |rng: &mut ChaCha8Rng| {
            (0..shots)
                .map(|_| {
                    let x = rng.gen_range(-5.0..5.0);
                    (x, amplitude * (x - phase).sin())
                })
                .collect::<Vec<_>>()
        };
        let support = draw(rng);
        let query = draw(rng);
        Self { amplitude, phase, support, query }
    }
}

fn loss(set: &[(f64, f64)], w: &[f64]) -> f64 {
    set.iter().map(|&(x, y)| 0.5 * (dot(&features(x), w) - y).powi(2)).sum::<f64>() / set.len() as f64
}

fn loss_grad(set: &[(f64, f64)], w: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; BASIS];
    for &(x, y) in set {
        let psi = features(x);
        let r = dot(&psi, w) - y;
        for (gj, p) in g.iter_mut().zip(psi) {
            *gj += r * p;
        }
    }
    g.iter().map(|v| v / set.len() as f64).collect()
}

fn gram_apply(set: &[(f64, f64)], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; BASIS];
    for &(x, _) in set {
        let psi = features(x);
        let s = dot(&psi, v);
        for (o, p) in out.iter_mut().zip(psi) {
            *o += s * p;
        }
    }
    out.iter().map(|v| v / set.len() as f64).collect()
}

/// Squared loss on the query set after `steps` gd steps from `init` on the support set.
pub fn adapted_query_loss(task: &Task, init: &[f64], steps: usize, beta: f64) -> f64 {
    let mut w = init.to_vec();
    for _ in 0..steps {
        let g = loss_grad(&task.support, &w);
        for (wj, gj) in w.iter_mut().zip(g) {
            *wj -= beta * gj;
        }
    }
    loss(&task.query, &w)
}

/// Tasks are the finite-sum dimension. `θ` is the shared initialization and
/// `φ = (δ_1 … δ_T)` stacks per-task offsets, so task `t` uses weights `θ + δ_t`.
///
/// Per task, `g_t = T · L_support(θ + δ_t)` and `f_t = L_query(θ + δ_t)`; with
/// `φ_0 = 0`, K lower gd steps reproduce K adaptation steps on every task.
pub struct MamlSinusoid {
    pub tasks: Vec<Task>,
    /// Adaptation steps and stepsize used when the problem is run with an unrolled engine.
    pub adapt_steps: usize,
    pub inner_step: f64,
    free: ConstraintSet<f64>,
}

impl MamlSinusoid {
    pub fn new(tasks: usize, shots: usize, adapt_steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks = (0..tasks).map(|_| Task::sample(&mut rng, shots)).collect();
        Self { tasks, adapt_steps, inner_step: 0.3, free: ConstraintSet::Unconstrained }
    }

    fn t(&self) -> usize {
        self.tasks.len()
    }

    fn weights(&self, theta: &[f64], phi: &[f64], t: usize) -> Vec<f64> {
        theta.iter().zip(&phi[t * BASIS..(t + 1) * BASIS]).map(|(a, b)| a + b).collect()
    }

    fn block(&self, t: usize, v: Vec<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.t() * BASIS];
        out[t * BASIS..(t + 1) * BASIS].copy_from_slice(&v);
        out
    }

    fn scaled(&self, v: Vec<f64>) -> Vec<f64> {
        let s = self.t() as f64;
        v.into_iter().map(|x| s * x).collect()
    }

    fn sum_tasks(&self, dim: usize, f: impl Fn(usize) -> Vec<f64>) -> Vec<f64> {
        let mut acc = vec![0.0; dim];
        for t in 0..self.t() {
            for (a, v) in acc.iter_mut().zip(f(t)) {
                *a += v;
            }
        }
        acc
    }
}

impl BilevelProblem<f64> for MamlSinusoid {
    fn dim_theta(&self) -> usize {
        BASIS
    }
    fn dim_phi(&self) -> usize {
        self.t() * BASIS
    }
    fn upper_value(&self, th: &[f64], p: &[f64]) -> f64 {
        (0..self.t()).map(|t| self.sample_upper_value(th, p, t)).sum::<f64>() / self.t() as f64
    }
    fn upper_grad_theta(&self, th: &[f64], p: &[f64]) -> Vec<f64> {
        let s = self.sum_tasks(BASIS, |t| self.sample_upper_grad_theta(th, p, t));
        s.iter().map(|v| v / self.t() as f64).collect()
    }
    fn upper_grad_phi(&self, th: &[f64], p: &[f64]) -> Vec<f64> {
        let s = self.sum_tasks(p.len(), |t| self.sample_upper_grad_phi(th, p, t));
        s.iter().map(|v| v / self.t() as f64).collect()
    }
    fn lower_value(&self, th: &[f64], p: &[f64]) -> f64 {
        (0..self.t()).map(|t| loss(&self.tasks[t].support, &self.weights(th, p, t))).sum()
    }
    fn lower_grad_phi(&self, th: &[f64], p: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(p.len());
        for t in 0..self.t() {
            out.extend(loss_grad(&self.tasks[t].support, &self.weights(th, p, t)));
        }
        out
    }
    fn lower_grad_theta(&self, th: &[f64], p: &[f64]) -> Vec<f64> {
        self.sum_tasks(BASIS, |t| loss_grad(&self.tasks[t].support, &self.weights(th, p, t)))
    }
    fn lower_hvp(&self, _th: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(v.len());
        for t in 0..self.t() {
            out.extend(gram_apply(&self.tasks[t].support, &v[t * BASIS..(t + 1) * BASIS]));
        }
        out
    }
    fn lower_cross_jvp(&self, _th: &[f64], _p: &[f64], v: &[f64]) -> Vec<f64> {
        self.sum_tasks(BASIS, |t| gram_apply(&self.tasks[t].support, &v[t * BASIS..(t + 1) * BASIS]))
    }
    fn upper_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn lower_set(&self) -> &ConstraintSet<f64> {
        &self.free
    }
    fn num_samples(&self) -> usize {
        self.t()
    }
    fn sample_upper_value(&self, th: &[f64], p: &[f64], t: usize) -> f64 {
        loss(&self.tasks[t].query, &self.weights(th, p, t))
    }
    fn sample_upper_grad_theta(&self, th: &[f64], p: &[f64], t: usize) -> Vec<f64> {
        loss_grad(&self.tasks[t].query, &self.weights(th, p, t))
    }
    fn sample_upper_grad_phi(&self, th: &[f64], p: &[f64], t: usize) -> Vec<f64> {
        self.block(t, loss_grad(&self.tasks[t].query, &self.weights(th, p, t)))
    }
    fn sample_lower_value(&self, th: &[f64], p: &[f64], t: usize) -> f64 {
        self.t() as f64 * loss(&self.tasks[t].support, &self.weights(th, p, t))
    }
    fn sample_lower_grad_phi(&self, th: &[f64], p: &[f64], t: usize) -> Vec<f64> {
        self.scaled(self.block(t, loss_grad(&self.tasks[t].support, &self.weights(th, p, t))))
    }
    fn sample_lower_grad_theta(&self, th: &[f64], p: &[f64], t: usize) -> Vec<f64> {
        self.scaled(loss_grad(&self.tasks[t].support, &self.weights(th, p, t)))
    }
    fn sample_lower_hvp(&self, _th: &[f64], _p: &[f64], v: &[f64], t: usize) -> Vec<f64> {
        self.scaled(self.block(t, gram_apply(&self.tasks[t].support, &v[t * BASIS..(t + 1) * BASIS])))
    }
    fn sample_lower_cross_jvp(&self, _th: &[f64], _p: &[f64], v: &[f64], t: usize) -> Vec<f64> {
        self.scaled(gram_apply(&self.tasks[t].support, &v[t * BASIS..(t + 1) * BASIS]))
    }
}

impl TestProblem for MamlSinusoid {
    fn name(&self) -> &'static str {
        "maml_sinusoid"
    }
    /// Largest Gershgorin bound over the per-task support Gram matrices.
    fn lower_smoothness(&self, _theta: &[f64]) -> f64 {
        let mut best: f64 = 0.0;
        for task in &self.tasks {
            for i in 0..BASIS {
                let row = gram_apply(&task.support, &crate::util::unit(BASIS, i));
                best = best.max(row.iter().map(|v| v.abs()).sum());
            }
        }
        best
    }
}

//! The bilevel problem model: oracle bundle, finite-sum batching and oracle accounting.

use std::ops::{Add, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintSet;
use crate::error::{arg, Result};
use crate::linalg::zeros;
use crate::scalar::Scalar;

/// Oracle bundle for
/// `min_{θ ∈ U} f(θ, φ*(θ))` s.t. `φ*(θ) ∈ argmin_{φ ∈ C} g(θ, φ)`.
///
/// Second-order information is only available as products with a vector.
/// Oracles must be pure: identical inputs give bit-identical outputs.
///
/// Finite-sum problems (`num_samples() > 0`) also override the `sample_*`
/// oracles; their full objectives must equal [`mean_over`] of the samples in
/// index order so that a full batch reproduces the deterministic oracle bit for bit.
pub trait BilevelProblem<T: Scalar>: Sync {
    /// Upper variable dimension `m`.
    fn dim_theta(&self) -> usize;
    /// Lower variable dimension `n`.
    fn dim_phi(&self) -> usize;

    fn upper_value(&self, theta: &[T], phi: &[T]) -> T;
    fn upper_grad_theta(&self, theta: &[T], phi: &[T]) -> Vec<T>;
    fn upper_grad_phi(&self, theta: &[T], phi: &[T]) -> Vec<T>;
    fn lower_value(&self, theta: &[T], phi: &[T]) -> T;
    fn lower_grad_phi(&self, theta: &[T], phi: &[T]) -> Vec<T>;
    /// `∇_θ g`, used by the value-function engine.
    fn lower_grad_theta(&self, theta: &[T], phi: &[T]) -> Vec<T>;
    /// `∇²_φφ g · v` (n-vector).
    fn lower_hvp(&self, theta: &[T], phi: &[T], v: &[T]) -> Vec<T>;
    /// `∇²_θφ g · v` (m-vector): the θ-gradient of `⟨∇_φ g, v⟩`.
    fn lower_cross_jvp(&self, theta: &[T], phi: &[T], v: &[T]) -> Vec<T>;

    fn upper_set(&self) -> &ConstraintSet<T>;
    fn lower_set(&self) -> &ConstraintSet<T>;

    /// `N` for finite-sum problems, 0 for deterministic ones.
    fn num_samples(&self) -> usize {
        0
    }

    fn sample_upper_value(&self, theta: &[T], phi: &[T], _i: usize) -> T {
        self.upper_value(theta, phi)
    }
    fn sample_upper_grad_theta(&self, theta: &[T], phi: &[T], _i: usize) -> Vec<T> {
        self.upper_grad_theta(theta, phi)
    }
    fn sample_upper_grad_phi(&self, theta: &[T], phi: &[T], _i: usize) -> Vec<T> {
        self.upper_grad_phi(theta, phi)
    }
    fn sample_lower_value(&self, theta: &[T], phi: &[T], _i: usize) -> T {
        self.lower_value(theta, phi)
    }
    fn sample_lower_grad_phi(&self, theta: &[T], phi: &[T], _i: usize) -> Vec<T> {
        self.lower_grad_phi(theta, phi)
    }
    fn sample_lower_grad_theta(&self, theta: &[T], phi: &[T], _i: usize) -> Vec<T> {
        self.lower_grad_theta(theta, phi)
    }
    fn sample_lower_hvp(&self, theta: &[T], phi: &[T], v: &[T], _i: usize) -> Vec<T> {
        self.lower_hvp(theta, phi, v)
    }
    fn sample_lower_cross_jvp(&self, theta: &[T], phi: &[T], v: &[T], _i: usize) -> Vec<T> {
        self.lower_cross_jvp(theta, phi, v)
    }

    fn project_upper(&self, theta: &[T]) -> Result<Vec<T>> {
        self.upper_set().project(theta)
    }
    fn project_lower(&self, phi: &[T]) -> Result<Vec<T>> {
        self.lower_set().project(phi)
    }

    /// Starting point for lower-level solvers.
    fn initial_phi(&self) -> Vec<T> {
        zeros(self.dim_phi())
    }

    /// Closed-form lower solution map, when the problem supplies one.
    fn analytic_solution(&self, _theta: &[T]) -> Option<Vec<T>> {
        None
    }
    /// `(dφ*/dθ)ᵀ v` for the closed-form solution map.
    fn analytic_solution_vjp(&self, _theta: &[T], _v: &[T]) -> Option<Vec<T>> {
        None
    }
    /// True when the lower problem carries constraints coupling θ and φ that
    /// are not expressed through the oracles; only the analytic engine applies.
    fn coupled_lower(&self) -> bool {
        false
    }
}

/// Mean of per-index vectors, accumulated in the order given.
pub fn mean_over<T: Scalar>(
    indices: impl IntoIterator<Item = usize>,
    dim: usize,
    f: impl Fn(usize) -> Vec<T>,
) -> Vec<T> {
    let mut acc: Vec<T> = zeros(dim);
    let mut count = 0usize;
    for i in indices {
        for (a, v) in acc.iter_mut().zip(f(i)) {
            *a = *a + v;
        }
        count += 1;
    }
    let c = T::from_usize_lossy(count.max(1));
    acc.iter().map(|&a| a / c).collect()
}

/// Scalar counterpart of [`mean_over`].
pub fn mean_over_scalar<T: Scalar>(indices: impl IntoIterator<Item = usize>, f: impl Fn(usize) -> T) -> T {
    let mut acc = T::zero();
    let mut count = 0usize;
    for i in indices {
        acc = acc + f(i);
        count += 1;
    }
    acc / T::from_usize_lossy(count.max(1))
}

/// Number of oracle calls of each kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCounters {
    pub upper_grads: u64,
    pub lower_grads: u64,
    pub hvps: u64,
    pub jvps: u64,
    pub projections: u64,
    /// Objective value evaluations of either level.
    pub values: u64,
}

impl OracleCounters {
    pub fn total_gradients(&self) -> u64 {
        self.upper_grads + self.lower_grads
    }

    /// True when no field of `self` is below the matching field of `earlier`.
    pub fn dominates(&self, earlier: &Self) -> bool {
        self.upper_grads >= earlier.upper_grads
            && self.lower_grads >= earlier.lower_grads
            && self.hvps >= earlier.hvps
            && self.jvps >= earlier.jvps
            && self.projections >= earlier.projections
            && self.values >= earlier.values
    }
}

impl Add for OracleCounters {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            upper_grads: self.upper_grads + o.upper_grads,
            lower_grads: self.lower_grads + o.lower_grads,
            hvps: self.hvps + o.hvps,
            jvps: self.jvps + o.jvps,
            projections: self.projections + o.projections,
            values: self.values + o.values,
        }
    }
}

impl Sub for OracleCounters {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            upper_grads: self.upper_grads - o.upper_grads,
            lower_grads: self.lower_grads - o.lower_grads,
            hvps: self.hvps - o.hvps,
            jvps: self.jvps - o.jvps,
            projections: self.projections - o.projections,
            values: self.values - o.values,
        }
    }
}

#[derive(Debug, Default)]
struct CounterCells {
    upper_grads: AtomicU64,
    lower_grads: AtomicU64,
    hvps: AtomicU64,
    jvps: AtomicU64,
    projections: AtomicU64,
    values: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

/// Wraps a problem and counts every oracle call.
pub struct Counted<'a, P: ?Sized> {
    inner: &'a P,
    cells: CounterCells,
}

impl<'a, P: ?Sized> Counted<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self { inner, cells: CounterCells::default() }
    }

    pub fn inner(&self) -> &'a P {
        self.inner
    }

    pub fn counters(&self) -> OracleCounters {
        let c = &self.cells;
        OracleCounters {
            upper_grads: c.upper_grads.load(Ordering::Relaxed),
            lower_grads: c.lower_grads.load(Ordering::Relaxed),
            hvps: c.hvps.load(Ordering::Relaxed),
            jvps: c.jvps.load(Ordering::Relaxed),
            projections: c.projections.load(Ordering::Relaxed),
            values: c.values.load(Ordering::Relaxed),
        }
    }
}

impl<'a, T: Scalar, P: BilevelProblem<T> + ?Sized> BilevelProblem<T> for Counted<'a, P> {
    fn dim_theta(&self) -> usize {
        self.inner.dim_theta()
    }
    fn dim_phi(&self) -> usize {
        self.inner.dim_phi()
    }
    fn upper_value(&self, theta: &[T], phi: &[T]) -> T {
        bump(&self.cells.values);
        self.inner.upper_value(theta, phi)
    }
    fn upper_grad_theta(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        bump(&self.cells.upper_grads);
        self.inner.upper_grad_theta(theta, phi)
    }
    fn upper_grad_phi(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        bump(&self.cells.upper_grads);
        self.inner.upper_grad_phi(theta, phi)
    }
    fn lower_value(&self, theta: &[T], phi: &[T]) -> T {
        bump(&self.cells.values);
        self.inner.lower_value(theta, phi)
    }
    fn lower_grad_phi(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        bump(&self.cells.lower_grads);
        self.inner.lower_grad_phi(theta, phi)
    }
    fn lower_grad_theta(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        bump(&self.cells.lower_grads);
        self.inner.lower_grad_theta(theta, phi)
    }
    fn lower_hvp(&self, theta: &[T], phi: &[T], v: &[T]) -> Vec<T> {
        bump(&self.cells.hvps);
        self.inner.lower_hvp(theta, phi, v)
    }
    fn lower_cross_jvp(&self, theta: &[T], phi: &[T], v: &[T]) -> Vec<T> {
        bump(&self.cells.jvps);
        self.inner.lower_cross_jvp(theta, phi, v)
    }
    fn upper_set(&self) -> &ConstraintSet<T> {
        self.inner.upper_set()
    }
    fn lower_set(&self) -> &ConstraintSet<T> {
        self.inner.lower_set()
    }
    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }
    fn sample_upper_value(&self, theta: &[T], phi: &[T], i: usize) -> T {
        bump(&self.cells.values);
        self.inner.sample_upper_value(theta, phi, i)
    }
    fn sample_upper_grad_theta(&self, theta: &[T], phi: &[T], i: usize) -> Vec<T> {
        bump(&self.cells.upper_grads);
        self.inner.sample_upper_grad_theta(theta, phi, i)
    }
    fn sample_upper_grad_phi(&self, theta: &[T], phi: &[T], i: usize) -> Vec<T> {
        bump(&self.cells.upper_grads);
        self.inner.sample_upper_grad_phi(theta, phi, i)
    }
    fn sample_lower_value(&self, theta: &[T], phi: &[T], i: usize) -> T {
        bump(&self.cells.values);
        self.inner.sample_lower_value(theta, phi, i)
    }
    fn sample_lower_grad_phi(&self, theta: &[T], phi: &[T], i: usize) -> Vec<T> {
        bump(&self.cells.lower_grads);
        self.inner.sample_lower_grad_phi(theta, phi, i)
    }
    fn sample_lower_grad_theta(&self, theta: &[T], phi: &[T], i: usize) -> Vec<T> {
        bump(&self.cells.lower_grads);
        self.inner.sample_lower_grad_theta(theta, phi, i)
    }
    fn sample_lower_hvp(&self, theta: &[T], phi: &[T], v: &[T], i: usize) -> Vec<T> {
        bump(&self.cells.hvps);
        self.inner.sample_lower_hvp(theta, phi, v, i)
    }
    fn sample_lower_cross_jvp(&self, theta: &[T], phi: &[T], v: &[T], i: usize) -> Vec<T> {
        bump(&self.cells.jvps);
        self.inner.sample_lower_cross_jvp(theta, phi, v, i)
    }
    fn project_upper(&self, theta: &[T]) -> Result<Vec<T>> {
        bump(&self.cells.projections);
        self.inner.project_upper(theta)
    }
    fn project_lower(&self, phi: &[T]) -> Result<Vec<T>> {
        bump(&self.cells.projections);
        self.inner.project_lower(phi)
    }
    fn initial_phi(&self) -> Vec<T> {
        self.inner.initial_phi()
    }
    fn analytic_solution(&self, theta: &[T]) -> Option<Vec<T>> {
        self.inner.analytic_solution(theta)
    }
    fn analytic_solution_vjp(&self, theta: &[T], v: &[T]) -> Option<Vec<T>> {
        self.inner.analytic_solution_vjp(theta, v)
    }
    fn coupled_lower(&self) -> bool {
        self.inner.coupled_lower()
    }
}

/// Sorted sample indices drawn without replacement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub indices: Vec<usize>,
    pub rng_seed: u64,
}

impl SampleBatch {
    /// Draws `size` distinct indices from `0..total`. A size of at least `total`
    /// yields the full batch `0..total`.
    pub fn draw(total: usize, size: usize, rng: &mut ChaCha8Rng, rng_seed: u64) -> Self {
        let mut indices = if size >= total {
            (0..total).collect()
        } else {
            index::sample(rng, total, size).into_vec()
        };
        indices.sort_unstable();
        Self { indices, rng_seed }
    }

    pub fn from_seed(total: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::draw(total, size, &mut rng, seed)
    }

    pub fn full(total: usize) -> Self {
        Self { indices: (0..total).collect(), rng_seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if self.indices.is_empty() {
            return arg("empty sample batch");
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= total) {
            return arg(format!("sample index {bad} out of range 0..{total}"));
        }
        Ok(())
    }
}

/// Finite-sum problem restricted to one upper batch and one lower batch.
///
/// All deterministic oracles average the corresponding per-sample oracles;
/// engines run on a view unchanged.
pub struct BatchView<'a, P: ?Sized> {
    inner: &'a P,
    upper: Vec<usize>,
    lower: Vec<usize>,
}

impl<'a, P: ?Sized> BatchView<'a, P> {
    pub fn new<T: Scalar>(inner: &'a P, upper: &SampleBatch, lower: &SampleBatch) -> Result<Self>
    where
        P: BilevelProblem<T>,
    {
        let n = inner.num_samples();
        if n == 0 {
            return arg("batch view requires a finite-sum problem");
        }
        upper.validate(n)?;
        lower.validate(n)?;
        Ok(Self { inner, upper: upper.indices.clone(), lower: lower.indices.clone() })
    }
}

impl<'a, T: Scalar, P: BilevelProblem<T> + ?Sized> BilevelProblem<T> for BatchView<'a, P> {
    fn dim_theta(&self) -> usize {
        self.inner.dim_theta()
    }
    fn dim_phi(&self) -> usize {
        self.inner.dim_phi()
    }
    fn upper_value(&self, theta: &[T], phi: &[T]) -> T {
        mean_over_scalar(self.upper.iter().copied(), |i| self.inner.sample_upper_value(theta, phi, i))
    }
    fn upper_grad_theta(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        mean_over(self.upper.iter().copied(), theta.len(), |i| {
            self.inner.sample_upper_grad_theta(theta, phi, i)
        })
    }
    fn upper_grad_phi(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        mean_over(self.upper.iter().copied(), phi.len(), |i| self.inner.sample_upper_grad_phi(theta, phi, i))
    }
    fn lower_value(&self, theta: &[T], phi: &[T]) -> T {
        mean_over_scalar(self.lower.iter().copied(), |i| self.inner.sample_lower_value(theta, phi, i))
    }
    fn lower_grad_phi(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        mean_over(self.lower.iter().copied(), phi.len(), |i| self.inner.sample_lower_grad_phi(theta, phi, i))
    }
    fn lower_grad_theta(&self, theta: &[T], phi: &[T]) -> Vec<T> {
        mean_over(self.lower.iter().copied(), theta.len(), |i| {
            self.inner.sample_lower_grad_theta(theta, phi, i)
        })
    }
    fn lower_hvp(&self, theta: &[T], phi: &[T], v: &[T]) -> Vec<T> {
        mean_over(self.lower.iter().copied(), phi.len(), |i| self.inner.sample_lower_hvp(theta, phi, v, i))
    }
    fn lower_cross_jvp(&self, theta: &[T], phi: &[T], v: &[T]) -> Vec<T> {
        mean_over(self.lower.iter().copied(), theta.len(), |i| {
            self.inner.sample_lower_cross_jvp(theta, phi, v, i)
        })
    }
    fn upper_set(&self) -> &ConstraintSet<T> {
        self.inner.upper_set()
    }
    fn lower_set(&self) -> &ConstraintSet<T> {
        self.inner.lower_set()
    }
    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }
    fn sample_upper_value(&self, theta: &[T], phi: &[T], i: usize) -> T {
        self.inner.sample_upper_value(theta, phi, i)
    }
    fn sample_upper_grad_theta(&self, theta: &[T], phi: &[T], i: usize) -> Vec<T> {
        self.inner.sample_upper_grad_theta(theta, phi, i)
    }
    fn sample_upper_grad_phi(&self, theta: &[T], phi: &[T], i: usize) -> Vec<T> {
        self.inner.sample_upper_grad_phi(theta, phi, i)
    }
    fn sample_lower_value(&self, theta: &[T], phi: &[T], i: usize) -> T {
        self.inner.sample_lower_value(theta, phi, i)
    }
    fn sample_lower_grad_phi(&self, theta: &[T], phi: &[T], i: usize) -> Vec<T> {
        self.inner.sample_lower_grad_phi(theta, phi, i)
    }
    fn sample_lower_grad_theta(&self, theta: &[T], phi: &[T], i: usize) -> Vec<T> {
        self.inner.sample_lower_grad_theta(theta, phi, i)
    }
    fn sample_lower_hvp(&self, theta: &[T], phi: &[T], v: &[T], i: usize) -> Vec<T> {
        self.inner.sample_lower_hvp(theta, phi, v, i)
    }
    fn sample_lower_cross_jvp(&self, theta: &[T], phi: &[T], v: &[T], i: usize) -> Vec<T> {
        self.inner.sample_lower_cross_jvp(theta, phi, v, i)
    }
    fn project_upper(&self, theta: &[T]) -> Result<Vec<T>> {
        self.inner.project_upper(theta)
    }
    fn project_lower(&self, phi: &[T]) -> Result<Vec<T>> {
        self.inner.project_lower(phi)
    }
    fn initial_phi(&self) -> Vec<T> {
        self.inner.initial_phi()
    }
}

/// Which partial gradient [`batch_gradients`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientKind {
    UpperTheta,
    UpperPhi,
    LowerPhi,
}

/// Mean of per-sample gradients over `batch`.
pub fn batch_gradients<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi: &[T],
    batch: &SampleBatch,
    which: GradientKind,
) -> Result<Vec<T>> {
    let n = problem.num_samples();
    if n == 0 {
        return arg("batch gradients require a finite-sum problem");
    }
    batch.validate(n)?;
    let idx = batch.indices.iter().copied();
    Ok(match which {
        GradientKind::UpperTheta => {
            mean_over(idx, theta.len(), |i| problem.sample_upper_grad_theta(theta, phi, i))
        }
        GradientKind::UpperPhi => mean_over(idx, phi.len(), |i| problem.sample_upper_grad_phi(theta, phi, i)),
        GradientKind::LowerPhi => mean_over(idx, phi.len(), |i| problem.sample_lower_grad_phi(theta, phi, i)),
    })
}

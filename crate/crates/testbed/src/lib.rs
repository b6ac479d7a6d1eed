//! Bilevel test problems with known structure, small application kernels and a
//! finite-difference hypergradient oracle.
//!
//! Every problem implements [`TestProblem`], which adds a name, an optional
//! closed-form hypergradient and a lower-level smoothness bound to
//! [`BilevelProblem`]. Problems are addressable by name through [`registry`].

pub mod fd;
pub mod kernels;
pub mod problems;
pub mod registry;
mod util;

use blo_core::BilevelProblem;

pub use fd::{
    check_oracles, detect_kink, finite_diff_hypergrad, finite_diff_with, one_sided_differences, reduced_objective,
    FdLowerSolve, KinkReport, OracleCheck,
};
pub use problems::bip::Bip;
pub use problems::coreset::{Coreset, CoresetParams};
pub use problems::examples::{Example1, Example2, MmoToy, NsToy};
pub use problems::fastbat::FastBat;
pub use problems::irm::{consensus_project, IrmConsensus};
pub use problems::maml::MamlSinusoid;
pub use problems::quad::QuadBilevel;
pub use problems::reweight::Reweight;
pub use registry::{build, lookup, problem_names, ParamValue, ProblemInfo, ProblemSpec, REGISTRY};

pub trait TestProblem: BilevelProblem<f64> + Send + Sync {
    fn name(&self) -> &'static str;

    /// Exact `df/dθ` through the solution map, where a closed form exists.
    fn exact_hypergrad(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Upper bound on the Lipschitz constant of `∇_φ g(θ, ·)`.
    fn lower_smoothness(&self, theta: &[f64]) -> f64;

    /// Default upper starting point.
    fn theta0(&self) -> Vec<f64> {
        vec![0.0; self.dim_theta()]
    }

    /// Unconstrained, uncoupled lower level with smooth oracles, so unrolled
    /// and implicit engines apply directly.
    fn smooth(&self) -> bool {
        self.lower_set().is_unconstrained() && !self.coupled_lower()
    }

    /// Whether the value-function engine is offered for this problem.
    fn permits_vf(&self) -> bool {
        !self.coupled_lower()
    }
}

pub fn make_quad_bilevel(m: usize, n: usize, lambda: f64, seed: u64) -> QuadBilevel {
    QuadBilevel::random(m, n, lambda, 0, seed)
}

pub fn make_example1() -> Example1 {
    Example1::new()
}

pub fn make_example2() -> Example2 {
    Example2::new()
}

pub fn make_coreset(n: usize, d: usize, k: usize, corrupt_frac: f64, seed: u64) -> Coreset {
    Coreset::new(CoresetParams { n, d, k, corrupt_frac, seed, ..CoresetParams::default() })
}

pub fn make_reweight_simplex(samples: usize, seed: u64) -> Reweight {
    Reweight::random(samples, 1.0, seed)
}

pub fn make_maml_sinusoid(tasks: usize, shots: usize, k: usize, seed: u64) -> MamlSinusoid {
    MamlSinusoid::new(tasks, shots, k, seed)
}

pub fn make_fastbat_toy(d: usize, eps: f64, gamma: f64, seed: u64) -> FastBat {
    FastBat::random(50, d, eps, gamma, seed)
}

pub fn make_bip_toy(n: usize, gamma: f64, seed: u64) -> Bip {
    Bip::random(n, gamma, seed)
}

pub fn make_irm_consensus(e: usize, d: usize, seed: u64) -> IrmConsensus {
    IrmConsensus::random(e, d, seed)
}

pub fn make_ns_toy() -> NsToy {
    NsToy::new()
}

pub fn make_mmo_toy(m: usize, n: usize, mu: f64, seed: u64) -> MmoToy {
    MmoToy::random(m, n, mu, seed)
}

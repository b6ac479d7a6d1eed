//! Bilevel optimization engines: implicit differentiation, gradient unrolling
//! and value-function penalties, driven by projected outer loops.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the `*F64` aliases
//! below fix the common double-precision case.

pub mod constraint;
pub mod driver;
pub mod error;
pub mod ihvp;
pub mod implicit;
pub mod linalg;
pub mod lower;
pub mod problem;
pub mod scalar;
pub mod unroll;
pub mod valuefn;

#[cfg(test)]
pub(crate) mod fixtures;

pub use constraint::{project_simplex, ConstraintSet, FEASIBILITY_TOL};
pub use driver::{
    run, run_deterministic, run_stochastic, stationarity, Engine, LoopMode, OuterConfig, RunReport, Stochastic,
    Termination,
};
pub use error::{BloError, Result};
pub use ihvp::{ihvp, woodbury_rank_one, FnHessian, HessianOperator, IhvpBackend, IhvpDiagnostics, WoodFisherMode};
pub use implicit::{
    active_set, hypergrad_if, hypergrad_if_constrained, implicit_jacobian, HypergradEstimate, LowerHessian,
    DEFAULT_ACTIVE_TOL,
};
pub use linalg::DenseMatrix;
pub use lower::{
    lower_stationarity, solve_gd, solve_projected_gd, solve_signgd, solve_to_tolerance, LowerMethod, LowerSolution,
    LowerTrajectory, TRAJECTORY_MEMORY_CAP,
};
pub use problem::{
    batch_gradients, mean_over, mean_over_scalar, BatchView, BilevelProblem, Counted, GradientKind, OracleCounters,
    SampleBatch,
};
pub use scalar::Scalar;
pub use unroll::{
    hypergrad_bgu, hypergrad_fgu, hypergrad_signgd_free, hypergrad_tgu, hypergrad_unroll, step_jacobians,
    StepJacobians, UnrollMode, UnrollPlan, FGU_MEMORY_CAP,
};
pub use valuefn::{penalty_objective, penalty_with, solve_vf, value_fn, value_fn_from, PenaltyEval, ValueFnEval, VfConfig};

pub type ConstraintSetF64 = ConstraintSet<f64>;
pub type DenseMatrixF64 = DenseMatrix<f64>;
pub type IhvpBackendF64 = IhvpBackend<f64>;
pub type HypergradEstimateF64 = HypergradEstimate<f64>;
pub type LowerTrajectoryF64 = LowerTrajectory<f64>;
pub type LowerSolutionF64 = LowerSolution<f64>;
pub type UnrollPlanF64 = UnrollPlan<f64>;
pub type VfConfigF64 = VfConfig<f64>;
pub type OuterConfigF64 = OuterConfig<f64>;
pub type RunReportF64 = RunReport<f64>;
pub type EngineF64 = Engine<f64>;

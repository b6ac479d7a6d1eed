//! Outer loops: projected gradient descent on θ with deterministic, SGD and
//! momentum variance-reduced directions, and ε-stationarity tracking.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintSet;
use crate::error::{BloError, Result};
use crate::implicit::{hypergrad_if, hypergrad_if_constrained, ensure_finite, HypergradEstimate, DEFAULT_ACTIVE_TOL};
use crate::ihvp::IhvpBackend;
use crate::linalg::{norm_sq, sub};
use crate::lower::{solve_gd, solve_signgd, solve_to_tolerance, LowerMethod, LowerTrajectory};
use crate::problem::{BatchView, BilevelProblem, Counted, OracleCounters, SampleBatch};
use crate::scalar::Scalar;
use crate::unroll::{hypergrad_unroll, UnrollMode, UnrollPlan};
use crate::valuefn::{solve_vf, VfConfig};

/// Hypergradient engine used by the outer loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", bound = "T: Scalar")]
pub enum Engine<T> {
    If { backend: IhvpBackend<T> },
    IfConstrained {
        backend: IhvpBackend<T>,
        #[serde(default = "default_active_tol")]
        active_tol: T,
    },
    Gu {
        mode: UnrollMode,
        k: usize,
        beta: T,
        /// Start each trajectory from the previous `φ_K` instead of the problem's `φ_0`.
        #[serde(default)]
        warm_start: bool,
    },
    Vf(VfConfig<T>),
    /// Closed-form solution map supplied by the problem.
    Analytic,
}

fn default_active_tol<T: Scalar>() -> T {
    T::lit(DEFAULT_ACTIVE_TOL)
}

impl<T: Scalar> Engine<T> {
    pub fn tag(&self) -> String {
        match self {
            Self::If { backend } => format!("if-{}", backend.tag()),
            Self::IfConstrained { backend, .. } => format!("sigd-{}", backend.tag()),
            Self::Gu { mode, .. } => format!("gu-{}", mode.tag()),
            Self::Vf(_) => "vf".into(),
            Self::Analytic => "analytic".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LoopMode<T> {
    /// Solve the lower problem to `tol` every outer iteration.
    Double { tol: T, max_iters: usize, beta: T },
    /// Advance the lower problem `k_lower` steps, warm-started.
    Single { k_lower: usize, beta: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Stochastic<T> {
    Sgd { upper_batch: usize, lower_batch: usize },
    /// STORM-style recursion with momentum weight `a ∈ (0, 1]`.
    MomentumVr { a: T, upper_batch: usize, lower_batch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OuterConfig<T> {
    pub engine: Engine<T>,
    pub alpha: T,
    pub iterations: usize,
    pub loop_mode: LoopMode<T>,
    #[serde(default)]
    pub stochastic: Option<Stochastic<T>>,
    #[serde(default)]
    pub seed: u64,
    pub stationarity_tol: T,
    /// Record wall-clock times; off by default so reports are byte-stable.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl<T: Scalar> OuterConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(BloError::Config(m));
        if !(self.alpha > T::zero()) || !self.alpha.is_finite() {
            return cfg(format!("upper stepsize α must be positive, got {}", self.alpha));
        }
        if self.iterations == 0 {
            return cfg("number of outer iterations T must be at least 1".into());
        }
        if self.stationarity_tol < T::zero() {
            return cfg("stationarity tolerance must be nonnegative".into());
        }
        match self.loop_mode {
            LoopMode::Double { tol, beta, .. } => {
                if !(tol > T::zero()) || !(beta > T::zero()) {
                    return cfg("double loop needs positive tolerance and stepsize".into());
                }
            }
            LoopMode::Single { k_lower, beta } => {
                if k_lower == 0 || !(beta > T::zero()) {
                    return cfg("single loop needs K_lower >= 1 and a positive stepsize".into());
                }
            }
        }
        if let Some(Stochastic::MomentumVr { a, upper_batch, lower_batch }) = self.stochastic {
            if !(a > T::zero() && a <= T::one()) {
                return cfg(format!("momentum weight a must lie in (0, 1], got {a}"));
            }
            if upper_batch == 0 || lower_batch == 0 {
                return cfg("batch sizes must be positive".into());
            }
        }
        if let Some(Stochastic::Sgd { upper_batch, lower_batch }) = self.stochastic {
            if upper_batch == 0 || lower_batch == 0 {
                return cfg("batch sizes must be positive".into());
            }
        }
        match &self.engine {
            Engine::If { backend } | Engine::IfConstrained { backend, .. } => {
                backend.validate().map_err(|e| BloError::Config(e.to_string()))?
            }
            Engine::Gu { beta, mode, k, .. } => {
                if !(*beta > T::zero()) {
                    return cfg("unrolling stepsize β must be positive".into());
                }
                if let UnrollMode::Tgu { tau } = mode {
                    if tau > k {
                        return cfg(format!("truncation τ = {tau} exceeds K = {k}"));
                    }
                }
            }
            Engine::Vf(vf) => vf.validate().map_err(|e| BloError::Config(e.to_string()))?,
            Engine::Analytic => {}
        }
        Ok(())
    }

    /// Checks that the engine can handle the problem's structure.
    pub fn check_compatible<P: BilevelProblem<T> + ?Sized>(&self, problem: &P) -> Result<()> {
        let cfg = |m: &str| Err(BloError::Config(m.to_string()));
        let unconstrained = problem.lower_set().is_unconstrained();
        if problem.coupled_lower() && !matches!(self.engine, Engine::Analytic) {
            return cfg("lower constraints couple θ and φ; only the analytic engine applies");
        }
        match &self.engine {
            Engine::If { .. } | Engine::Gu { .. } if !unconstrained => {
                cfg("engine requires an unconstrained lower problem")
            }
            Engine::IfConstrained { .. } if unconstrained => {
                cfg("constrained implicit engine requires a constrained lower problem")
            }
            Engine::Vf(_) if self.stochastic.is_some() => cfg("the value-function engine is deterministic only"),
            Engine::Analytic if problem.analytic_solution(&vec![T::zero(); problem.dim_theta()]).is_none() => {
                cfg("problem supplies no closed-form solution map")
            }
            Engine::Analytic if self.stochastic.is_some() => cfg("the analytic engine is deterministic only"),
            _ if self.stochastic.is_some() && problem.num_samples() == 0 => {
                cfg("stochastic drivers need a finite-sum problem")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason", rename_all = "kebab-case")]
pub enum Termination {
    TolMet,
    Budget,
    Failure(String),
}

/// Outer-loop trace. Entry `t` of every trace describes iterate `θ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport<T> {
    pub engine: String,
    pub theta_trace: Vec<Vec<T>>,
    pub objective_trace: Vec<T>,
    pub stationarity_trace: Vec<T>,
    pub counter_trace: Vec<OracleCounters>,
    pub wall_time_trace: Vec<f64>,
    /// Constraint violation per round (value-function engine only).
    pub violation_trace: Vec<T>,
    pub phi_final: Vec<T>,
    pub counters: OracleCounters,
    pub seed: u64,
    pub wall_time: f64,
    pub termination: Termination,
}

impl<T: Scalar> RunReport<T> {
    pub(crate) fn empty(engine: String, seed: u64) -> Self {
        Self {
            engine,
            theta_trace: Vec::new(),
            objective_trace: Vec::new(),
            stationarity_trace: Vec::new(),
            counter_trace: Vec::new(),
            wall_time_trace: Vec::new(),
            violation_trace: Vec::new(),
            phi_final: Vec::new(),
            counters: OracleCounters::default(),
            seed,
            wall_time: 0.0,
            termination: Termination::Budget,
        }
    }

    pub fn len(&self) -> usize {
        self.theta_trace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_trace.is_empty()
    }

    pub fn theta_final(&self) -> Option<&[T]> {
        self.theta_trace.last().map(|v| v.as_slice())
    }

    pub fn objective_final(&self) -> Option<T> {
        self.objective_trace.last().copied()
    }

    pub fn stationarity_final(&self) -> Option<T> {
        self.stationarity_trace.last().copied()
    }
}

pub(crate) struct Clock {
    start: Option<Instant>,
}

impl Clock {
    pub(crate) fn new(enabled: bool) -> Self {
        Self { start: enabled.then(Instant::now) }
    }

    pub(crate) fn elapsed(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64())
    }
}

/// `‖grad‖²` when `upper_set` is unconstrained, otherwise the squared
/// gradient mapping `‖(θ - P(θ - α grad)) / α‖²`.
pub fn stationarity<T: Scalar>(theta: &[T], grad: &[T], upper_set: &ConstraintSet<T>, alpha: T) -> T {
    if upper_set.is_unconstrained() {
        return norm_sq(grad);
    }
    let raw: Vec<T> = theta.iter().zip(grad).map(|(&t, &g)| t - alpha * g).collect();
    match upper_set.project(&raw) {
        Ok(p) => norm_sq(&sub(theta, &p)) / (alpha * alpha),
        Err(_) => T::infinity(),
    }
}

/// STORM state for the lower level in single-loop stochastic runs.
#[derive(Debug, Clone, Default)]
struct LowerStorm<T> {
    a: T,
    direction: Option<Vec<T>>,
    prev: Option<(Vec<T>, Vec<T>)>,
}

fn lower_steps<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    phi: &[T],
    k: usize,
    beta: T,
    mut storm: Option<&mut LowerStorm<T>>,
) -> Result<Vec<T>> {
    let constrained = !problem.lower_set().is_unconstrained();
    let mut phi = phi.to_vec();
    for step in 1..=k {
        let g = problem.lower_grad_phi(theta, &phi);
        let dir = match storm.as_deref_mut() {
            Some(s) => {
                let d = match (&s.direction, &s.prev) {
                    (Some(d), Some((tp, pp))) => {
                        let gp = problem.lower_grad_phi(tp, pp);
                        let keep = T::one() - s.a;
                        g.iter().zip(d).zip(&gp).map(|((&gi, &di), &gpi)| gi + keep * (di - gpi)).collect()
                    }
                    _ => g,
                };
                s.prev = Some((theta.to_vec(), phi.clone()));
                s.direction = Some(d.clone());
                d
            }
            None => g,
        };
        if !crate::linalg::all_finite(&dir) {
            return Err(BloError::NumericalFailure { step, what: "non-finite lower gradient".into() });
        }
        let raw: Vec<T> = phi.iter().zip(&dir).map(|(&p, &d)| p - beta * d).collect();
        phi = if constrained { problem.project_lower(&raw)? } else { raw };
    }
    Ok(phi)
}

/// Hypergradient at `θ` from the lower starting point `phi_start`.
/// Returns the estimate and the lower iterate it was taken at.
fn estimate<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    config: &OuterConfig<T>,
    theta: &[T],
    phi_start: &[T],
    advance_lower: bool,
    storm: Option<&mut LowerStorm<T>>,
    iteration: usize,
) -> Result<(HypergradEstimate<T>, Vec<T>)> {
    let lower_phase = |storm: Option<&mut LowerStorm<T>>| -> Result<Vec<T>> {
        match config.loop_mode {
            LoopMode::Double { tol, max_iters, beta } => {
                Ok(solve_to_tolerance(problem, theta, phi_start, tol, max_iters, beta)?.phi)
            }
            LoopMode::Single { k_lower, beta } => {
                if advance_lower {
                    lower_steps(problem, theta, phi_start, k_lower, beta, storm)
                } else {
                    Ok(phi_start.to_vec())
                }
            }
        }
    };
    match &config.engine {
        Engine::If { backend } => {
            let phi = lower_phase(storm)?;
            let backend = backend.reseeded(config.seed.wrapping_add(iteration as u64));
            Ok((hypergrad_if(problem, theta, &phi, &backend)?, phi))
        }
        Engine::IfConstrained { backend, active_tol } => {
            let phi = lower_phase(storm)?;
            let backend = backend.reseeded(config.seed.wrapping_add(iteration as u64));
            Ok((hypergrad_if_constrained(problem, theta, &phi, &backend, *active_tol)?, phi))
        }
        Engine::Gu { mode, k, beta, .. } => {
            let trajectory = if *k == 0 {
                LowerTrajectory::constant(theta, phi_start, *beta, mode.lower_method())
            } else if mode.lower_method() == LowerMethod::SignGd {
                solve_signgd(problem, theta, phi_start, *k, *beta)?
            } else {
                solve_gd(problem, theta, phi_start, *k, *beta)?
            };
            let phi = trajectory.last().to_vec();
            let plan = UnrollPlan { mode: *mode, trajectory };
            Ok((hypergrad_unroll(problem, theta, &plan)?, phi))
        }
        Engine::Analytic => {
            let counted = Counted::new(problem);
            let missing = || BloError::Config("problem supplies no closed-form solution map".into());
            let phi = counted.analytic_solution(theta).ok_or_else(missing)?;
            let mut grad = counted.upper_grad_theta(theta, &phi);
            let gphi = counted.upper_grad_phi(theta, &phi);
            let through = counted.analytic_solution_vjp(theta, &gphi).ok_or_else(missing)?;
            for (g, t) in grad.iter_mut().zip(through) {
                *g = *g + t;
            }
            ensure_finite(&grad, "hypergradient")?;
            Ok((HypergradEstimate::plain(grad, "analytic", counted.counters()), phi))
        }
        Engine::Vf(_) => Err(BloError::Config("value-function runs go through solve_vf".into())),
    }
}

fn start_point<T: Scalar, P: BilevelProblem<T> + ?Sized>(problem: &P, theta0: &[T]) -> Result<Vec<T>> {
    if theta0.len() != problem.dim_theta() {
        return Err(BloError::Config(format!(
            "θ_0 has length {} but m = {}",
            theta0.len(),
            problem.dim_theta()
        )));
    }
    if problem.upper_set().is_unconstrained() {
        Ok(theta0.to_vec())
    } else {
        problem.project_upper(theta0)
    }
}

struct Recorder<'a, T, P: ?Sized> {
    counted: &'a Counted<'a, P>,
    report: RunReport<T>,
    clock: Clock,
}

impl<'a, T: Scalar, P: BilevelProblem<T> + ?Sized> Recorder<'a, T, P> {
    fn record(&mut self, theta: &[T], phi: &[T], stat: T) {
        let obj = self.counted.upper_value(theta, phi);
        self.report.theta_trace.push(theta.to_vec());
        self.report.objective_trace.push(obj);
        self.report.stationarity_trace.push(stat);
        self.report.counter_trace.push(self.counted.counters());
        self.report.wall_time_trace.push(self.clock.elapsed());
    }

    fn finish(mut self, phi: Vec<T>, termination: Termination) -> RunReport<T> {
        self.report.phi_final = phi;
        self.report.counters = self.counted.counters();
        self.report.wall_time = self.clock.elapsed();
        self.report.termination = termination;
        self.report
    }
}

/// Projected gradient descent on θ with the configured engine.
///
/// Configuration problems are returned as errors; engine failures during the
/// run end it early with [`Termination::Failure`].
pub fn run_deterministic<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    config: &OuterConfig<T>,
    theta0: &[T],
) -> Result<RunReport<T>> {
    config.validate()?;
    if config.stochastic.is_some() {
        return Err(BloError::Config("stochastic config passed to the deterministic driver".into()));
    }
    config.check_compatible(problem)?;
    let theta0 = start_point(problem, theta0)?;
    if let Engine::Vf(vf) = &config.engine {
        let phi0 = problem.initial_phi();
        let mut report = solve_vf(problem, &theta0, &phi0, vf)?;
        report.seed = config.seed;
        return Ok(report);
    }
    let counted = Counted::new(problem);
    let mut rec = Recorder {
        counted: &counted,
        report: RunReport::empty(config.engine.tag(), config.seed),
        clock: Clock::new(config.record_wall_time),
    };
    let mut theta = theta0;
    let mut phi = problem.initial_phi();
    let fresh = problem.initial_phi();
    for t in 0..=config.iterations {
        let start = match config.engine {
            Engine::Gu { warm_start: false, .. } => fresh.as_slice(),
            _ => phi.as_slice(),
        };
        let (est, phi_new) = match estimate(&counted, config, &theta, start, true, None, t) {
            Ok(x) => x,
            Err(e) => return Ok(rec.finish(phi, Termination::Failure(e.to_string()))),
        };
        phi = phi_new;
        let stat = stationarity(&theta, &est.grad, problem.upper_set(), config.alpha);
        rec.record(&theta, &phi, stat);
        if stat <= config.stationarity_tol {
            return Ok(rec.finish(phi, Termination::TolMet));
        }
        if t == config.iterations {
            break;
        }
        match step(&counted, &theta, &est.grad, config.alpha) {
            Ok(next) => theta = next,
            Err(e) => return Ok(rec.finish(phi, Termination::Failure(e.to_string()))),
        }
    }
    Ok(rec.finish(phi, Termination::Budget))
}

fn step<T: Scalar, P: BilevelProblem<T> + ?Sized>(problem: &P, theta: &[T], dir: &[T], alpha: T) -> Result<Vec<T>> {
    let raw: Vec<T> = theta.iter().zip(dir).map(|(&t, &d)| t - alpha * d).collect();
    ensure_finite(&raw, "upper iterate")?;
    if problem.upper_set().is_unconstrained() {
        Ok(raw)
    } else {
        problem.project_upper(&raw)
    }
}

/// Stochastic outer loop on a finite-sum problem: fresh seeded batches every
/// iteration, with SGD or STORM-style momentum directions.
pub fn run_stochastic<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    config: &OuterConfig<T>,
    theta0: &[T],
) -> Result<RunReport<T>> {
    config.validate()?;
    let Some(stoch) = config.stochastic else {
        return Err(BloError::Config("stochastic driver needs a stochastic config".into()));
    };
    config.check_compatible(problem)?;
    let n = problem.num_samples();
    let (ub, lb, momentum) = match stoch {
        Stochastic::Sgd { upper_batch, lower_batch } => (upper_batch, lower_batch, None),
        Stochastic::MomentumVr { a, upper_batch, lower_batch } => (upper_batch, lower_batch, Some(a)),
    };
    let counted = Counted::new(problem);
    let mut rec = Recorder {
        counted: &counted,
        report: RunReport::empty(config.engine.tag(), config.seed),
        clock: Clock::new(config.record_wall_time),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = start_point(problem, theta0)?;
    let fresh = problem.initial_phi();
    let mut phi = fresh.clone();
    let single = matches!(config.loop_mode, LoopMode::Single { .. });
    let mut storm = momentum.filter(|_| single).map(|a| LowerStorm { a, direction: None, prev: None });
    // (θ_{t-1}, lower start used at t-1, lower iterate reached at t-1, d_{t-1})
    let mut previous: Option<(Vec<T>, Vec<T>, Vec<T>, Vec<T>)> = None;
    for t in 0..=config.iterations {
        let upper = SampleBatch::draw(n, ub, &mut rng, config.seed);
        let lower = SampleBatch::draw(n, lb, &mut rng, config.seed);
        let view = BatchView::new::<T>(&counted, &upper, &lower)?;
        let start = match config.engine {
            Engine::Gu { warm_start: false, .. } => fresh.clone(),
            _ => phi.clone(),
        };
        let outcome = estimate(&view, config, &theta, &start, true, storm.as_mut(), t).and_then(|(est, phi_new)| {
            let dir = match (momentum, &previous) {
                (Some(a), Some((theta_prev, start_prev, phi_prev, d_prev))) => {
                    let back = match config.engine {
                        Engine::Gu { .. } => start_prev,
                        _ => phi_prev,
                    };
                    let (old, _) = estimate(&view, config, theta_prev, back, false, None, t)?;
                    let keep = T::one() - a;
                    est.grad
                        .iter()
                        .zip(d_prev)
                        .zip(&old.grad)
                        .map(|((&g, &d), &o)| g + keep * (d - o))
                        .collect()
                }
                _ => est.grad.clone(),
            };
            Ok((dir, phi_new))
        });
        let (dir, phi_new) = match outcome {
            Ok(x) => x,
            Err(e) => return Ok(rec.finish(phi, Termination::Failure(e.to_string()))),
        };
        phi = phi_new;
        let stat = stationarity(&theta, &dir, problem.upper_set(), config.alpha);
        rec.record(&theta, &phi, stat);
        if stat <= config.stationarity_tol {
            return Ok(rec.finish(phi, Termination::TolMet));
        }
        if t == config.iterations {
            break;
        }
        match step(&counted, &theta, &dir, config.alpha) {
            Ok(next) => {
                previous = Some((theta.clone(), start, phi.clone(), dir));
                theta = next;
            }
            Err(e) => return Ok(rec.finish(phi, Termination::Failure(e.to_string()))),
        }
    }
    Ok(rec.finish(phi, Termination::Budget))
}

/// Runs the stochastic driver when `config.stochastic` is set, the
/// deterministic one otherwise.
pub fn run<T: Scalar, P: BilevelProblem<T> + ?Sized>(
    problem: &P,
    config: &OuterConfig<T>,
    theta0: &[T],
) -> Result<RunReport<T>> {
    if config.stochastic.is_some() {
        run_stochastic(problem, config, theta0)
    } else {
        run_deterministic(problem, config, theta0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::Quad;
    use crate::linalg::max_abs_diff;

    fn config(engine: Engine<f64>, loop_mode: LoopMode<f64>) -> OuterConfig<f64> {
        OuterConfig {
            engine,
            alpha: 0.3,
            iterations: 300,
            loop_mode,
            stochastic: None,
            seed: 7,
            stationarity_tol: 1e-16,
            record_wall_time: false,
        }
    }

    fn if_cg() -> Engine<f64> {
        Engine::If { backend: IhvpBackend::cg(100, 1e-14) }
    }

    fn double() -> LoopMode<f64> {
        LoopMode::Double { tol: 1e-12, max_iters: 10_000, beta: 0.6 }
    }

    #[test]
    fn stationarity_examples() {
        let free = ConstraintSet::Unconstrained;
        assert_eq!(stationarity(&[1.0], &[0.0], &free, 0.1), 0.0);
        assert_eq!(stationarity(&[0.0, 0.0], &[3.0, 4.0], &free, 0.7), 25.0);
        let bx = ConstraintSet::uniform_box(1, -1.0, 1.0).unwrap();
        assert_eq!(stationarity(&[1.0], &[-2.0], &bx, 0.5), 0.0);
        let wide = ConstraintSet::uniform_box(2, -9.0_f64, 9.0).unwrap();
        assert!((stationarity(&[0.0, 0.0], &[3.0, 4.0], &wide, 0.1) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn double_loop_reaches_tolerance() {
        let q = Quad::small();
        let mut c = config(if_cg(), double());
        c.stationarity_tol = 1e-8;
        let r = run_deterministic(&q, &c, &[1.0, -1.0]).unwrap();
        assert_eq!(r.termination, Termination::TolMet);
        assert!(r.len() <= 200);
        assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(r.counter_trace.windows(2).all(|w| w[1].dominates(&w[0])));
        assert_eq!(r.counters, *r.counter_trace.last().unwrap());
    }

    #[test]
    fn single_and_double_loop_agree() {
        let q = Quad::small();
        let a = run_deterministic(&q, &config(if_cg(), double()), &[1.0, -1.0]).unwrap();
        let b = run_deterministic(&q, &config(if_cg(), LoopMode::Single { k_lower: 1, beta: 0.6 }), &[1.0, -1.0])
            .unwrap();
        assert!(max_abs_diff(a.theta_final().unwrap(), b.theta_final().unwrap()) < 1e-4);
    }

    #[test]
    fn gu_engine_converges_near_if() {
        let q = Quad::small();
        let gu = Engine::Gu { mode: UnrollMode::Bgu, k: 60, beta: 0.6, warm_start: false };
        let a = run_deterministic(&q, &config(if_cg(), double()), &[1.0, -1.0]).unwrap();
        let b = run_deterministic(&q, &config(gu, double()), &[1.0, -1.0]).unwrap();
        assert!(max_abs_diff(a.theta_final().unwrap(), b.theta_final().unwrap()) < 1e-6);
    }

    #[test]
    fn projected_iterates_stay_feasible() {
        let mut q = Quad::small();
        q.upper = ConstraintSet::uniform_box(2, 0.2, 0.5).unwrap();
        let r = run_deterministic(&q, &config(if_cg(), double()), &[3.0, -3.0]).unwrap();
        assert!(r.theta_trace.iter().all(|t| q.upper.contains(t, 1e-12)));
    }

    #[test]
    fn mismatched_engine_is_a_config_error() {
        let mut q = Quad::small();
        q.lower = ConstraintSet::uniform_box(3, -1.0, 1.0).unwrap();
        let err = run_deterministic(&q, &config(if_cg(), double()), &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, BloError::Config(_)));
        let q = Quad::small();
        let sigd = Engine::IfConstrained { backend: IhvpBackend::cg(10, 1e-10), active_tol: 1e-7 };
        assert!(matches!(run_deterministic(&q, &config(sigd, double()), &[0.0, 0.0]), Err(BloError::Config(_))));
        assert!(matches!(
            run_deterministic(&q, &config(Engine::Analytic, double()), &[0.0, 0.0]),
            Err(BloError::Config(_))
        ));
        let mut bad = config(if_cg(), double());
        bad.alpha = 0.0;
        assert!(matches!(run_deterministic(&q, &bad, &[0.0, 0.0]), Err(BloError::Config(_))));
        let mut bad = config(if_cg(), double());
        bad.stochastic = Some(Stochastic::Sgd { upper_batch: 2, lower_batch: 2 });
        assert!(matches!(run(&q, &bad, &[0.0, 0.0]), Err(BloError::Config(_))));
    }

    #[test]
    fn lower_failures_end_the_run() {
        let q = Quad::small();
        let c = config(if_cg(), LoopMode::Double { tol: 1e-30, max_iters: 3, beta: 0.6 });
        let r = run_deterministic(&q, &c, &[1.0, -1.0]).unwrap();
        assert!(matches!(r.termination, Termination::Failure(_)));
    }

    #[test]
    fn reruns_are_identical() {
        let q = Quad::small();
        let c = config(if_cg(), LoopMode::Single { k_lower: 2, beta: 0.6 });
        let a = run_deterministic(&q, &c, &[1.0, -1.0]).unwrap();
        let b = run_deterministic(&q, &c, &[1.0, -1.0]).unwrap();
        assert_eq!(a, b);
        assert!(a.wall_time_trace.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn config_round_trips_through_serde() {
        let c = config(Engine::Gu { mode: UnrollMode::Tgu { tau: 3 }, k: 10, beta: 0.1, warm_start: true }, double());
        let s = serde_json::to_string(&c).unwrap();
        let back: OuterConfig<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}

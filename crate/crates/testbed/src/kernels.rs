//! Evaluation harnesses for the application kernels. Each function trains on
//! one seeded instance and returns the scalar the property checks compare.

use blo_core::{run_deterministic, BilevelProblem, Engine, LoopMode, OuterConfig, Result, UnrollMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::problems::coreset::{Coreset, CoresetParams};
use crate::problems::fastbat::{Dataset, FastBat};
use crate::problems::irm::IrmConsensus;
use crate::problems::maml::{adapted_query_loss, MamlSinusoid, Task, BASIS};
use crate::util::normal_vec;
use crate::TestProblem;

pub fn outer_config(engine: Engine<f64>, alpha: f64, iterations: usize, loop_mode: LoopMode<f64>) -> OuterConfig<f64> {
    OuterConfig {
        engine,
        alpha,
        iterations,
        loop_mode,
        stochastic: None,
        seed: 0,
        stationarity_tol: 0.0,
        record_wall_time: false,
    }
}

fn analytic(alpha: f64, iterations: usize) -> OuterConfig<f64> {
    outer_config(Engine::Analytic, alpha, iterations, LoopMode::Single { k_lower: 1, beta: 1.0 })
}

fn final_theta<P: BilevelProblem<f64> + ?Sized>(problem: &P, config: &OuterConfig<f64>, theta0: &[f64]) -> Result<Vec<f64>> {
    let report = run_deterministic(problem, config, theta0)?;
    if let blo_core::Termination::Failure(why) = &report.termination {
        return Err(blo_core::BloError::Config(format!("training failed: {why}")));
    }
    Ok(report.theta_final().expect("at least one iterate").to_vec())
}

/// Clean-to-corrupted mean weight ratio after selecting a coreset.
pub fn coreset_weight_ratio(seed: u64) -> Result<f64> {
    let problem = Coreset::new(CoresetParams { seed, ..CoresetParams::default() });
    let theta = final_theta(&problem, &analytic(CORESET_ALPHA, CORESET_ITERS), &problem.uniform_theta())?;
    Ok(problem.clean_to_corrupt_ratio(&theta))
}

const CORESET_ALPHA: f64 = 1.0;
const CORESET_ITERS: usize = 300;

/// Fraction of held-out tasks on which one adaptation step from the meta-trained
/// initialization ends with lower query loss than one step from a random one.
pub fn maml_win_fraction(seed: u64) -> Result<f64> {
    let problem = MamlSinusoid::new(20, 10, 1, seed);
    let engine = Engine::Gu { mode: UnrollMode::Bgu, k: 1, beta: problem.inner_step, warm_start: false };
    let theta = final_theta(&problem, &outer_config(engine, 0.2, 300, MAML_LOOP), &[0.0; BASIS])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let random_init = normal_vec(&mut rng, BASIS, 1.0);
    let held_out: Vec<Task> = (0..50).map(|_| Task::sample(&mut rng, 10)).collect();
    let wins = held_out
        .iter()
        .filter(|t| {
            adapted_query_loss(t, &theta, 1, problem.inner_step)
                < adapted_query_loss(t, &random_init, 1, problem.inner_step)
        })
        .count();
    Ok(wins as f64 / held_out.len() as f64)
}

const MAML_LOOP: LoopMode<f64> = LoopMode::Single { k_lower: 1, beta: 0.3 };

/// Meta-trained initializations from full unrolling and from the first-order
/// variant that drops the implicit term.
pub fn maml_full_and_first_order(seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let problem = MamlSinusoid::new(20, 10, 1, seed);
    let full = Engine::Gu { mode: UnrollMode::Bgu, k: 1, beta: problem.inner_step, warm_start: false };
    let fo = Engine::Gu { mode: UnrollMode::Tgu { tau: 0 }, k: 1, beta: problem.inner_step, warm_start: false };
    let a = final_theta(&problem, &outer_config(full, 0.2, 300, MAML_LOOP), &[0.0; BASIS])?;
    let b = final_theta(&problem, &outer_config(fo, 0.2, 300, MAML_LOOP), &[0.0; BASIS])?;
    Ok((a, b))
}

/// One-step-attack accuracy on held-out data for (bilevel-trained, plainly trained) models.
pub fn fastbat_robust_accuracy(seed: u64) -> Result<(f64, f64)> {
    let (eps, gamma) = (0.5, 0.1);
    let robust = FastBat::random(100, 5, eps, gamma, seed);
    let plain = FastBat::new(robust.data.clone(), 0.0, gamma, robust.reg);
    let config = analytic(0.5, 300);
    let t_robust = final_theta(&robust, &config, &robust.theta0())?;
    let t_plain = final_theta(&plain, &config, &plain.theta0())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa57);
    let test = Dataset::sample(&mut rng, 2000, 5);
    Ok((test.attacked_accuracy(&t_robust, eps), test.attacked_accuracy(&t_plain, eps)))
}

/// `|θ_inv| / max_j |θ_spurious_j|` after training; the head is a scalar, so this
/// is also the ratio of effective feature weights.
pub fn irm_invariant_dominance(seed: u64) -> Result<f64> {
    let problem = IrmConsensus::random(5, 3, seed);
    let theta = final_theta(&problem, &analytic(0.05, 500), &problem.theta0())?;
    let spurious = theta[1..].iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(theta[0].abs() / spurious)
}

/// Median of a sample; `NaN`s sort last.
pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Greater));
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}


//! Engines × problems comparison.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use blo_core::{run, stationarity, Engine, IhvpBackend, LoopMode, OracleCounters, OuterConfig};
use blo_testbed::{build, ProblemSpec, TestProblem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parse_toml, read_toml};
use crate::report::{float, termination_tag};
use crate::{prepare_output_dir, write_file, CliError};

pub const BENCH_CSV: &str = "bench.csv";
pub const BENCH_COLUMNS: &str = "problem,engine,seed,iterations,objective,stationarity,exact_stationarity,\
upper_grads,lower_grads,hvps,jvps,wall_time,termination";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchEngine {
    pub label: String,
    pub outer: OuterConfig<f64>,
    /// Replace every lower stepsize by `1/L` and Neumann smoothness by `L`,
    /// with `L` the problem's lower smoothness at its starting point.
    #[serde(default)]
    pub auto_step: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub problems: Vec<ProblemSpec>,
    pub engines: Vec<BenchEngine>,
    /// Runs per cell; run `s` adds `s` to both seeds.
    #[serde(default = "one")]
    pub seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub problem: String,
    pub engine: String,
    pub seed: u64,
    pub iterations: usize,
    pub objective: f64,
    pub stationarity: f64,
    /// Stationarity under the closed-form hypergradient, where one exists.
    pub exact_stationarity: Option<f64>,
    pub counters: OracleCounters,
    pub wall_time: f64,
    pub termination: String,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        parse_toml(text, "bench config")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_toml(path)
    }

    pub fn override_seed(&mut self, seed: u64) {
        for p in &mut self.problems {
            p.seed = seed;
        }
        for e in &mut self.engines {
            e.outer.seed = seed;
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.problems.is_empty() || self.engines.is_empty() || self.seeds == 0 {
            return Err(CliError::Config("bench needs at least one problem, one engine and one seed".into()));
        }
        for e in &self.engines {
            e.outer.validate().map_err(|err| CliError::Config(format!("engine `{}`: {err}", e.label)))?;
        }
        for p in &self.problems {
            build(p)?;
        }
        Ok(())
    }
}

fn tuned(outer: &OuterConfig<f64>, smoothness: f64) -> OuterConfig<f64> {
    let mut o = outer.clone();
    let step = 1.0 / smoothness;
    match &mut o.loop_mode {
        LoopMode::Double { beta, .. } | LoopMode::Single { beta, .. } => *beta = step,
    }
    match &mut o.engine {
        Engine::Gu { beta, .. } => *beta = step,
        Engine::If { backend } | Engine::IfConstrained { backend, .. } => match backend {
            IhvpBackend::NeumannSum { smoothness: l, .. } | IhvpBackend::NeumannProduct { smoothness: l, .. } => {
                *l = smoothness
            }
            _ => {}
        },
        _ => {}
    }
    o
}

/// Whether the engine applies to the problem; incompatible cells are omitted.
pub fn applicable(outer: &OuterConfig<f64>, problem: &dyn TestProblem) -> bool {
    if matches!(outer.engine, Engine::Vf(_)) && !problem.permits_vf() {
        return false;
    }
    outer.check_compatible(problem).is_ok()
}

fn run_cell(spec: &ProblemSpec, engine: &BenchEngine, s: usize) -> Result<Option<BenchRow>, CliError> {
    let mut spec = spec.clone();
    spec.seed = spec.seed.wrapping_add(s as u64);
    let problem = build(&spec)?;
    let theta0 = problem.theta0();
    let mut outer = if engine.auto_step {
        tuned(&engine.outer, problem.lower_smoothness(&theta0))
    } else {
        engine.outer.clone()
    };
    outer.seed = outer.seed.wrapping_add(s as u64);
    if !applicable(&outer, problem.as_ref()) {
        return Ok(None);
    }
    let report = run(problem.as_ref(), &outer, &theta0)?;
    let theta = report.theta_final().map(<[f64]>::to_vec).unwrap_or(theta0);
    let exact = problem
        .exact_hypergrad(&theta)
        .map(|g| stationarity(&theta, &g, problem.upper_set(), outer.alpha));
    Ok(Some(BenchRow {
        problem: spec.name.clone(),
        engine: engine.label.clone(),
        seed: outer.seed,
        iterations: report.len().saturating_sub(1),
        objective: report.objective_final().unwrap_or(f64::NAN),
        stationarity: report.stationarity_final().unwrap_or(f64::NAN),
        exact_stationarity: exact,
        counters: report.counters,
        wall_time: report.wall_time,
        termination: termination_tag(&report.termination).into(),
    }))
}

/// Runs every applicable (problem, engine, seed) cell on `jobs` threads.
/// Rows come back in configuration order regardless of scheduling.
pub fn cmd_bench(cfg: &BenchConfig, out: &Path, jobs: usize) -> Result<Vec<BenchRow>, CliError> {
    cfg.validate()?;
    prepare_output_dir(out)?;
    let cells: Vec<(&ProblemSpec, &BenchEngine, usize)> = cfg
        .problems
        .iter()
        .flat_map(|p| cfg.engines.iter().flat_map(move |e| (0..cfg.seeds).map(move |s| (p, e, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<Option<BenchRow>, CliError>> =
        pool.install(|| cells.par_iter().map(|(p, e, s)| run_cell(p, e, *s)).collect());
    let mut rows = Vec::new();
    for r in results {
        if let Some(row) = r? {
            rows.push(row);
        }
    }
    write_file(&out.join(BENCH_CSV), &bench_csv(&rows))?;
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_COLUMNS);
    out.push('\n');
    for r in rows {
        let c = r.counters;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.problem,
            r.engine,
            r.seed,
            r.iterations,
            float(r.objective),
            float(r.stationarity),
            r.exact_stationarity.map(float).unwrap_or_default(),
            c.upper_grads,
            c.lower_grads,
            c.hvps,
            c.jvps,
            float(r.wall_time),
            r.termination
        );
    }
    out
}

/// Median final stationarity per (problem, engine), in row order.
pub fn summary(rows: &[BenchRow]) -> String {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.problem.as_str(), r.engine.as_str())) {
            keys.push((&r.problem, &r.engine));
        }
    }
    let mut out = format!("{:<18} {:<16} {:>5} {:>24} {:>12}\n", "problem", "engine", "runs", "median stationarity", "median grads");
    for (p, e) in keys {
        let cell: Vec<&BenchRow> = rows.iter().filter(|r| r.problem == p && r.engine == e).collect();
        let stat = blo_testbed::kernels::median(cell.iter().map(|r| r.exact_stationarity.unwrap_or(r.stationarity)).collect());
        let grads = blo_testbed::kernels::median(cell.iter().map(|r| r.counters.total_gradients() as f64).collect());
        let _ = writeln!(out, "{p:<18} {e:<16} {:>5} {:>24.6e} {grads:>12}", cell.len(), stat);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_step_rewrites_every_stepsize() {
        let outer = blo_testbed::kernels::outer_config(
            Engine::Gu { mode: blo_core::UnrollMode::Bgu, k: 5, beta: 9.0, warm_start: false },
            0.1,
            3,
            LoopMode::Double { tol: 1e-8, max_iters: 10, beta: 9.0 },
        );
        let t = tuned(&outer, 4.0);
        assert!(matches!(t.engine, Engine::Gu { beta, .. } if beta == 0.25));
        assert!(matches!(t.loop_mode, LoopMode::Double { beta, .. } if beta == 0.25));
    }
}

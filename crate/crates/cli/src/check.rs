//! Hypergradient checks: every applicable engine against central differences.

use std::fmt::Write;
use std::path::Path;

use blo_core::linalg::{norm, sub};
use blo_core::{
    hypergrad_if, hypergrad_if_constrained, hypergrad_unroll, solve_gd, solve_signgd, solve_to_tolerance, BloError,
    IhvpBackend, UnrollMode, UnrollPlan, WoodFisherMode, DEFAULT_ACTIVE_TOL,
};
use blo_testbed::{build, one_sided_differences, ProblemSpec, TestProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_toml, read_toml};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSettings {
    /// Random points drawn around the problem's starting point.
    pub points: usize,
    /// Half-width of the uniform offsets used for random points.
    pub spread: f64,
    pub h: f64,
    pub lower_tol: f64,
    /// Relative error allowed for exact engines.
    pub threshold: f64,
    /// One-sided differences further apart than this (relative) flag a kink.
    pub kink_threshold: f64,
    pub unroll_steps: usize,
    pub neumann_terms: usize,
    pub product_terms: usize,
    pub product_draws: usize,
    /// Largest standardized deviation accepted for the randomized Neumann product.
    pub product_z: f64,
    /// Explicit points; replaces random sampling when nonempty.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub theta: Vec<Vec<f64>>,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            points: 3,
            spread: 0.2,
            h: 1e-5,
            lower_tol: 1e-12,
            threshold: 1e-4,
            kink_threshold: 1e-2,
            unroll_steps: 2000,
            neumann_terms: 2000,
            product_terms: 50,
            product_draws: 2000,
            product_z: 4.0,
            theta: Vec::new(),
        }
    }
}

/// Input of `check-grad`. Experiment files parse as this too; their other
/// tables are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub check: CheckSettings,
}

impl CheckConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        parse_toml(text, "check config")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_toml(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Approximate engine; the error is reported but not gated.
    Info,
    Error(String),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub point: usize,
    pub engine: String,
    pub rel_err: Option<f64>,
    pub threshold: Option<f64>,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckOutcome {
    pub problem: String,
    pub points: Vec<Vec<f64>>,
    pub rows: Vec<CheckRow>,
    pub warnings: Vec<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        !self.rows.iter().any(|r| r.status == CheckStatus::Fail)
    }

    pub fn row(&self, point: usize, engine: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.point == point && r.engine == engine)
    }

    pub fn render(&self) -> String {
        let mut out = format!("check-grad {}\n", self.problem);
        for (i, p) in self.points.iter().enumerate() {
            let _ = writeln!(out, "point {i}: theta = {p:?}");
        }
        let _ = writeln!(out, "{:<5} {:<22} {:>12} {:>10}  status", "point", "engine", "error", "limit");
        for r in &self.rows {
            let err = r.rel_err.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "-".into());
            let lim = r.threshold.map(|e| format!("{e:.0e}")).unwrap_or_else(|| "-".into());
            let status = match &r.status {
                CheckStatus::Pass => "pass".to_string(),
                CheckStatus::Fail => "FAIL".to_string(),
                CheckStatus::Info => "info".to_string(),
                CheckStatus::Error(e) => format!("error: {e}"),
                CheckStatus::Skipped(why) => format!("skipped: {why}"),
            };
            let _ = writeln!(out, "{:<5} {:<22} {err:>12} {lim:>10}  {status}", r.point, r.engine);
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        let verdict = if self.passed() { "ok" } else { "FAILED" };
        let _ = writeln!(out, "result: {verdict}");
        out
    }
}

fn sample_points(problem: &dyn TestProblem, s: &CheckSettings, seed: u64) -> Result<Vec<Vec<f64>>, CliError> {
    let m = problem.dim_theta();
    if !s.theta.is_empty() {
        if let Some(bad) = s.theta.iter().find(|t| t.len() != m) {
            return Err(CliError::Config(format!("check point {bad:?} does not have {m} coordinates")));
        }
        return Ok(s.theta.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = problem.theta0();
    (0..s.points)
        .map(|_| {
            let raw: Vec<f64> = base.iter().map(|b| b + rng.gen_range(-s.spread..=s.spread)).collect();
            if problem.upper_set().is_unconstrained() {
                Ok(raw)
            } else {
                Ok(problem.project_upper(&raw)?)
            }
        })
        .collect()
}

fn rel_err(est: &[f64], reference: &[f64]) -> f64 {
    norm(&sub(est, reference)) / norm(reference).max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Gate {
    Exact,
    Informational,
}

enum Probe {
    If(IhvpBackend<f64>),
    Sigd,
    Unroll(UnrollMode),
    Analytic,
    ClosedForm,
}

struct Context<'a> {
    problem: &'a dyn TestProblem,
    theta: &'a [f64],
    phi: &'a [f64],
    settings: &'a CheckSettings,
    smoothness: f64,
}

impl Context<'_> {
    fn evaluate(&self, probe: &Probe) -> Result<Vec<f64>, BloError> {
        let (p, theta, s) = (self.problem, self.theta, self.settings);
        let cg = IhvpBackend::cg(10 * p.dim_phi() + 100, 1e-13);
        match probe {
            Probe::If(backend) => Ok(hypergrad_if(p, theta, self.phi, backend)?.grad),
            Probe::Sigd => Ok(hypergrad_if_constrained(p, theta, self.phi, &cg, DEFAULT_ACTIVE_TOL)?.grad),
            Probe::Unroll(mode) => {
                let phi0 = p.initial_phi();
                let trajectory = if *mode == UnrollMode::SignGdFree {
                    solve_signgd(p, theta, &phi0, s.unroll_steps, 0.1 / self.smoothness)?
                } else {
                    solve_gd(p, theta, &phi0, s.unroll_steps, 1.0 / self.smoothness)?
                };
                Ok(hypergrad_unroll(p, theta, &UnrollPlan { mode: *mode, trajectory })?.grad)
            }
            Probe::Analytic => {
                let missing = || BloError::Config("no closed-form solution map".into());
                let phi = p.analytic_solution(theta).ok_or_else(missing)?;
                let gphi = p.upper_grad_phi(theta, &phi);
                let through = p.analytic_solution_vjp(theta, &gphi).ok_or_else(missing)?;
                Ok(p.upper_grad_theta(theta, &phi).iter().zip(through).map(|(a, b)| a + b).collect())
            }
            Probe::ClosedForm => p
                .exact_hypergrad(theta)
                .ok_or_else(|| BloError::Config("no closed-form hypergradient at this point".into())),
        }
    }

    /// Mean of randomized Neumann-product estimates against the truncated
    /// Neumann sum it is unbiased for; returns the largest z-score.
    fn neumann_product_z(&self) -> Result<f64, BloError> {
        let s = self.settings;
        let k = s.product_terms.max(2);
        let reference = hypergrad_if(
            self.problem,
            self.theta,
            self.phi,
            &IhvpBackend::NeumannSum { terms: k - 1, smoothness: self.smoothness },
        )?
        .grad;
        let m = reference.len();
        let draws = s.product_draws.max(2);
        let mut sum = vec![0.0; m];
        let mut sum_sq = vec![0.0; m];
        for seed in 0..draws as u64 {
            let backend = IhvpBackend::NeumannProduct { terms: k, smoothness: self.smoothness, seed };
            let g = hypergrad_if(self.problem, self.theta, self.phi, &backend)?.grad;
            for j in 0..m {
                sum[j] += g[j];
                sum_sq[j] += g[j] * g[j];
            }
        }
        let n = draws as f64;
        let mut worst: f64 = 0.0;
        for j in 0..m {
            let mean = sum[j] / n;
            let var = ((sum_sq[j] - n * mean * mean) / (n - 1.0)).max(0.0);
            let se = (var / n).sqrt() + 1e-12 * reference[j].abs().max(1.0);
            worst = worst.max((mean - reference[j]).abs() / se);
        }
        Ok(worst)
    }
}

fn probes(problem: &dyn TestProblem, theta: &[f64], s: &CheckSettings, smoothness: f64) -> Vec<(String, Probe, Gate)> {
    use Gate::*;
    let mut out: Vec<(String, Probe, Gate)> = Vec::new();
    let coupled = problem.coupled_lower();
    if !coupled && problem.lower_set().is_unconstrained() {
        let k = s.unroll_steps;
        out.push(("if-cg".into(), Probe::If(IhvpBackend::cg(10 * problem.dim_phi() + 100, 1e-13)), Exact));
        out.push((
            "if-neumann-sum".into(),
            Probe::If(IhvpBackend::NeumannSum { terms: s.neumann_terms, smoothness }),
            Exact,
        ));
        out.push((
            "if-woodfisher".into(),
            Probe::If(IhvpBackend::WoodFisher { damping: smoothness, mode: WoodFisherMode::OneShot }),
            Informational,
        ));
        out.push(("if-hessian-free".into(), Probe::If(IhvpBackend::HessianFree { lambda: smoothness }), Informational));
        out.push(("gu-fgu".into(), Probe::Unroll(UnrollMode::Fgu), Exact));
        out.push(("gu-bgu".into(), Probe::Unroll(UnrollMode::Bgu), Exact));
        out.push((format!("gu-tgu-{}", k / 2), Probe::Unroll(UnrollMode::Tgu { tau: k / 2 }), Informational));
        out.push(("gu-signgd-free".into(), Probe::Unroll(UnrollMode::SignGdFree), Informational));
    } else if !coupled {
        out.push(("sigd-cg".into(), Probe::Sigd, Exact));
    }
    if problem.analytic_solution(theta).is_some() {
        out.push(("analytic".into(), Probe::Analytic, Exact));
    }
    if problem.exact_hypergrad(theta).is_some() {
        out.push(("closed-form".into(), Probe::ClosedForm, Exact));
    }
    out
}

fn lower_solution(problem: &dyn TestProblem, theta: &[f64], s: &CheckSettings) -> Result<Vec<f64>, BloError> {
    if problem.coupled_lower() {
        return problem
            .analytic_solution(theta)
            .ok_or_else(|| BloError::Config("coupled lower problem without a solution map".into()));
    }
    let beta = 1.0 / (1.1 * problem.lower_smoothness(theta));
    Ok(solve_to_tolerance(problem, theta, &problem.initial_phi(), s.lower_tol, 5_000_000, beta)?.phi)
}

/// Runs every applicable engine at each check point. Numerical mismatches of
/// exact engines make the outcome fail; engine errors and kinks are reported
/// without failing it.
pub fn cmd_check_grad(cfg: &CheckConfig) -> Result<CheckOutcome, CliError> {
    let s = &cfg.check;
    if !(s.h > 0.0) || !(s.lower_tol > 0.0) || !(s.threshold > 0.0) || s.unroll_steps == 0 {
        return Err(CliError::Config("check needs positive h, lower_tol, threshold and unroll_steps".into()));
    }
    let problem = build(&cfg.problem)?;
    let problem = problem.as_ref();
    let points = sample_points(problem, s, cfg.problem.seed)?;
    let mut outcome = CheckOutcome { problem: cfg.problem.name.clone(), points: points.clone(), ..Default::default() };

    for (i, theta) in points.iter().enumerate() {
        let row = |engine: &str, rel_err, threshold, status| CheckRow {
            point: i,
            engine: engine.into(),
            rel_err,
            threshold,
            status,
        };
        let (left, right) = match one_sided_differences(problem, theta, s.h, s.lower_tol) {
            Ok(x) => x,
            Err(e) => {
                outcome.rows.push(row("finite-diff", None, None, CheckStatus::Error(e.to_string())));
                continue;
            }
        };
        let fd: Vec<f64> = left.iter().zip(&right).map(|(a, b)| 0.5 * (a + b)).collect();
        let gap = left.iter().zip(&right).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > s.kink_threshold * norm(&fd).max(1.0) {
            outcome.warnings.push(format!(
                "point {i} (theta = {theta:?}): one-sided differences {left:?} and {right:?} disagree; \
                 the hypergradient is not defined there"
            ));
            outcome.rows.push(row("all", None, None, CheckStatus::Skipped("kink".into())));
            continue;
        }
        let phi = match lower_solution(problem, theta, s) {
            Ok(phi) => phi,
            Err(e) => {
                outcome.rows.push(row("lower-solve", None, None, CheckStatus::Error(e.to_string())));
                continue;
            }
        };
        let smoothness = problem.lower_smoothness(theta);
        let ctx = Context { problem, theta, phi: &phi, settings: s, smoothness };
        let mut cg_failed = None;
        for (name, probe, gate) in probes(problem, theta, s, smoothness) {
            if name.starts_with("if-neumann") {
                if let Some(why) = &cg_failed {
                    outcome.rows.push(row(&name, None, None, CheckStatus::Skipped(format!("if-cg failed: {why}"))));
                    continue;
                }
            }
            match ctx.evaluate(&probe) {
                Ok(est) => {
                    let err = rel_err(&est, &fd);
                    let (limit, status) = match gate {
                        Gate::Exact if err <= s.threshold => (Some(s.threshold), CheckStatus::Pass),
                        Gate::Exact => (Some(s.threshold), CheckStatus::Fail),
                        Gate::Informational => (None, CheckStatus::Info),
                    };
                    outcome.rows.push(row(&name, Some(err), limit, status));
                }
                Err(e) => {
                    if name == "if-cg" {
                        cg_failed = Some(e.to_string());
                    }
                    outcome.rows.push(row(&name, None, None, CheckStatus::Error(e.to_string())));
                }
            }
            if name == "if-neumann-sum" && cg_failed.is_none() {
                let status = match ctx.neumann_product_z() {
                    Ok(z) if z <= s.product_z => (Some(z), CheckStatus::Pass),
                    Ok(z) => (Some(z), CheckStatus::Fail),
                    Err(e) => (None, CheckStatus::Error(e.to_string())),
                };
                outcome.rows.push(row("if-neumann-product(z)", status.0, Some(s.product_z), status.1));
            }
        }
    }
    Ok(outcome)
}

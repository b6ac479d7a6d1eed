//! Experiment configuration files.

use std::path::{Path, PathBuf};

use blo_core::OuterConfig;
use blo_testbed::{build, ProblemSpec, TestProblem};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::check::CheckSettings;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    Csv,
    Json,
    #[default]
    Both,
}

impl Emit {
    pub fn csv(self) -> bool {
        matches!(self, Self::Csv | Self::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, Self::Json | Self::Both)
    }
}

fn one() -> usize {
    1
}

fn is_default<T: Default + PartialEq>(x: &T) -> bool {
    *x == T::default()
}

/// One experiment: a problem, an outer-loop configuration and how to report it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub outer: OuterConfig<f64>,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub emit: Emit,
    /// Starting point; the problem's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub check: CheckSettings,
}

pub(crate) fn parse_toml<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

pub(crate) fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_toml(&text, &path.display().to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        parse_toml(text, "config")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_toml(path)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// `--seed` replaces both the problem seed and the outer-loop seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.problem.seed = seed;
        self.outer.seed = seed;
    }

    /// Problem spec and outer config of repeat `i` (seeds advance by `i`).
    pub fn repeat(&self, i: usize) -> (ProblemSpec, OuterConfig<f64>) {
        let mut spec = self.problem.clone();
        spec.seed = spec.seed.wrapping_add(i as u64);
        let mut outer = self.outer.clone();
        outer.seed = outer.seed.wrapping_add(i as u64);
        (spec, outer)
    }

    /// Rejects anything that would fail before the first outer iteration.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        self.outer.validate()?;
        let problem = build(&self.problem)?;
        self.outer.check_compatible(problem.as_ref())?;
        if let Some(theta0) = &self.theta0 {
            if theta0.len() != problem.dim_theta() {
                return Err(CliError::Config(format!(
                    "theta0 has length {} but the problem has {} upper variables",
                    theta0.len(),
                    problem.dim_theta()
                )));
            }
        }
        Ok(())
    }

    pub fn start(&self, problem: &dyn TestProblem) -> Vec<f64> {
        self.theta0.clone().unwrap_or_else(|| problem.theta0())
    }
}

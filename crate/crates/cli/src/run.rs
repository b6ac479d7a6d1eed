use std::path::{Path, PathBuf};

use blo_core::{run, OuterConfig, RunReport, Termination};
use blo_testbed::{build, ProblemSpec};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::report::run_csv;
use crate::{prepare_output_dir, write_file, CliError};

pub const RUN_CSV: &str = "runs.csv";

/// Contents of one `run_{i}.json` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repeat: usize,
    pub problem: ProblemSpec,
    pub outer: OuterConfig<f64>,
    pub theta0: Vec<f64>,
    pub report: RunReport<f64>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub files: Vec<PathBuf>,
}

pub fn json_name(repeat: usize) -> String {
    format!("run_{repeat}.json")
}

/// Runs `repeats` seeded copies of the experiment and writes their reports
/// to `out`. The directory is checked before any computation.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    prepare_output_dir(out)?;
    let mut records = Vec::with_capacity(cfg.repeats);
    for i in 0..cfg.repeats {
        let (spec, outer) = cfg.repeat(i);
        let problem = build(&spec)?;
        let theta0 = cfg.start(problem.as_ref());
        let report = run(problem.as_ref(), &outer, &theta0)?;
        records.push(RunRecord { repeat: i, problem: spec, outer, theta0, report });
    }

    let mut files = Vec::new();
    if cfg.emit.json() {
        for rec in &records {
            let path = out.join(json_name(rec.repeat));
            let text = serde_json::to_string_pretty(rec)
                .map_err(|e| CliError::Runtime(format!("cannot serialize report: {e}")))?;
            write_file(&path, &(text + "\n"))?;
            files.push(path);
        }
    }
    if cfg.emit.csv() {
        let path = out.join(RUN_CSV);
        write_file(&path, &run_csv(records.iter().map(|r| (r.repeat, &r.report))))?;
        files.push(path);
    }

    let failed: Vec<String> = records
        .iter()
        .filter_map(|r| match &r.report.termination {
            Termination::Failure(why) => Some(format!("repeat {}: {why}", r.repeat)),
            _ => None,
        })
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(failed.join("; ")));
    }
    Ok(RunOutput { records, files })
}

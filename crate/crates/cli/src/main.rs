use std::path::PathBuf;
use std::process::ExitCode;

use blo_cli::{
    bench, cmd_bench, cmd_check_grad, cmd_list_problems, cmd_run, resolve_output_dir, BenchConfig, CheckConfig,
    CliError, ExperimentConfig, OUT_DIR_ENV,
};
use clap::{Parser, Subcommand};

/// Bilevel optimization experiments: run, check and compare hypergradient engines.
#[derive(Parser)]
#[command(name = "blo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List registered problems, their parameters and closed-form availability.
    ListProblems,
    /// Compare every applicable engine against finite differences.
    CheckGrad {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the problem seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment and write JSON/CSV reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the problem and outer-loop seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run engines × problems and write a comparison CSV.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn execute(command: Command) -> Result<(), CliError> {
    let env = std::env::var_os(OUT_DIR_ENV);
    match command {
        Command::ListProblems => print!("{}", cmd_list_problems()),
        Command::CheckGrad { config, seed } => {
            let mut cfg = CheckConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.problem.seed = seed;
            }
            let outcome = cmd_check_grad(&cfg)?;
            print!("{}", outcome.render());
            if !outcome.passed() {
                return Err(CliError::Check("engine and finite-difference hypergradients disagree".into()));
            }
        }
        Command::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.override_seed(seed);
            }
            let dir = resolve_output_dir(out.as_deref(), cfg.output_dir.as_deref(), env);
            let output = cmd_run(&cfg, &dir)?;
            for rec in &output.records {
                let r = &rec.report;
                println!(
                    "repeat {}: {} iterations, objective {:.6e}, stationarity {:.3e}",
                    rec.repeat,
                    r.len().saturating_sub(1),
                    r.objective_final().unwrap_or(f64::NAN),
                    r.stationarity_final().unwrap_or(f64::NAN)
                );
            }
            for f in &output.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Bench { config, out, seed, jobs } => {
            let mut cfg = BenchConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.override_seed(seed);
            }
            let dir = resolve_output_dir(out.as_deref(), cfg.output_dir.as_deref(), env);
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let rows = cmd_bench(&cfg, &dir, jobs)?;
            print!("{}", bench::summary(&rows));
            println!("wrote {}", dir.join(bench::BENCH_CSV).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("blo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

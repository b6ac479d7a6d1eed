//! CSV emission. Columns are fixed; floats use 17 significant digits.

use std::fmt::Write;

use blo_core::{RunReport, Termination};

pub const RUN_COLUMNS: &str = "repeat,iter,objective,stationarity,upper_grads,lower_grads,hvps,jvps,wall_time";

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn termination_tag(t: &Termination) -> &'static str {
    match t {
        Termination::TolMet => "tol-met",
        Termination::Budget => "budget",
        Termination::Failure(_) => "failure",
    }
}

/// Aggregate trace CSV: one row per recorded iterate of every repeat.
pub fn run_csv<'a>(reports: impl IntoIterator<Item = (usize, &'a RunReport<f64>)>) -> String {
    let mut out = String::new();
    out.push_str(RUN_COLUMNS);
    out.push('\n');
    for (repeat, r) in reports {
        for t in 0..r.len() {
            let c = r.counter_trace.get(t).copied().unwrap_or_default();
            let wall = r.wall_time_trace.get(t).copied().unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{repeat},{t},{},{},{},{},{},{},{}",
                float(r.objective_trace[t]),
                float(r.stationarity_trace[t]),
                c.upper_grads,
                c.lower_grads,
                c.hvps,
                c.jvps,
                float(wall)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_seventeen_digits() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        assert_eq!(float(0.0), "0.0000000000000000e0");
        let x = 1.0 / 3.0;
        assert_eq!(float(x).parse::<f64>().unwrap(), x);
    }
}

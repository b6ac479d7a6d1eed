use std::fmt::Write;

use blo_testbed::REGISTRY;

/// Registered problems with their parameters and whether a closed form exists.
pub fn cmd_list_problems() -> String {
    let width = REGISTRY.iter().map(|p| p.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  closed-form  summary", "problem");
    for info in REGISTRY {
        let flag = if info.closed_form { "yes" } else { "no" };
        let _ = writeln!(out, "{:<width$}  {flag:<11}  {}", info.name, info.summary);
        for p in info.params {
            let _ = writeln!(out, "{:<width$}    {} = {}  ({})", "", p.name, p.default, p.doc);
        }
    }
    let _ = writeln!(out, "{} problems", REGISTRY.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_every_problem() {
        let table = cmd_list_problems();
        assert!(table.contains("quad_bilevel"));
        assert!(table.contains("example2"));
        assert!(REGISTRY.len() >= 9);
        for info in REGISTRY {
            assert!(table.contains(info.name));
        }
        assert!(table.contains("lambda = "));
    }
}

//! Runner for the acceptance gates: one line per gate, nonzero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

#[derive(Debug)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

/// Collects gate outcomes. Positional command-line arguments act as substring
/// filters on gate names.
pub struct Suite {
    filters: Vec<String>,
    pub outcomes: Vec<Outcome>,
}

impl Suite {
    pub fn from_args() -> Self {
        let filters = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
        Suite {
            filters,
            outcomes: Vec::new(),
        }
    }

    pub fn wants(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    /// Runs `gate` unless filtered out. A gate passes when it returns `Ok`;
    /// errors, panics and overrunning `budget` all count as failures.
    pub fn run(&mut self, name: &str, budget: Duration, gate: impl FnOnce() -> anyhow::Result<String>) {
        if !self.wants(name) {
            return;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(gate));
        let elapsed = start.elapsed();
        let (mut passed, mut detail) = match result {
            Ok(Ok(d)) => (true, d),
            Ok(Err(e)) => (false, format!("{e:#}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                (false, format!("panicked: {msg}"))
            }
        };
        if passed && elapsed > budget {
            passed = false;
            detail = format!("{detail}; over the {budget:?} budget");
        }
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        self.outcomes.push(Outcome {
            name: name.to_string(),
            passed,
            detail,
            elapsed,
        });
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| !o.passed).count()
    }
}

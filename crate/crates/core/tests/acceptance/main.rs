//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line each; exits non-zero if any fails.
//!
//! Positional arguments select criteria by number (`cargo test --test
//! acceptance -- 2 8 13`); flags passed by the test runner are ignored.

mod checks;
mod desk;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

/// Detail line on success, reason on failure.
pub type Verdict = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= budget, || format!("took {:.0}s, budget {:.0}s", took.as_secs_f64(), budget.as_secs_f64()))
}

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn(&mut desk::Shared) -> Verdict,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "loss decomposition", run: |_| checks::loss_decomposition() },
    Criterion { id: 2, name: "analytic KL divergence", run: |_| checks::analytic_kld() },
    Criterion { id: 3, name: "gradient check", run: |_| checks::gradient_check() },
    Criterion { id: 4, name: "shape chains", run: |_| checks::shape_chains() },
    Criterion { id: 5, name: "orthogonal init", run: |_| checks::orthogonal_init() },
    Criterion { id: 6, name: "weight sharing", run: |_| checks::weight_sharing() },
    Criterion { id: 7, name: "determinism", run: |_| checks::determinism() },
    Criterion { id: 8, name: "optimizer oracle", run: |_| checks::optimizer_oracle() },
    Criterion { id: 9, name: "desk-scale synthetic training", run: |_| desk::synthetic_only() },
    Criterion { id: 10, name: "twin benefit", run: desk::twin_benefit },
    Criterion { id: 11, name: "watershed calibration", run: |_| checks::watershed_calibration() },
    Criterion { id: 12, name: "GP and expected improvement", run: |_| checks::gp_hyperopt() },
    Criterion { id: 13, name: "metrics oracle", run: |_| checks::metrics_oracle() },
    Criterion { id: 14, name: "translation consistency", run: desk::translation_consistency },
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = desk::Shared::default();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for c in CRITERIA {
        if !selected.is_empty() && !selected.contains(&c.id) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut shared)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        writeln!(out, "criterion {:>2} {tag} {} [{secs:.1}s]: {detail}", c.id, c.name).unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        writeln!(out, "{failed} acceptance criteria failed").unwrap();
        std::process::exit(1);
    }
}

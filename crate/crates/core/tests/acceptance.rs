//! Acceptance run: one PASS/FAIL line per property, on built-in tiny models.

use std::time::{Duration, Instant};

use circuitscope::selftest;

const BUDGET: Duration = Duration::from_secs(60);

#[test]
fn acceptance() {
    let start = Instant::now();
    let checks = selftest::run_all();
    let elapsed = start.elapsed();
    let mut failed = vec![];
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    let in_budget = elapsed < BUDGET;
    println!(
        "{} property suite runtime: {:.2}s (budget {}s)",
        if in_budget { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        BUDGET.as_secs()
    );
    if !in_budget {
        failed.push("runtime".into());
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

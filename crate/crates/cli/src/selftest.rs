use anyhow::Result;

use crate::Failure;

/// Runs every oracle suite and prints one line per suite.
pub fn run() -> Result<()> {
    let reports = trinity_nas::selftest::run_all(0);
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {} ({} checks)", r.name, r.checks);
        for f in r.failures.iter().take(5) {
            println!("    {f}");
        }
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Selftest(failed.join(", ")).into())
    }
}

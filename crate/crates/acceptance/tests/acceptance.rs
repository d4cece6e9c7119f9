//! Runs every acceptance check and prints one line per check.

use std::process::ExitCode;

fn main() -> ExitCode {
    let checks = tabletop_acceptance::run_all();
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

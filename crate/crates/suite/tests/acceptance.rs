//! One line per criterion. Exits non-zero when a gating criterion fails; the
//! stretch criterion is reported only. `BML_SEED` overrides the seed.

use bml_suite::{invocation, run, Invocation};

fn main() {
    match invocation(std::env::args()) {
        Invocation::List => println!("acceptance: test"),
        Invocation::Skip => println!("\nrunning 0 tests (filtered out)\n"),
        Invocation::Run => {
            let seed = std::env::var("BML_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
            std::process::exit(run(seed));
        }
    }
}

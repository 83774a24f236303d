//! Acceptance harness. Lives in its own package so that `cargo test
//! --workspace` runs it after every other test binary.

use bml::verify::run_all;

const NAME: &str = "acceptance";

/// What a libtest-style invocation asks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Invocation {
    List,
    Skip,
    Run,
}

/// Honours `--list` and name filters the way cargo passes them.
pub fn invocation<I: IntoIterator<Item = String>>(args: I) -> Invocation {
    let args: Vec<String> = args.into_iter().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return Invocation::List;
    }
    let exact = args.iter().any(|a| a == "--exact");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let matches = |f: &&String| if exact { f.as_str() == NAME } else { NAME.contains(f.as_str()) };
    if filters.is_empty() || filters.iter().any(matches) {
        Invocation::Run
    } else {
        Invocation::Skip
    }
}

/// Runs all criteria, prints one line each; returns the process exit code.
pub fn run(seed: u64) -> i32 {
    let reports = run_all(seed, true);
    println!();
    for r in &reports {
        println!("{}", r.line());
    }
    let failed: Vec<u8> = reports.iter().filter(|r| r.gating && !r.passed).map(|r| r.id).collect();
    println!();
    if failed.is_empty() {
        println!("acceptance: all gating criteria pass");
        0
    } else {
        println!("acceptance: gating criteria failed: {failed:?}");
        1
    }
}

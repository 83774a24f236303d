mod experiments;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use bml::config::{parse_bundle_spec, parse_config, parse_ps_spec, ExperimentConfig, ExperimentKind};
use bml::{BmlError, Result};
use clap::{Args, Parser, Subcommand};

/// Balanced metrics laboratory: stability, Bergman 1-PS functionals and balancing.
#[derive(Parser, Debug)]
#[command(name = "bml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the acceptance suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Also run the P² stretch criterion (slow).
        #[arg(long)]
        stretch: bool,
    },
    /// Fit the M₂ slope along a 1-PS against its exact prediction.
    Slope(Common),
    /// Exact non-Archimedean invariants of a filtration.
    Mna(Common),
    /// Fit M₂ and M^Don slopes against exact predictions.
    Asymptote(Common),
    /// Run T-iteration and LM, report existence of a balanced metric.
    Balance(Common),
    /// Subgeodesic and commutation residuals over random draws.
    Subgeodesic(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: config `out`, else ./bml-out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// e.g. split_p1:0,2 or euler_tp2
    #[arg(long)]
    bundle: Option<String>,
    /// Working level k.
    #[arg(long, allow_negative_numbers = true)]
    k: Option<i64>,
    /// e.g. two_step:O(2):2/3,-1, diag:1,0,-1, trivial, matrix:zeta.txt
    #[arg(long, allow_hyphen_values = true)]
    ps: Option<String>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    n_path: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    fd_step: Option<f64>,
    #[arg(long)]
    draws: Option<usize>,
}

fn build_config(kind: ExperimentKind, c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(path) => {
            let data = std::fs::read(path).map_err(|e| BmlError::config("config", format!("{}: {e}", path.display())))?;
            parse_config(&data)?
        }
        None => ExperimentConfig::new(kind),
    };
    cfg.experiment = kind;
    if let Some(b) = &c.bundle {
        cfg.bundle = parse_bundle_spec(b)?;
        // a grid for the old space no longer applies
        if cfg.grid.is_some_and(|g| g.space() != cfg.bundle.space()) {
            cfg.grid = None;
        }
    }
    if let Some(k) = c.k {
        cfg.level = Some(k);
    }
    if let Some(p) = &c.ps {
        cfg.ps = Some(parse_ps_spec(p)?);
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = c.$f { cfg.$f = v; })* };
    }
    set!(seed, t_end, samples, n_path, tol, max_iter, fd_step, draws);
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bml-out"));
    cfg.out = Some(out.to_string_lossy().into_owned());
    cfg.validate()?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<bool> {
    let (kind, common, stretch) = match &cli.command {
        Command::Verify { common, stretch } => (ExperimentKind::Verify, common, *stretch),
        Command::Slope(c) => (ExperimentKind::Slope, c, false),
        Command::Mna(c) => (ExperimentKind::Mna, c, false),
        Command::Asymptote(c) => (ExperimentKind::Asymptote, c, false),
        Command::Balance(c) => (ExperimentKind::Balance, c, false),
        Command::Subgeodesic(c) => (ExperimentKind::Subgeodesic, c, false),
    };
    let (cfg, out) = build_config(kind, common)?;
    let rep = experiments::run(&cfg, stretch).map_err(|e| match e {
        e @ (BmlError::ConfigError { .. } | BmlError::IOError(_)) => e,
        e => BmlError::ExperimentFailed(format!("{}: {e}", kind.name())),
    })?;
    report::emit(&rep, &cfg, &out)?;
    for line in &rep.text {
        println!("{line}");
    }
    println!("artifacts written to {}", out.display());
    Ok(rep.passed)
}

fn main() -> ExitCode {
    // usage errors exit 1; 2 is reserved for failed assertions
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("assertion failure: see summary above");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

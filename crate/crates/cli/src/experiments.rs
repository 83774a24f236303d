use bml::balance::{self, BalanceOptions, BalanceRun, Outcome};
use bml::bergman::{commutator_residual, subgeodesic_residual};
use bml::bundle::{BundleKind, SectionBasis, C};
use bml::config::{bundle_to_spec, ps_to_spec, resolve_ps, ExperimentConfig, ExperimentKind, ResolvedPs};
use bml::exact::Rat;
use bml::functionals::{asymptotic_slope_fit, coercivity_constant, default_t_min, FunctionalContext, FunctionalSample, SlopeFit};
use bml::stability::{
    j_na, m2_slope_prediction, m_na, rat_to_f64, slope_stability_verdict, weight_sum_identity, FiltrationSpec, SheafData,
    Verdict,
};
use bml::verify::{random_generator, run_all};
use bml::{BmlError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::report::{num, Report, Table};

const SLOPE_HEADER: &[&str] = &["t", "M1", "M2", "MDon", "pred_num", "pred_den"];
const BALANCE_HEADER: &[&str] = &["iter", "residual", "m2", "spread", "wallclock_ms"];

/// Gieseker slope tolerance (relative) and Donaldson slope tolerance.
const M2_SLOPE_TOL: f64 = 0.01;
const MDON_SLOPE_TOL: f64 = 0.02;

pub fn run(cfg: &ExperimentConfig, stretch: bool) -> Result<Report> {
    match cfg.experiment {
        ExperimentKind::Verify => verify(cfg, stretch),
        ExperimentKind::Slope => slope(cfg, false),
        ExperimentKind::Asymptote => slope(cfg, true),
        ExperimentKind::Mna => mna(cfg),
        ExperimentKind::Balance => balance_exp(cfg),
        ExperimentKind::Subgeodesic => subgeodesic(cfg),
    }
}

fn context(cfg: &ExperimentConfig) -> Result<FunctionalContext> {
    let basis = SectionBasis::new(&cfg.bundle, cfg.level()?, true)?;
    FunctionalContext::new(basis, cfg.grid().build()?)
}

fn resolved(cfg: &ExperimentConfig, basis: &SectionBasis) -> Result<ResolvedPs> {
    let spec = cfg
        .ps
        .as_ref()
        .ok_or_else(|| BmlError::config("ps", format!("required for `{}`", cfg.experiment.name())))?;
    resolve_ps(spec, basis, cfg.seed)
}

fn header(cfg: &ExperimentConfig) -> Result<serde_json::Map<String, Value>> {
    let mut m = serde_json::Map::new();
    m.insert("experiment".into(), json!(cfg.experiment.name()));
    m.insert("bundle".into(), json!(bundle_to_spec(&cfg.bundle)));
    m.insert("level".into(), json!(cfg.level()?));
    m.insert("seed".into(), json!(cfg.seed));
    if let Some(p) = &cfg.ps {
        m.insert("ps".into(), json!(ps_to_spec(p)));
    }
    Ok(m)
}

fn uniform_times(t_end: f64, samples: usize) -> Vec<f64> {
    (0..samples).map(|i| t_end * i as f64 / (samples - 1) as f64).collect()
}

fn rat_parts(r: &Option<Rat>) -> [String; 2] {
    match r {
        Some(r) => [r.numer().to_string(), r.denom().to_string()],
        None => [String::new(), String::new()],
    }
}

fn fit_json(fit: &SlopeFit) -> Value {
    json!({
        "slope": fit.slope,
        "intercept": fit.intercept,
        "t_min": fit.t_min,
        "rms_residual": fit.residual,
        "predicted": fit.predicted,
        "relative_error": fit.relative_error,
    })
}

fn fit_line(name: &str, fit: &SlopeFit) -> String {
    match (&fit.predicted, fit.relative_error) {
        (Some(p), Some(e)) => format!("{name}: fitted slope {:.6}, predicted {p}, rel err {e:.2e}", fit.slope),
        _ => format!("{name}: fitted slope {:.6} (no exact prediction)", fit.slope),
    }
}

fn within(fit: &SlopeFit, tol: f64) -> bool {
    fit.relative_error.is_none_or(|e| e <= tol)
}

/// Fitted M₂ slope (and for `asymptote` also M^Don) against the exact predictions.
fn slope(cfg: &ExperimentConfig, donaldson: bool) -> Result<Report> {
    let cx = context(cfg)?;
    let ps = resolved(cfg, &cx.basis)?;
    let grading = ps.filtration.as_ref().map(|f| (f, f.grading()));
    let pred_m2 = grading.as_ref().map(|(f, g)| m2_slope_prediction(f, g));
    let pred_mna = ps.filtration.as_ref().map(m_na).transpose()?;

    let times = uniform_times(cfg.t_end, cfg.samples);
    let series = cx.series(&ps.zeta, &times, cfg.n_path)?;
    let t_min = default_t_min(cfg.t_end);
    let pts = |f: fn(&FunctionalSample) -> f64| series.iter().map(|s| (s.t, f(s))).collect::<Vec<_>>();
    let fit_m2 = asymptotic_slope_fit(&pts(|s| s.m2), t_min, pred_m2.as_ref())?;
    let m2_values: Vec<f64> = series.iter().map(|s| s.m2).collect();
    let convexity = balance::convexity_monitor(&m2_values)?;

    let csv_pred = if donaldson { &pred_mna } else { &pred_m2 };
    let [pn, pd] = rat_parts(csv_pred);
    let mut table = Table::new(format!("{}.csv", cfg.experiment.name()), SLOPE_HEADER);
    for s in &series {
        table.push(vec![num(s.t), num(s.m1), num(s.m2), num(s.mdon), pn.clone(), pd.clone()]);
    }

    let mut summary = header(cfg)?;
    summary.insert("weight_scale".into(), json!(ps.scale.to_string()));
    summary.insert("predicted_m2_slope".into(), json!(pred_m2.as_ref().map(Rat::to_string)));
    summary.insert("fit_m2".into(), fit_json(&fit_m2));
    summary.insert("min_second_difference_m2".into(), json!(convexity.min_second_difference));
    let mut text = vec![
        format!("{} on {} at k = {}", cfg.experiment.name(), cx.basis.bundle.label(), cx.basis.level),
        fit_line("M2", &fit_m2),
        format!("M2 convexity: min second difference {:.3e}", convexity.min_second_difference),
    ];
    let mut passed = within(&fit_m2, M2_SLOPE_TOL) && convexity.convex;

    if donaldson {
        let fit_don = asymptotic_slope_fit(&pts(|s| s.mdon), t_min, pred_mna.as_ref())?;
        summary.insert("m_na".into(), json!(pred_mna.as_ref().map(Rat::to_string)));
        summary.insert("fit_mdon".into(), fit_json(&fit_don));
        if let Some(m) = &pred_mna {
            let c = coercivity_constant(&series, rat_to_f64(m));
            summary.insert("coercivity_constant".into(), json!(c));
            text.push(format!("M^Don >= M^NA t - c with c = {c:.6} on the samples"));
        }
        text.push(fit_line("M^Don", &fit_don));
        passed &= within(&fit_don, MDON_SLOPE_TOL);
    }
    summary.insert("passed".into(), json!(passed));
    Ok(Report { summary: Value::Object(summary), tables: vec![table], text, passed })
}

/// Exact invariants only; no quadrature.
fn mna(cfg: &ExperimentConfig) -> Result<Report> {
    let basis = SectionBasis::new(&cfg.bundle, cfg.level()?, true)?;
    let ps = resolved(cfg, &basis)?;
    let f: FiltrationSpec = ps
        .filtration
        .ok_or_else(|| BmlError::ExperimentFailed("1-PS has no rational filtration".into()))?;
    let g = f.grading();
    let value = m_na(&f)?;
    let (lhs, rhs) = weight_sum_identity(&f, &g);
    let identity = lhs.clone() * Rat::from_integer(2.into()) == rhs;
    let jna = j_na(&g, &f.weights);
    let pred_m2 = m2_slope_prediction(&f, &g);

    let mut table = Table::new("mna.csv", &["step", "weight", "rank", "degree", "v_dim"]);
    for (i, s) in f.steps.iter().enumerate() {
        table.push(vec![
            i.to_string(),
            f.weights[i].to_string(),
            s.rank.to_string(),
            s.degree.as_ref().map(Rat::to_string).unwrap_or_default(),
            f.v_dims[i].to_string(),
        ]);
    }
    let mut summary = header(cfg)?;
    let strs = |v: &[Rat]| v.iter().map(Rat::to_string).collect::<Vec<_>>();
    summary.insert("weights".into(), json!(strs(&f.weights)));
    summary.insert("j".into(), json!(g.j.to_string()));
    summary.insert("integer_weights".into(), json!(g.integer_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>()));
    summary.insert("m_na".into(), json!(value.to_string()));
    summary.insert("j_na".into(), json!(jna.to_string()));
    summary.insert("predicted_m2_slope".into(), json!(pred_m2.to_string()));
    summary.insert("weight_sum_identity".into(), json!({ "lhs": lhs.to_string(), "rhs": rhs.to_string(), "holds": identity }));
    summary.insert("passed".into(), json!(identity));
    let text = vec![
        format!("filtration of {} at k = {} with weights {}", f.ambient().label, f.level, strs(&f.weights).join(", ")),
        format!("M^NA = {value}, J^NA = {jna}, predicted M2 slope = {pred_m2}"),
        format!("weight sum identity: 2*{lhs} = {rhs} ({})", if identity { "holds" } else { "VIOLATED" }),
    ];
    Ok(Report { summary: Value::Object(summary), tables: vec![table], text, passed: identity })
}

/// Exact slope-stability verdict against the catalog candidates.
fn exact_verdict(bundle: &BundleKind) -> Result<Verdict> {
    let ambient = bundle.sheaf();
    let candidates: Vec<SheafData> = match bundle {
        BundleKind::SplitP1 { degrees } if degrees.len() == 1 => return Ok(Verdict::Stable),
        BundleKind::SplitP1 { degrees } => degrees.iter().map(|&d| SheafData::line_p1(d)).collect(),
        BundleKind::EulerTp2 => vec![SheafData::line_p2(1), SheafData::line_p2(0)],
    };
    Ok(slope_stability_verdict(&ambient, &candidates)?.verdict)
}

fn run_json(r: &BalanceRun) -> Value {
    json!({
        "outcome": r.outcome,
        "iterations": r.history.len() - 1,
        "residual": r.state.residual,
        "m2": r.state.m2,
        "spread": r.state.spread,
        "monotone_start": r.monotone_start,
    })
}

fn balance_exp(cfg: &ExperimentConfig) -> Result<Report> {
    let cx = context(cfg)?;
    let opts = BalanceOptions { tol: cfg.tol, max_iter: cfg.max_iter };
    let h0 = balance::random_start(cx.basis.n(), cfg.seed, 0.5);
    let ti = balance::t_iterate(&cx, &h0, opts)?;
    let lm = balance::lm_minimize(&cx, &h0, opts)?;
    let exact = exact_verdict(&cfg.bundle)?;

    let both = |o: fn(&Outcome) -> bool| o(&ti.outcome) && o(&lm.outcome);
    let converged = both(|o| *o == Outcome::Converged);
    let diverged = both(|o| matches!(o, Outcome::Diverged { .. }));
    let gap = (ti.state.m2 - lm.state.m2).abs();
    let verdict = if converged {
        match exact {
            Verdict::Stable => "converged (stable)",
            _ => "converged (polystable)",
        }
    } else if diverged {
        "diverged (unstable)"
    } else {
        "inconclusive"
    };
    let consistent = match exact {
        Verdict::Unstable => diverged,
        _ => converged && gap < 1e-6,
    };

    let mut tables = Vec::new();
    for (run, file) in [(&ti, "balance_t.csv"), (&lm, "balance_lm.csv")] {
        let mut t = Table::new(file, BALANCE_HEADER);
        for r in &run.history {
            t.push(vec![r.iter.to_string(), num(r.residual), num(r.m2), num(r.spread), format!("{:.3}", r.wallclock_ms)]);
        }
        tables.push(t);
    }

    let mut summary = header(cfg)?;
    summary.insert("exact_verdict".into(), json!(format!("{exact:?}").to_lowercase()));
    summary.insert("verdict".into(), json!(verdict));
    summary.insert("t_iteration".into(), run_json(&ti));
    summary.insert("lm".into(), run_json(&lm));
    summary.insert("m2_gap".into(), json!(gap));
    let mut text = vec![
        format!("balance on {} at k = {} (exact slope verdict: {exact:?})", cx.basis.bundle.label(), cx.basis.level),
        format!("T-iteration: {:?} after {} iterations, residual {:.3e}", ti.outcome, ti.history.len() - 1, ti.state.residual),
        format!("LM: {:?} after {} iterations, residual {:.3e}", lm.outcome, lm.history.len() - 1, lm.state.residual),
    ];
    if converged {
        text.push(format!("M2 at the minima: T {:.12}, LM {:.12}, gap {gap:.2e}", ti.state.m2, lm.state.m2));
        if cx.basis.rank() == 1 {
            let d = balance::delta_diagnostic(&cx, &ti.state.h)?;
            summary.insert(
                "delta_diagnostic".into(),
                json!({
                    "delta": d.delta, "l2_sq": d.l2_sq, "c_constant": d.c_constant,
                    "lower_bound": d.lower_bound, "donaldson_value": d.donaldson_value, "margin": d.margin,
                }),
            );
            text.push(format!("delta diagnostic: M^Don {:.6e} >= bound {:.6e} (margin {:.3e})", d.donaldson_value, d.lower_bound, d.margin));
        }
    }
    text.push(format!("verdict: {verdict}"));
    summary.insert("passed".into(), json!(consistent));
    Ok(Report { summary: Value::Object(summary), tables, text, passed: consistent })
}

fn subgeodesic(cfg: &ExperimentConfig) -> Result<Report> {
    let basis = SectionBasis::new(&cfg.bundle, cfg.level()?, true)?;
    let fixed = cfg.ps.as_ref().map(|_| resolved(cfg, &basis)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table = Table::new(
        "subgeodesic.csv",
        &["draw", "t", "residual", "conjugated_residual", "fd_error", "richardson_ratio", "min_eig", "commutator"],
    );
    let (mut worst_conj, mut worst_fd, mut worst_raw, mut worst_comm, mut min_eig) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, f64::INFINITY);
    let mut failures = 0usize;
    for draw in 0..cfg.draws {
        let z = match &fixed {
            Some(p) => p.zeta.clone(),
            None => random_generator(basis.n(), &mut rng)?,
        };
        let mut coord = || C::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let x = match basis.space().dim() {
            1 => [coord(), C::new(0.0, 0.0)],
            _ => [coord(), coord()],
        };
        let t = rng.random_range(0.0..cfg.t_end.min(2.0));
        let q = basis.q_unchecked(&x);
        let comm = commutator_residual(&q, &z.exp(t), &(&z.zeta * C::new(2.0, 0.0)));
        worst_comm = worst_comm.max(comm);
        match subgeodesic_residual(&q, &z, t, cfg.fd_step) {
            Ok(r) => {
                let scale = 1.0 + r.rhs.norm();
                worst_conj = worst_conj.max(r.conjugated_residual / scale);
                worst_fd = worst_fd.max(r.fd_error / scale);
                worst_raw = worst_raw.max(r.residual / scale);
                min_eig = min_eig.min(r.min_eig_rhs);
                if r.conjugated_residual > 1e-9 * scale || r.fd_error > 1e-5 * scale || r.min_eig_rhs < -1e-12 {
                    failures += 1;
                }
                table.push(vec![
                    draw.to_string(),
                    num(t),
                    num(r.residual),
                    num(r.conjugated_residual),
                    num(r.fd_error),
                    num(r.richardson_ratio),
                    num(r.min_eig_rhs),
                    num(comm),
                ]);
            }
            Err(BmlError::StepTooLarge(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    let passed = failures == 0;
    let mut summary = header(cfg)?;
    summary.insert("draws".into(), json!(cfg.draws));
    summary.insert("fd_step".into(), json!(cfg.fd_step));
    summary.insert("failures".into(), json!(failures));
    summary.insert("max_rel_conjugated_residual".into(), json!(worst_conj));
    summary.insert("max_rel_fd_error".into(), json!(worst_fd));
    summary.insert("max_rel_raw_residual".into(), json!(worst_raw));
    summary.insert("max_commutator".into(), json!(worst_comm));
    summary.insert("min_eig_ff".into(), json!(min_eig));
    summary.insert("passed".into(), json!(passed));
    let text = vec![
        format!("subgeodesic on {} at k = {}, {} draws", basis.bundle.label(), basis.level, cfg.draws),
        format!("max rel residual: conjugated {worst_conj:.2e}, FD {worst_fd:.2e}, raw {worst_raw:.2e}"),
        format!("min eigenvalue of F*F {min_eig:.3e}; max commutator residual {worst_comm:.2e}"),
        format!("{failures} draws failed (conjugated <= 1e-9, FD <= 1e-5, min eig >= -1e-12)"),
    ];
    Ok(Report { summary: Value::Object(summary), tables: vec![table], text, passed })
}

fn verify(cfg: &ExperimentConfig, stretch: bool) -> Result<Report> {
    let reports = run_all(cfg.seed, stretch);
    let passed = reports.iter().all(|r| r.passed || !r.gating);
    let mut table = Table::new("verify.csv", &["id", "name", "passed", "gating", "measured", "tolerance"]);
    for r in &reports {
        table.push(vec![r.id.to_string(), r.name.into(), r.passed.to_string(), r.gating.to_string(), r.measured.clone(), r.tolerance.clone()]);
    }
    let mut summary = header(cfg)?;
    summary.insert("criteria".into(), serde_json::to_value(&reports).expect("plain data"));
    summary.insert("passed".into(), json!(passed));
    let text = reports.iter().map(|r| r.line()).collect();
    Ok(Report { summary: Value::Object(summary), tables: vec![table], text, passed })
}

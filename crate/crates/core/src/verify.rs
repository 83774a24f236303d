//! The acceptance suite: one check per criterion, each returning a report
//! with the measured quantity, the tolerance and the runtime.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::balance::{self, BalanceOptions, Outcome};
use crate::bergman::{commutator_residual, hermitian_fn, subgeodesic_residual, OnePS};
use crate::bundle::{BundleKind, CMat, SectionBasis, C};
use crate::config::{parse_ps_spec, resolve_ps};
use crate::error::{BmlError, Result};
use crate::exact::Rat;
use crate::functionals::{asymptotic_slope_fit, default_t_min, FunctionalContext};
use crate::geometry::GridSpec;
use crate::stability::{
    k0_level, m_na, mu, rat, slope_stability_verdict, weight_sum_identity, FiltrationSpec, SheafData, Space, Verdict,
};

#[derive(Debug, Clone, Serialize)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    /// Stretch criteria are reported but never gate.
    pub gating: bool,
    pub measured: String,
    pub tolerance: String,
    #[serde(skip)]
    pub runtime_s: f64,
    pub budget_s: Option<f64>,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        let status = match (self.passed, self.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (stretch)",
        };
        format!(
            "criterion {:>2} {:<28} {:<14} measured: {}; required: {}; runtime {:.2}s{}",
            self.id,
            self.name,
            status,
            self.measured,
            self.tolerance,
            self.runtime_s,
            self.budget_s.map(|b| format!(" (budget {b}s)")).unwrap_or_default()
        )
    }
}

struct Timer {
    start: Instant,
}

impl Timer {
    fn new() -> Self {
        Timer { start: Instant::now() }
    }

    #[allow(clippy::too_many_arguments)]
    fn report(self, id: u8, name: &'static str, ok: bool, measured: String, tolerance: &str, budget: Option<f64>) -> CriterionReport {
        let runtime_s = self.start.elapsed().as_secs_f64();
        let in_budget = budget.is_none_or(|b| runtime_s < b);
        CriterionReport {
            id,
            name,
            passed: ok && in_budget,
            gating: id != 10,
            measured,
            tolerance: tolerance.to_string(),
            runtime_s,
            budget_s: budget,
        }
    }
}

fn context(bundle: &BundleKind, k: i64) -> Result<FunctionalContext> {
    let basis = SectionBasis::new(bundle, k, true)?;
    let grid = GridSpec::default_for(bundle.space()).build()?;
    FunctionalContext::new(basis, grid)
}

fn split(d: &[i64]) -> BundleKind {
    BundleKind::SplitP1 { degrees: d.to_vec() }
}

fn uniform_times(t_end: f64, samples: usize) -> Vec<f64> {
    (0..samples).map(|i| t_end * i as f64 / (samples - 1) as f64).collect()
}

/// A valid random FiltrationSpec: ranks ≤ 4, ν ≤ 4, numerators |w̄| ≤ 20.
pub fn random_filtration(rng: &mut impl Rng) -> FiltrationSpec {
    loop {
        let nu = rng.random_range(1..=4usize);
        let r = rng.random_range(1..=4u32);
        let mut ranks: Vec<u32> = (0..nu - 1).map(|_| rng.random_range(1..=r)).collect();
        ranks.sort();
        ranks.push(r);
        let dv: Vec<u64> = (0..nu).map(|_| rng.random_range(1..=6u64)).collect();
        let v_dims: Vec<u64> = dv.iter().scan(0, |acc, d| {
            *acc += d;
            Some(*acc)
        }).collect();
        let level = rng.random_range(0..=5i64);
        let weights = if nu == 1 {
            vec![rat(0)]
        } else {
            let j = rng.random_range(1..=6i64);
            let mut nums: Vec<i64> = Vec::new();
            while nums.len() < nu - 1 {
                let a = rng.random_range(-20..=20i64);
                if !nums.contains(&a) {
                    nums.push(a);
                }
            }
            nums.sort_by(|a, b| b.cmp(a));
            let mut ws: Vec<Rat> = nums.iter().map(|&a| crate::stability::ratio(a, j)).collect();
            let partial: Rat = ws.iter().zip(&dv).map(|(w, &d)| w * rat(d as i64)).sum();
            let last = -partial / rat(dv[nu - 1] as i64);
            if last >= ws[nu - 2] || last.numer().magnitude() > &20u32.into() {
                continue;
            }
            ws.push(last);
            ws
        };
        let steps = (0..nu)
            .map(|i| {
                let deg = crate::stability::ratio(rng.random_range(-10..=10), rng.random_range(1..=3));
                SheafData::from_table(ranks[i], Some(deg), BTreeMap::from([(level, v_dims[i])]), Space::P1)
            })
            .collect();
        if let Ok(f) = FiltrationSpec::new(weights, steps, v_dims, level) {
            return f;
        }
    }
}

/// Criterion 1: exact identities.
pub fn criterion_1(seed: u64) -> Result<CriterionReport> {
    let timer = Timer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad_identity = 0;
    for _ in 0..1000 {
        let f = random_filtration(&mut rng);
        let (lhs, rhs) = weight_sum_identity(&f, &f.grading());
        if lhs * rat(2) != rhs {
            bad_identity += 1;
        }
    }
    let mut bad_two_step = 0;
    let mut cases = 0;
    for degrees in [vec![0, 2], vec![0, 1], vec![-1, 3], vec![1, 1, 4], vec![0, 0, 2], vec![2, 5]] {
        let ambient = SheafData::split_p1(&degrees);
        let k0 = k0_level(&ambient)?;
        for &d in &degrees {
            let sub = SheafData::line_p1(d);
            for k in k0..k0 + 4 {
                let v1 = sub.h0_at(k).unwrap_or(0) as i64;
                let v2 = ambient.h0_at(k).unwrap_or(0) as i64;
                if v1 == 0 || v1 == v2 {
                    continue;
                }
                let m = (v2 - v1).max(v1);
                let (w1, w2) = (crate::stability::ratio(v2 - v1, m), crate::stability::ratio(-v1, m));
                let f = FiltrationSpec::two_step(sub.clone(), ambient.clone(), (w1.clone(), w2.clone()), k)?;
                let closed = rat(2) * (w1 - w2) * rat(1) * (mu(&ambient)? - mu(&sub)?);
                cases += 1;
                if m_na(&f)? != closed {
                    bad_two_step += 1;
                }
            }
        }
    }
    let ok = bad_identity == 0 && bad_two_step == 0;
    Ok(timer.report(
        1,
        "exact identity suite",
        ok,
        format!("{bad_identity}/1000 identity mismatches, {bad_two_step}/{cases} two-step mismatches"),
        "0 mismatches",
        Some(5.0),
    ))
}

fn quoted_m2(t: f64) -> f64 {
    4.0 * t / (1.0 - (-4.0 * t).exp()) - 2.0 * t
}

/// Criterion 2: M₂ along diag(1,−1) on O, k = 1 against the quoted closed form.
pub fn criterion_2() -> Result<CriterionReport> {
    let timer = Timer::new();
    let cx = context(&split(&[0]), 1)?;
    let z = OnePS::diagonal(&[1.0, -1.0])?;
    let mut max_err: f64 = 0.0;
    for t in [0.5, 1.0, 2.0, 5.0, 10.0] {
        max_err = max_err.max((cx.m2_don(&z.exp(2.0 * t))? - quoted_m2(t)).abs());
    }
    let times = uniform_times(15.0, 31);
    let pts: Vec<(f64, f64)> = times.iter().map(|&t| Ok((t, cx.m2_don(&z.exp(2.0 * t))?))).collect::<Result<_>>()?;
    let fit = asymptotic_slope_fit(&pts, default_t_min(15.0), Some(&rat(2)))?;
    let ok = max_err <= 1e-6 && (fit.slope - 2.0).abs() <= 1e-4;
    Ok(timer.report(
        2,
        "closed-form M2",
        ok,
        format!("max |M2 - closed form| = {max_err:.3e}, slope = {:.8}", fit.slope),
        "|err| <= 1e-6, |slope - 2| <= 1e-4",
        Some(10.0),
    ))
}

fn two_step_context() -> Result<(FunctionalContext, OnePS, FiltrationSpec)> {
    let cx = context(&split(&[0, 2]), 3)?;
    let r = resolve_ps(&parse_ps_spec("two_step:O(2):2/3,-1")?, &cx.basis, 0)?;
    Ok((cx, r.zeta, r.filtration.expect("two-step filtrations are exact")))
}

/// Criterion 3: M₂ slope −2/3 on O⊕O(2).
pub fn criterion_3() -> Result<CriterionReport> {
    let timer = Timer::new();
    let (cx, z, f) = two_step_context()?;
    let pred = crate::stability::m2_slope_prediction(&f, &f.grading());
    let times = uniform_times(15.0, 31);
    let pts: Vec<(f64, f64)> = times.iter().map(|&t| Ok((t, cx.m2_don(&z.exp(2.0 * t))?))).collect::<Result<_>>()?;
    let fit = asymptotic_slope_fit(&pts, default_t_min(15.0), Some(&pred))?;
    let rel = fit.relative_error.unwrap_or(f64::INFINITY);
    Ok(timer.report(
        3,
        "Gieseker slope theorem",
        rel <= 0.01,
        format!("slope {:.6} vs {pred}, rel err {rel:.2e}", fit.slope),
        "rel err <= 1%",
        Some(30.0),
    ))
}

/// Criterion 4: M^Don slope = M^NA on O⊕O(2), and zero-slope boundedness on O.
pub fn criterion_4() -> Result<CriterionReport> {
    let timer = Timer::new();
    let (cx, z, f) = two_step_context()?;
    let mna = m_na(&f)?;
    let times = uniform_times(15.0, 31);
    let series = cx.series(&z, &times, 16)?;
    let pts: Vec<(f64, f64)> = series.iter().map(|s| (s.t, s.mdon)).collect();
    let fit = asymptotic_slope_fit(&pts, default_t_min(15.0), Some(&mna))?;
    let rel = fit.relative_error.unwrap_or(f64::INFINITY);

    let co = context(&split(&[0]), 1)?;
    let zo = OnePS::diagonal(&[1.0, -1.0])?;
    let so = co.series(&zo, &uniform_times(20.0, 41), 16)?;
    let max_abs = so.iter().map(|s| s.mdon.abs()).fold(0.0, f64::max);
    Ok(timer.report(
        4,
        "Donaldson slope theorem",
        rel <= 0.02 && max_abs <= 1.0,
        format!("slope {:.6} vs M^NA {mna} (rel err {rel:.2e}); max |M^Don| on O = {max_abs:.4}", fit.slope),
        "rel err <= 2%, |M^Don| <= 1 on [0,20]",
        Some(120.0),
    ))
}

/// Catalog bundles for random draws.
fn draw_catalog() -> Vec<(BundleKind, i64)> {
    vec![
        (split(&[1]), 1),
        (split(&[2]), 0),
        (split(&[0, 2]), 3),
        (split(&[1, 1]), 1),
        (split(&[-1, 1]), 2),
        (BundleKind::EulerTp2, 1),
    ]
}

/// Random trace-free hermitian generator with operator norm in [0.3, 1].
pub fn random_generator(n: usize, rng: &mut impl Rng) -> Result<OnePS> {
    let mut a = CMat::from_fn(n, n, |_, _| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    a = &a + a.adjoint();
    a -= CMat::identity(n, n) * (a.trace() / C::new(n as f64, 0.0));
    let (ev, _) = crate::bergman::eigh_desc(&a);
    let norm = ev[0].abs().max(ev[n - 1].abs());
    let target = rng.random_range(0.3..1.0);
    let m = hermitian_fn(&a, |x| x * target / norm);
    OnePS::new((&m + m.adjoint()) * C::new(0.5, 0.0))
}

fn random_point(space: Space, rng: &mut impl Rng) -> [C; 2] {
    let mut z = || C::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    match space {
        Space::P1 => [z(), C::new(0.0, 0.0)],
        Space::P2 => [z(), z()],
    }
}

/// Criterion 5: subgeodesic identity and positivity over random draws.
pub fn criterion_5(seed: u64, draws: usize) -> Result<CriterionReport> {
    let timer = Timer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<SectionBasis> = draw_catalog().iter().map(|(b, k)| SectionBasis::new(b, *k, true)).collect::<Result<_>>()?;
    let (mut worst_res, mut worst_conj, mut min_eig) = (0.0f64, 0.0f64, f64::INFINITY);
    let (mut fails, mut richardson_fails, mut worst_rank1) = (0, 0, 0.0f64);
    for _ in 0..draws {
        let basis = &bases[rng.random_range(0..bases.len())];
        let z = random_generator(basis.n(), &mut rng)?;
        let x = random_point(basis.space(), &mut rng);
        let t = rng.random_range(0.0..2.0);
        let q = basis.q_unchecked(&x);
        match subgeodesic_residual(&q, &z, t, 1e-3) {
            Ok(rep) => {
                let scale = 1.0 + rep.rhs.norm();
                let res = rep.residual / scale;
                worst_res = worst_res.max(res);
                worst_conj = worst_conj.max(rep.conjugated_residual / scale);
                min_eig = min_eig.min(rep.min_eig_rhs);
                if basis.rank() == 1 {
                    worst_rank1 = worst_rank1.max(res);
                }
                if res > 1e-5 || rep.min_eig_rhs < -1e-12 {
                    fails += 1;
                }
            }
            Err(BmlError::StepTooLarge(_)) => richardson_fails += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(timer.report(
        5,
        "subgeodesic property",
        fails == 0 && richardson_fails == 0,
        format!(
            "{fails}/{draws} draws over tolerance, {richardson_fails} Richardson failures; max rel residual {worst_res:.2e} \
             (rank 1: {worst_rank1:.2e}, h^1/2-conjugated: {worst_conj:.2e}); min eig F*F {min_eig:.2e}"
        ),
        "rel residual <= 1e-5, min eig >= -1e-12",
        Some(60.0),
    ))
}

/// Criterion 6: commutation of Q*σσQ, Q*σuσQ, Q*σu²σQ.
pub fn criterion_6(seed: u64, draws: usize) -> Result<CriterionReport> {
    let timer = Timer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<SectionBasis> = draw_catalog().iter().map(|(b, k)| SectionBasis::new(b, *k, true)).collect::<Result<_>>()?;
    let (mut worst, mut fails) = (0.0f64, 0);
    for _ in 0..draws {
        let basis = &bases[rng.random_range(0..bases.len())];
        let z = random_generator(basis.n(), &mut rng)?;
        let x = random_point(basis.space(), &mut rng);
        let t = rng.random_range(0.0..2.0);
        let r = commutator_residual(&basis.q_unchecked(&x), &z.exp(t), &(&z.zeta * C::new(2.0, 0.0)));
        worst = worst.max(r);
        if r > 1e-10 {
            fails += 1;
        }
    }
    Ok(timer.report(
        6,
        "commutation lemma",
        fails == 0,
        format!("{fails}/{draws} draws over tolerance, max residual {worst:.2e}"),
        "normalized residual <= 1e-10",
        Some(30.0),
    ))
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Criterion 7: balanced metrics exist for the stable cases and not for O⊕O(2).
pub fn criterion_7(seed: u64) -> Result<CriterionReport> {
    let timer = Timer::new();
    let opts = BalanceOptions { tol: 1e-10, max_iter: 200 };
    let mut notes = Vec::new();
    let mut ok = true;
    for (degrees, k, poly) in [(vec![2], 0, false), (vec![3], 2, false), (vec![1, 1], 2, true)] {
        let cx = context(&split(&degrees), k)?;
        let h0 = balance::random_start(cx.basis.n(), seed, 0.8);
        let ti = balance::t_iterate(&cx, &h0, opts)?;
        let lm = balance::lm_minimize(&cx, &h0, opts)?;
        let conv = ti.outcome == Outcome::Converged && lm.outcome == Outcome::Converged;
        // polystable minimisers form an orbit, so only the M₂ values are compared there
        let gap = if poly {
            (ti.state.m2 - lm.state.m2).abs()
        } else {
            (balance::det_normalize(&ti.state.h) - balance::det_normalize(&lm.state.h)).norm()
        };
        ok &= conv && gap < 1e-6;
        notes.push(format!("{degrees:?} k={k}: T {} it, LM {} it, gap {gap:.1e}", ti.history.len() - 1, lm.history.len() - 1));
    }
    let cx = context(&split(&[0, 2]), 3)?;
    let id = CMat::identity(cx.basis.n(), cx.basis.n());
    for run in [balance::t_iterate(&cx, &id, opts)?, balance::lm_minimize(&cx, &id, opts)?] {
        let diverged = matches!(run.outcome, Outcome::Diverged { spread } if spread > balance::SPREAD_RATIO.ln());
        let mono = strictly_decreasing(&run.m2_values());
        ok &= diverged && mono;
        notes.push(format!("O+O(2) {}: {:?}, monotone M2 {mono}", run.method, run.outcome));
    }
    Ok(timer.report(
        7,
        "balanced existence",
        ok,
        notes.join("; "),
        "stable: residual < 1e-10 and agreement 1e-6; unstable: Diverged with monotone M2",
        Some(120.0),
    ))
}

/// Criterion 8: convexity of M₂ along every executed 1-PS.
pub fn criterion_8(seed: u64) -> Result<CriterionReport> {
    let timer = Timer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs: Vec<(FunctionalContext, OnePS)> = Vec::new();
    let co = context(&split(&[0]), 1)?;
    runs.push((co, OnePS::diagonal(&[1.0, -1.0])?));
    let (cx, z, _) = two_step_context()?;
    runs.push((cx, z));
    for (b, k) in draw_catalog() {
        let cx = context(&b, k)?;
        let z = random_generator(cx.basis.n(), &mut rng)?;
        runs.push((cx, z));
    }
    let mut worst = f64::INFINITY;
    for (cx, z) in &runs {
        let vals: Vec<f64> = uniform_times(15.0, 61).iter().map(|&t| cx.m2_don(&z.exp(2.0 * t))).collect::<Result<_>>()?;
        worst = worst.min(balance::convexity_monitor(&vals)?.min_second_difference);
    }
    Ok(timer.report(
        8,
        "convexity of M2",
        worst >= -1e-8,
        format!("min second difference {worst:.3e} over {} runs", runs.len()),
        ">= -1e-8",
        None,
    ))
}

/// Criterion 9: δ-diagnostic inequality on balanced line-bundle runs.
pub fn criterion_9(seed: u64) -> Result<CriterionReport> {
    let timer = Timer::new();
    let mut worst = f64::INFINITY;
    let mut c_const = 0.0;
    for (d, k) in [(0, 1), (2, 0), (3, 2)] {
        let cx = context(&split(&[d]), k)?;
        let h0 = balance::random_start(cx.basis.n(), seed, 0.8);
        let run = balance::lm_minimize(&cx, &h0, BalanceOptions::default())?;
        let diag = balance::delta_diagnostic(&cx, &run.state.h)?;
        worst = worst.min(diag.margin);
        c_const = diag.c_constant;
    }
    Ok(timer.report(
        9,
        "delta diagnostic",
        worst >= -1e-9,
        format!("min margin {worst:.3e}, C = {c_const:.6}"),
        "margin >= -1e-9",
        None,
    ))
}

/// Criterion 10 (stretch): LM on T_P², k ∈ {1, 2}.
pub fn criterion_10(seed: u64) -> Result<CriterionReport> {
    let timer = Timer::new();
    let tangent = SheafData::tangent_p2();
    let candidates = [SheafData::line_p2(1), SheafData::line_p2(0), SheafData::line_p2(-1)];
    let verdict = slope_stability_verdict(&tangent, &candidates)?.verdict;
    let mut notes = vec![format!("slope verdict {verdict:?}")];
    let mut ok = verdict == Verdict::Stable;
    for k in [1, 2] {
        let cx = context(&BundleKind::EulerTp2, k)?;
        let h0 = balance::random_start(cx.basis.n(), seed, 0.3);
        let run = balance::lm_minimize(&cx, &h0, BalanceOptions { tol: 1e-6, max_iter: 100 })?;
        ok &= run.outcome == Outcome::Converged;
        notes.push(format!("k={k}: {:?} residual {:.2e} in {} it", run.outcome, run.state.residual, run.history.len() - 1));
    }
    Ok(timer.report(10, "T_P2 balanced (stretch)", ok, notes.join("; "), "residual < 1e-6 within 15 min", Some(900.0)))
}

/// Runs every criterion; errors are reported as failures.
pub fn run_all(seed: u64, include_stretch: bool) -> Vec<CriterionReport> {
    let mut out = Vec::new();
    let jobs: Vec<(u8, &'static str, Box<dyn Fn() -> Result<CriterionReport>>)> = vec![
        (1, "exact identity suite", Box::new(move || criterion_1(seed))),
        (2, "closed-form M2", Box::new(criterion_2)),
        (3, "Gieseker slope theorem", Box::new(criterion_3)),
        (4, "Donaldson slope theorem", Box::new(criterion_4)),
        (5, "subgeodesic property", Box::new(move || criterion_5(seed, 200))),
        (6, "commutation lemma", Box::new(move || criterion_6(seed, 1000))),
        (7, "balanced existence", Box::new(move || criterion_7(seed))),
        (8, "convexity of M2", Box::new(move || criterion_8(seed))),
        (9, "delta diagnostic", Box::new(move || criterion_9(seed))),
        (10, "T_P2 balanced (stretch)", Box::new(move || criterion_10(seed))),
    ];
    for (id, name, job) in jobs {
        if id == 10 && !include_stretch {
            continue;
        }
        out.push(job().unwrap_or_else(|e| CriterionReport {
            id,
            name,
            passed: false,
            gating: id != 10,
            measured: format!("error: {e}"),
            tolerance: String::new(),
            runtime_s: 0.0,
            budget_s: None,
        }));
    }
    out
}

//! Balanced metrics: centre of mass, the T-map iteration, Levenberg–Marquardt
//! minimisation of M₂, divergence and convexity monitors and the δ-diagnostic.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bergman::{eigh_desc, hermitian_fn};
use crate::bundle::{BundleKind, CMat, C};
use crate::error::{BmlError, Result};
use crate::functionals::{logdet, FunctionalContext};

/// Divergence threshold on λ_max/λ_min of H.
pub const SPREAD_RATIO: f64 = 1e3;
pub const CONSECUTIVE_DECREASES: usize = 50;
const HESSIAN_CHUNK: usize = 1024;

fn c(x: f64) -> C {
    C::new(x, 0.0)
}

/// Per-node R = σQ L^{−*} with h = σ-metric = LL*, so that Π = RR* is the
/// h-orthogonal projector onto the image of σQ.
struct Frames {
    r: Vec<CMat>,
    logdet: Vec<f64>,
}

fn frames(ctx: &FunctionalContext, sigma: &CMat) -> Result<Frames> {
    let out: Vec<Option<(CMat, f64)>> = ctx
        .sampled
        .q
        .par_iter()
        .map(|q| {
            let p = sigma * q;
            let h = p.adjoint() * &p;
            let ch = h.cholesky()?;
            let l = ch.l();
            let ld = 2.0 * l.diagonal().iter().map(|d| d.re.ln()).sum::<f64>();
            // R = P L^{−*}  ⇔  L R* = P*
            let rt = l.solve_lower_triangular(&p.adjoint())?;
            Some((rt.adjoint(), ld))
        })
        .collect();
    let mut r = Vec::with_capacity(out.len());
    let mut ld = Vec::with_capacity(out.len());
    for (index, o) in out.into_iter().enumerate() {
        let (a, b) = o.ok_or(BmlError::DegenerateMetric { index, min_eig: 0.0 })?;
        r.push(a);
        ld.push(b);
    }
    Ok(Frames { r, logdet: ld })
}

/// M = (1/Vol)Σ w RR*, via one product of the stacked √w·R blocks.
fn com_from_frames(ctx: &FunctionalContext, f: &Frames) -> CMat {
    let n = ctx.basis.n();
    let r = ctx.basis.rank();
    let mut z = CMat::zeros(n, f.r.len() * r);
    for (i, ri) in f.r.iter().enumerate() {
        let s = c((ctx.grid.weights[i] / ctx.grid.vol).sqrt());
        z.columns_mut(i * r, r).copy_from(&(ri * s));
    }
    let m = &z * z.adjoint();
    (&m + m.adjoint()) * c(0.5)
}

fn m2_from_frames(ctx: &FunctionalContext, f: &Frames) -> Result<f64> {
    Ok(ctx.grid.integrate_indexed(|i| f.logdet[i] - ctx.ref_logdet[i])? / ctx.grid.vol)
}

/// σ = H^{1/2}.
pub fn sqrt_form(h: &CMat) -> CMat {
    hermitian_fn(h, f64::sqrt)
}

/// Centre of mass M(H) = (1/Vol)∫ σQ h⁻¹ Q*σ* dμ with σ = H^{1/2}; tr M = r.
pub fn center_of_mass(ctx: &FunctionalContext, h: &CMat) -> Result<CMat> {
    let f = frames(ctx, &sqrt_form(h))?;
    Ok(com_from_frames(ctx, &f))
}

/// B(H) = (1/Vol)∫ Q h⁻¹ Q* dμ.
fn bergman_gram(ctx: &FunctionalContext, h: &CMat) -> Result<CMat> {
    let sigma = sqrt_form(h);
    let sinv = hermitian_fn(h, |x| x.powf(-0.5));
    let m = center_of_mass_sigma(ctx, &sigma)?;
    Ok(&sinv * m * &sinv)
}

fn center_of_mass_sigma(ctx: &FunctionalContext, sigma: &CMat) -> Result<CMat> {
    Ok(com_from_frames(ctx, &frames(ctx, sigma)?))
}

/// det-normalise a positive hermitian form to det 1.
pub fn det_normalize(h: &CMat) -> CMat {
    let n = h.nrows() as f64;
    let ld = logdet(h);
    h * c((-ld / n).exp())
}

/// T(H) = det-normalised (r/N)·B(H)⁻¹. Fixed points satisfy σBσ* = (r/N)I,
/// which are exactly the zeros of the M₂ gradient 2tr(ζM).
pub fn t_operator(ctx: &FunctionalContext, h: &CMat) -> Result<CMat> {
    let b = bergman_gram(ctx, h)?;
    let binv = b.try_inverse().ok_or(BmlError::SingularGram)?;
    let t = binv * c(ctx.basis.rank() as f64 / ctx.basis.n() as f64);
    Ok(det_normalize(&((&t + t.adjoint()) * c(0.5))))
}

/// Directional derivative of M₂ along e^{ζt}σ at t = 0: 2tr(ζM).
pub fn m2_gradient(ctx: &FunctionalContext, h: &CMat, zeta: &CMat) -> Result<f64> {
    let m = center_of_mass(ctx, h)?;
    Ok(2.0 * (zeta * m).trace().re)
}

pub fn residual_of(m: &CMat, r: usize) -> f64 {
    let n = m.nrows();
    (m - CMat::identity(n, n) * c(r as f64 / n as f64)).norm()
}

/// log(λ_max/λ_min) of H.
pub fn spread_of(h: &CMat) -> f64 {
    let (v, _) = eigh_desc(h);
    (v[0] / v[v.len() - 1]).ln()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub residual: f64,
    pub m2: f64,
    pub spread: f64,
    #[serde(skip)]
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BalanceState {
    pub h: CMat,
    pub iteration: usize,
    pub com: CMat,
    pub residual: f64,
    pub m2: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Converged,
    Diverged { spread: f64 },
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct BalanceRun {
    pub method: &'static str,
    pub history: Vec<IterRecord>,
    pub state: BalanceState,
    pub outcome: Outcome,
    /// Residual decreased over the first five iterations (reported, not enforced).
    pub monotone_start: bool,
}

impl BalanceRun {
    /// Err(Diverged) for diverged runs.
    pub fn check(&self) -> Result<&Self> {
        match self.outcome {
            Outcome::Diverged { spread } => Err(BmlError::Diverged { spread }),
            _ => Ok(self),
        }
    }

    pub fn m2_values(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.m2).collect()
    }
}

fn state_from_sigma(ctx: &FunctionalContext, sigma: &CMat, iteration: usize) -> Result<(BalanceState, Frames)> {
    let f = frames(ctx, sigma)?;
    let com = com_from_frames(ctx, &f);
    let m2 = m2_from_frames(ctx, &f)?;
    let h = sigma.adjoint() * sigma;
    let h = (&h + h.adjoint()) * c(0.5);
    let residual = residual_of(&com, ctx.basis.rank());
    let spread = spread_of(&h);
    Ok((BalanceState { h, iteration, com, residual, m2, spread }, f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        BalanceOptions { tol: 1e-10, max_iter: 200 }
    }
}

/// Trailing run of strict M₂ decreases.
fn consecutive_decreases(history: &[IterRecord]) -> usize {
    history.windows(2).rev().take_while(|w| w[1].m2 < w[0].m2).count()
}

fn diverging(history: &[IterRecord]) -> Option<f64> {
    let last = history.last()?;
    (last.spread > SPREAD_RATIO.ln() && consecutive_decreases(history) >= CONSECUTIVE_DECREASES).then_some(last.spread)
}

fn monotone_start(history: &[IterRecord]) -> bool {
    history.iter().take(6).collect::<Vec<_>>().windows(2).all(|w| w[1].residual <= w[0].residual)
}

fn record(state: &BalanceState, start: Instant) -> IterRecord {
    IterRecord {
        iter: state.iteration,
        residual: state.residual,
        m2: state.m2,
        spread: state.spread,
        wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Fixed-point iteration H ← T(H).
pub fn t_iterate(ctx: &FunctionalContext, h0: &CMat, opts: BalanceOptions) -> Result<BalanceRun> {
    let start = Instant::now();
    let mut h = det_normalize(h0);
    let mut history = Vec::new();
    let mut outcome = Outcome::MaxIterations;
    let mut state = None;
    for iter in 0..=opts.max_iter {
        let (st, _) = state_from_sigma(ctx, &sqrt_form(&h), iter)?;
        history.push(record(&st, start));
        let done = if st.residual < opts.tol {
            outcome = Outcome::Converged;
            true
        } else if let Some(spread) = diverging(&history) {
            outcome = Outcome::Diverged { spread };
            true
        } else {
            iter == opts.max_iter
        };
        if done {
            state = Some(st);
            break;
        }
        h = t_operator(ctx, &h)?;
    }
    Ok(BalanceRun { method: "t_iteration", monotone_start: monotone_start(&history), history, state: state.unwrap(), outcome })
}

/// Orthonormal basis of trace-free hermitian N×N matrices (generalised Gell-Mann).
#[derive(Debug, Clone, Copy)]
enum GellMann {
    Sym(usize, usize),
    Anti(usize, usize),
    Diag(usize),
}

fn gell_mann(n: usize) -> Vec<GellMann> {
    let mut out = Vec::with_capacity(n * n - 1);
    for p in 0..n {
        for q in p + 1..n {
            out.push(GellMann::Sym(p, q));
            out.push(GellMann::Anti(p, q));
        }
    }
    out.extend((1..n).map(GellMann::Diag));
    out
}

fn gm_matrix(g: GellMann, n: usize) -> CMat {
    let mut m = CMat::zeros(n, n);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    match g {
        GellMann::Sym(p, q) => {
            m[(p, q)] = c(s);
            m[(q, p)] = c(s);
        }
        GellMann::Anti(p, q) => {
            m[(p, q)] = C::new(0.0, -s);
            m[(q, p)] = C::new(0.0, s);
        }
        GellMann::Diag(l) => {
            let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
            for p in 0..l {
                m[(p, p)] = c(norm);
            }
            m[(l, l)] = c(-(l as f64) * norm);
        }
    }
    m
}

/// Real-stacked entries of Y_a = R*E_aR for every basis element, one column each.
fn projected_generators(r: &CMat, basis: &[GellMann], out: &mut DMatrix<f64>, row0: usize, scale: f64) {
    let (n, rk) = (r.nrows(), r.ncols());
    // outer(p, q)_{ij} = conj(R_pi) R_qj
    let outer = |p: usize, q: usize, i: usize, j: usize| r[(p, i)].conj() * r[(q, j)];
    // prefix sums of R_p* R_p
    let mut prefix = vec![CMat::zeros(rk, rk); n + 1];
    for p in 0..n {
        let row = r.row(p);
        prefix[p + 1] = &prefix[p] + row.adjoint() * row;
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for (a, g) in basis.iter().enumerate() {
        for i in 0..rk {
            for j in 0..rk {
                let y = match *g {
                    GellMann::Sym(p, q) => (outer(p, q, i, j) + outer(q, p, i, j)) * s,
                    GellMann::Anti(p, q) => (outer(p, q, i, j) * C::new(0.0, -1.0) + outer(q, p, i, j) * C::new(0.0, 1.0)) * s,
                    GellMann::Diag(l) => {
                        (prefix[l][(i, j)] - outer(l, l, i, j) * (l as f64)) / ((l * (l + 1)) as f64).sqrt()
                    }
                };
                let k = row0 + 2 * (i * rk + j);
                out[(k, a)] = y.re * scale;
                out[(k + 1, a)] = y.im * scale;
            }
        }
    }
}

/// Gradient and Hessian of X ↦ M₂(e^X σ) at X = 0 in the Gell-Mann basis:
/// g_a = 2tr(E_a M), H_ab = 2tr(M{E_a,E_b}) − 4(1/Vol)∫tr(ΠE_aΠE_b).
fn gradient_hessian(ctx: &FunctionalContext, f: &Frames, m: &CMat, basis: &[GellMann]) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let k = basis.len();
    let mats: Vec<CMat> = basis.iter().map(|&g| gm_matrix(g, n)).collect();
    let grad = DVector::from_iterator(k, mats.iter().map(|e| 2.0 * (e * m).trace().re));

    let mut u = CMat::zeros(n * n, k);
    let mut w = CMat::zeros(n * n, k);
    for (a, e) in mats.iter().enumerate() {
        u.column_mut(a).copy_from_slice(e.as_slice());
        w.column_mut(a).copy_from_slice((m * e).transpose().as_slice());
    }
    let t = w.transpose() * u;
    let mut hess = DMatrix::from_fn(k, k, |a, b| 4.0 * t[(a, b)].re);

    let rk = ctx.basis.rank();
    let rows_per = 2 * rk * rk;
    let nodes = f.r.len();
    let chunks: Vec<DMatrix<f64>> = (0..nodes.div_ceil(HESSIAN_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * HESSIAN_CHUNK;
            let hi = (lo + HESSIAN_CHUNK).min(nodes);
            let mut z = DMatrix::<f64>::zeros((hi - lo) * rows_per, k);
            for i in lo..hi {
                let s = (ctx.grid.weights[i] / ctx.grid.vol).sqrt();
                projected_generators(&f.r[i], basis, &mut z, (i - lo) * rows_per, s);
            }
            z.transpose() * z
        })
        .collect();
    for part in chunks {
        hess -= part * 4.0;
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    (grad, hess)
}

fn expm_hermitian(x: &CMat) -> CMat {
    hermitian_fn(x, f64::exp)
}

/// Damped Newton (Levenberg–Marquardt) minimisation of M₂ over SL(N)/SU(N),
/// updating σ ← e^X σ with X trace-free hermitian. A step is accepted when M₂
/// decreases, or when it is flat to rounding and the residual decreases.
pub fn lm_minimize(ctx: &FunctionalContext, h0: &CMat, opts: BalanceOptions) -> Result<BalanceRun> {
    let start = Instant::now();
    let n = ctx.basis.n();
    let basis = gell_mann(n);
    let mut sigma = sqrt_form(&det_normalize(h0));
    let mut lambda = 1e-3;
    let trust = 0.5;
    let mut history = Vec::new();
    let (mut st, mut fr) = state_from_sigma(ctx, &sigma, 0)?;
    let outcome;
    loop {
        history.push(record(&st, start));
        if st.residual < opts.tol {
            outcome = Outcome::Converged;
            break;
        }
        if let Some(spread) = diverging(&history) {
            outcome = Outcome::Diverged { spread };
            break;
        }
        if st.iteration >= opts.max_iter {
            outcome = Outcome::MaxIterations;
            break;
        }
        let (g, hess) = gradient_hessian(ctx, &fr, &st.com, &basis);
        let mut accepted = None;
        for _ in 0..40 {
            let damped = &hess + DMatrix::identity(g.len(), g.len()) * lambda;
            let Some(ch) = damped.cholesky() else {
                lambda *= 4.0;
                continue;
            };
            let mut delta = -ch.solve(&g);
            let dn = delta.norm();
            if dn > trust {
                delta *= trust / dn;
            }
            let mut x = CMat::zeros(n, n);
            for (a, &gm) in basis.iter().enumerate() {
                x += gm_matrix(gm, n) * c(delta[a]);
            }
            let cand = expm_hermitian(&x) * &sigma;
            match state_from_sigma(ctx, &cand, st.iteration + 1) {
                Ok((cs, cf)) => {
                    let flat = cs.m2 <= st.m2 + 1e-13 * (1.0 + st.m2.abs());
                    if cs.m2 < st.m2 || (flat && cs.residual < st.residual) {
                        lambda = (lambda / 3.0).max(1e-12);
                        accepted = Some((cand, cs, cf));
                        break;
                    }
                }
                Err(BmlError::DegenerateMetric { .. }) => {}
                Err(e) => return Err(e),
            }
            lambda *= 4.0;
        }
        match accepted {
            Some((s, cs, cf)) => {
                sigma = s;
                st = cs;
                fr = cf;
            }
            None => {
                outcome = Outcome::Stalled;
                break;
            }
        }
    }
    Ok(BalanceRun { method: "levenberg_marquardt", monotone_start: monotone_start(&history), history, state: st, outcome })
}

/// Start-up check of the T-map convention on O(2), k = 0: T(I) = I and the
/// M₂ gradient vanishes there.
pub fn t_operator_self_test() -> Result<()> {
    let basis = crate::bundle::SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![2] }, 0, true)?;
    let grid = crate::geometry::build_grid_p1(32, 16)?;
    let ctx = FunctionalContext::new(basis, grid)?;
    let id = CMat::identity(3, 3);
    let t = t_operator(&ctx, &id)?;
    let m = center_of_mass(&ctx, &id)?;
    if (t - &id).norm() > 1e-12 || residual_of(&m, 1) > 1e-12 {
        return Err(BmlError::ExperimentFailed("T-map self-test: FS metric of O(2) is not a fixed point".into()));
    }
    Ok(())
}

/// Random det-1 starting form e^A, A trace-free hermitian with ‖A‖_F = scale.
pub fn random_start(n: usize, seed: u64, scale: f64) -> CMat {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut a = CMat::from_fn(n, n, |_, _| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    a = &a + a.adjoint();
    a -= CMat::identity(n, n) * (a.trace() / c(n as f64));
    let nrm = a.norm();
    if nrm > 0.0 {
        a *= c(scale / nrm);
    }
    expm_hermitian(&(a * c(2.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub samples: usize,
    pub min_second_difference: f64,
    pub convex: bool,
}

/// Convexity of uniformly spaced M₂ samples: min second difference ≥ −1e-8.
pub fn convexity_monitor(values: &[f64]) -> Result<ConvexityReport> {
    if values.len() < 3 {
        return Err(BmlError::InsufficientSamples { needed: 3, got: values.len() });
    }
    let min = crate::functionals::second_differences(values).into_iter().fold(f64::INFINITY, f64::min);
    Ok(ConvexityReport { samples: values.len(), min_second_difference: min, convex: min >= -1e-8 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceVerdict {
    Converged,
    UnstableLike,
    SemistableLike,
}

/// Classifies a balance run history.
pub fn divergence_detect(history: &[IterRecord], tol: f64) -> Result<DivergenceVerdict> {
    let Some(last) = history.last() else {
        return Err(BmlError::Inconclusive("empty history".into()));
    };
    if last.residual < tol {
        return Ok(DivergenceVerdict::Converged);
    }
    if history.len() < 20 {
        return Err(BmlError::Inconclusive(format!("{} iterations, need at least 20", history.len())));
    }
    if last.spread > SPREAD_RATIO.ln() {
        if consecutive_decreases(history) >= CONSECUTIVE_DECREASES {
            return Ok(DivergenceVerdict::UnstableLike);
        }
        let tail = &history[history.len() - 10..];
        let drop = tail[0].m2 - last.m2;
        if drop.abs() < 1e-10 * (1.0 + last.m2.abs()) {
            return Ok(DivergenceVerdict::SemistableLike);
        }
    }
    Err(BmlError::Inconclusive(format!("spread {:.3}, residual {:e}", last.spread, last.residual)))
}

/// Iterate-path time t = spread / (2(w₁ − w_ν)) for a reference weight gap.
pub fn iterate_path_times(history: &[IterRecord], weight_gap: f64) -> Vec<f64> {
    history.iter().map(|h| h.spread / (2.0 * weight_gap)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaDiagnostic {
    pub delta: f64,
    /// v = log(h_min h_HE⁻¹) per node (line bundles: scalars).
    pub v: Vec<f64>,
    pub v_bar: f64,
    /// ∫|v − v̄|² dμ.
    pub l2_sq: f64,
    /// First nonzero eigenvalue of √−1Λ∂̄∂ on functions.
    pub c_constant: f64,
    /// ((δ−1−log δ)/(log δ)²)·C⁻¹·‖v−v̄‖².
    pub lower_bound: f64,
    /// M^Don(h_min, h_HE).
    pub donaldson_value: f64,
    pub margin: f64,
}

/// (δ − 1 − log δ)/(log δ)², continued by 1/2 at δ = 1.
pub fn delta_factor(delta: f64) -> f64 {
    let l = delta.ln();
    if l.abs() < 1e-4 {
        0.5 - l / 6.0
    } else {
        (delta - 1.0 - l) / (l * l)
    }
}

/// First nonzero eigenvalue λ₁ of −(1+s)²∂∂̄ on P¹ with the normalised FS
/// measure, by a Galerkin solve on z̄^a z^b/(1+s)^m (a, b ≤ m) with quadrature.
pub fn laplacian_first_eigenvalue(grid: &crate::geometry::QuadratureGrid, m: u32) -> Result<f64> {
    let idx: Vec<(u32, u32)> = (0..=m).flat_map(|a| (0..=m).map(move |b| (a, b))).collect();
    let k = idx.len();
    let eval = |z: C| -> (Vec<C>, Vec<C>, Vec<C>) {
        let s = z.norm_sqr();
        let (v, dz, dzb): (Vec<C>, Vec<C>, Vec<C>) = idx
            .iter()
            .map(|&(a, b)| {
                let base = (1.0 + s).powi(-(m as i32));
                let zb = z.conj();
                let f = zb.powu(a) * z.powu(b) * base;
                let dz = if b > 0 { zb.powu(a) * z.powu(b - 1) * (b as f64) * base } else { c(0.0) }
                    - zb.powu(a + 1) * z.powu(b) * (m as f64) * base / (1.0 + s);
                let dzb = if a > 0 { zb.powu(a - 1) * z.powu(b) * (a as f64) * base } else { c(0.0) }
                    - zb.powu(a) * z.powu(b + 1) * (m as f64) * base / (1.0 + s);
                (f, dz, dzb)
            })
            .fold((vec![], vec![], vec![]), |mut acc, (f, a, b)| {
                acc.0.push(f);
                acc.1.push(a);
                acc.2.push(b);
                acc
            });
        (v, dz, dzb)
    };
    let mut mass = CMat::zeros(k, k);
    let mut stiff = CMat::zeros(k, k);
    for (nd, &w) in grid.nodes.iter().zip(&grid.weights) {
        let (v, dz, dzb) = eval(nd.z[0]);
        let s = nd.norm_sqr();
        let g = (1.0 + s) * (1.0 + s) * 0.5 * w;
        for i in 0..k {
            for j in 0..k {
                mass[(i, j)] += v[i].conj() * v[j] * w;
                stiff[(i, j)] += (dz[i].conj() * dz[j] + dzb[i].conj() * dzb[j]) * g;
            }
        }
    }
    let l = mass.cholesky().ok_or(BmlError::SingularGram)?.l();
    let linv = l.try_inverse().ok_or(BmlError::SingularGram)?;
    let a = &linv * stiff * linv.adjoint();
    let a = (&a + a.adjoint()) * c(0.5);
    let mut ev: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev.into_iter().find(|&x| x > 1e-8).ok_or(BmlError::Inconclusive("no nonzero eigenvalue".into()))
}

/// δ-diagnostic of a metric H at level k against the catalog HE metric. Only
/// line bundles on P¹ have a catalog HE metric here: (1+|z|²)^{d+k} on the dual.
pub fn delta_diagnostic(ctx: &FunctionalContext, h: &CMat) -> Result<DeltaDiagnostic> {
    let d = match &ctx.basis.bundle {
        BundleKind::SplitP1 { degrees } if degrees.len() == 1 => degrees[0],
        other => return Err(BmlError::MissingHE(other.label())),
    };
    let m = (d + ctx.basis.level) as f64;
    let grid = &ctx.grid;
    let n_nodes = grid.len();
    let mut v = Vec::with_capacity(n_nodes);
    let mut grad_sq = Vec::with_capacity(n_nodes);
    let dq = ctx.sampled.dq.as_ref().expect("context samples derivatives");
    for i in 0..n_nodes {
        let q = &ctx.sampled.q[i];
        let z = grid.nodes[i].z[0];
        let s = z.norm_sqr();
        let hmin = (q.adjoint() * h * q)[(0, 0)].re;
        let dh = (q.adjoint() * h * &dq[i][0])[(0, 0)];
        v.push(hmin.ln() - m * s.ln_1p());
        let dv = dh / hmin - z.conj() * (m / (1.0 + s));
        grad_sq.push((1.0 + s) * (1.0 + s) * dv.norm_sqr());
    }
    // rank 1: h_min h_HE⁻¹ is a scalar, λ_min/λ_max = 1 at every node
    let delta = 1.0;
    let v_bar = grid.integrate_indexed(|i| v[i])? / grid.vol;
    let l2_sq = grid.integrate_indexed(|i| (v[i] - v_bar).powi(2))?;
    let lambda1 = laplacian_first_eigenvalue(grid, 2)?;
    let c_constant = 2.0 * std::f64::consts::PI * lambda1;
    let lower_bound = delta_factor(delta) * l2_sq / c_constant;
    let donaldson_value = 0.5 * grid.integrate_indexed(|i| grad_sq[i])?;
    Ok(DeltaDiagnostic { delta, v, v_bar, l2_sq, c_constant, lower_bound, donaldson_value, margin: donaldson_value - lower_bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bergman::OnePS;
    use crate::bundle::SectionBasis;
    use crate::geometry::build_grid_p1;

    fn ctx(degrees: Vec<i64>, k: i64) -> FunctionalContext {
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees }, k, true).unwrap();
        FunctionalContext::new(b, build_grid_p1(64, 32).unwrap()).unwrap()
    }

    #[test]
    fn self_test_and_trace() {
        t_operator_self_test().unwrap();
        let cx = ctx(vec![0, 2], 3);
        let h = random_start(10, 1, 1.0);
        let m = center_of_mass(&cx, &h).unwrap();
        assert!((m.trace().re - 2.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_fd() {
        let cx = ctx(vec![0, 2], 1);
        let n = cx.basis.n();
        let h = random_start(n, 5, 0.7);
        let sigma = sqrt_form(&h);
        for seed in 0..5 {
            let z = random_start(n, 100 + seed, 1.0);
            let zeta = hermitian_fn(&z, f64::ln) * c(0.5);
            let an = m2_gradient(&cx, &h, &zeta).unwrap();
            let eps = 1e-4;
            let at = |t: f64| {
                let s = expm_hermitian(&(&zeta * c(t))) * &sigma;
                cx.m2_don(&(s.adjoint() * s)).unwrap()
            };
            let fd = (at(eps) - at(-eps)) / (2.0 * eps);
            assert!((an - fd).abs() < 1e-7, "{an} {fd}");
        }
        // destabilising direction at H = I
        let cx = ctx(vec![0, 2], 3);
        let zeta = OnePS::two_step(10, cx.basis.summand_rows(1), 2.0 / 3.0, -1.0).unwrap();
        assert!(m2_gradient(&cx, &CMat::identity(10, 10), &zeta.zeta).unwrap() < 0.0);
    }

    #[test]
    fn hessian_matches_fd() {
        let cx = ctx(vec![1, 2], 0);
        let n = cx.basis.n();
        let sigma = sqrt_form(&random_start(n, 3, 0.5));
        let (st, fr) = state_from_sigma(&cx, &sigma, 0).unwrap();
        let basis = gell_mann(n);
        let (g, hs) = gradient_hessian(&cx, &fr, &st.com, &basis);
        let dir = DVector::from_fn(basis.len(), |i, _| ((i * 7 % 5) as f64 - 2.0) / 10.0);
        let mut x = CMat::zeros(n, n);
        for (a, &gm) in basis.iter().enumerate() {
            x += gm_matrix(gm, n) * c(dir[a]);
        }
        let at = |t: f64| {
            let s = expm_hermitian(&(&x * c(t))) * &sigma;
            cx.m2_don(&(s.adjoint() * s)).unwrap()
        };
        let eps = 1e-3;
        let fd1 = (at(eps) - at(-eps)) / (2.0 * eps);
        let fd2 = (at(eps) - 2.0 * at(0.0) + at(-eps)) / (eps * eps);
        assert!((g.dot(&dir) - fd1).abs() < 1e-7);
        assert!((dir.dot(&(&hs * &dir)) - fd2).abs() < 1e-5, "{} {fd2}", dir.dot(&(&hs * &dir)));
    }

    #[test]
    fn balanced_line_bundle_and_agreement() {
        let cx = ctx(vec![3], 2);
        let h0 = random_start(6, 11, 0.8);
        let lm = lm_minimize(&cx, &h0, BalanceOptions::default()).unwrap();
        assert_eq!(lm.outcome, Outcome::Converged);
        // linear rate m/(m+2) with m = d + k = 5: about 57 steps from this start
        let ti = t_iterate(&cx, &h0, BalanceOptions { tol: 1e-10, max_iter: 100 }).unwrap();
        assert_eq!(ti.outcome, Outcome::Converged);
        assert!(ti.monotone_start);
        for d in [2, 3] {
            let cx = ctx(vec![d], 0);
            let h0 = random_start(d as usize + 1, 3, 0.8);
            let run = t_iterate(&cx, &h0, BalanceOptions { tol: 1e-10, max_iter: 50 }).unwrap();
            assert_eq!(run.outcome, Outcome::Converged);
        }
        assert!((det_normalize(&lm.state.h) - det_normalize(&ti.state.h)).norm() < 1e-6);
        assert!((det_normalize(&lm.state.h) - CMat::identity(6, 6)).norm() < 1e-6);
    }

    #[test]
    fn unstable_split_diverges() {
        let cx = ctx(vec![0, 2], 3);
        let run = lm_minimize(&cx, &CMat::identity(10, 10), BalanceOptions { tol: 1e-10, max_iter: 120 }).unwrap();
        assert!(matches!(run.outcome, Outcome::Diverged { .. }), "{:?}", run.outcome);
        assert_eq!(divergence_detect(&run.history, 1e-10).unwrap(), DivergenceVerdict::UnstableLike);
        assert!(run.check().is_err());
    }

    #[test]
    fn convexity_reports() {
        let r = convexity_monitor(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.min_second_difference, 0.0);
        let f = |t: f64| 4.0 * t / (1.0 - (-4.0 * t).exp()) - 2.0 * t;
        let vals: Vec<f64> = (1..40).map(|i| f(0.25 * i as f64)).collect();
        assert!(convexity_monitor(&vals).unwrap().convex);
        assert!(!convexity_monitor(&[0.0, 1.0, 0.0]).unwrap().convex);
        assert!(convexity_monitor(&[1.0]).is_err());
    }

    #[test]
    fn laplacian_eigenvalue() {
        let grid = build_grid_p1(64, 32).unwrap();
        let l1 = laplacian_first_eigenvalue(&grid, 2).unwrap();
        assert!((l1 - 2.0).abs() < 1e-8, "{l1}");
        let l1 = laplacian_first_eigenvalue(&grid, 3).unwrap();
        assert!((l1 - 2.0).abs() < 1e-8);
    }

    #[test]
    fn delta_diagnostic_values() {
        let cx = ctx(vec![0], 1);
        let d = delta_diagnostic(&cx, &CMat::identity(2, 2)).unwrap();
        assert!(d.l2_sq < 1e-20 && d.donaldson_value < 1e-20 && d.lower_bound.abs() < 1e-20);
        // along a Bergman path the energy equals M^Don and dominates the bound
        let zeta = OnePS::diagonal(&[0.5, -0.5]).unwrap();
        let h = zeta.exp(2.0);
        let d = delta_diagnostic(&cx, &h).unwrap();
        let mdon = cx.m_don(&zeta, 1.0, 64).unwrap();
        assert!((d.donaldson_value - mdon).abs() < 1e-8, "{} {mdon}", d.donaldson_value);
        assert!(d.margin > 0.0);
        assert!((d.c_constant - 4.0 * std::f64::consts::PI).abs() < 1e-6);
        let e = FunctionalContext::new(SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap(), build_grid_p1(8, 8).unwrap()).unwrap();
        assert!(matches!(delta_diagnostic(&e, &CMat::identity(10, 10)), Err(BmlError::MissingHE(_))));
    }
}

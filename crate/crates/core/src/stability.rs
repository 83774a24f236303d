//! Exact slope, Hilbert and filtration calculus.
//!
//! Everything here runs on arbitrary-precision rationals. No floating point
//! enters except as the input of [`rationalize_weights`].

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{BmlError, Result};
use crate::exact::{self, Rat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    P1,
    P2,
}

impl Space {
    pub fn dim(self) -> usize {
        match self {
            Space::P1 => 1,
            Space::P2 => 2,
        }
    }
}

/// Source of the section counts h⁰(F(k)).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hilbert {
    /// Direct sum of O(d_i) on P¹.
    SplitP1(Vec<i64>),
    /// Direct sum of O(d_i) on P².
    SplitP2(Vec<i64>),
    /// Tangent bundle of P² (Euler quotient).
    TangentP2,
    /// Finite table of h⁰ values with no closed form behind it.
    Table(BTreeMap<i64, u64>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SheafData {
    pub rank: u32,
    pub degree: Option<Rat>,
    pub hilbert: Hilbert,
    pub space: Space,
    pub label: String,
}

pub fn rat(n: i64) -> Rat {
    Rat::from_integer(BigInt::from(n))
}

pub fn ratio(n: i64, d: i64) -> Rat {
    Rat::new(BigInt::from(n), BigInt::from(d))
}

pub fn h0_line_p1(d: i64) -> u64 {
    (d + 1).max(0) as u64
}

pub fn h0_line_p2(d: i64) -> u64 {
    if d < 0 {
        0
    } else {
        ((d + 1) * (d + 2) / 2) as u64
    }
}

fn split_label(degrees: &[i64]) -> String {
    degrees
        .iter()
        .map(|&d| if d == 0 { "O".to_string() } else { format!("O({d})") })
        .collect::<Vec<_>>()
        .join("+")
}

impl SheafData {
    pub fn line_p1(d: i64) -> Self {
        Self::split_p1(&[d])
    }

    pub fn split_p1(degrees: &[i64]) -> Self {
        assert!(!degrees.is_empty(), "split bundle needs a summand");
        SheafData {
            rank: degrees.len() as u32,
            degree: Some(rat(degrees.iter().sum())),
            hilbert: Hilbert::SplitP1(degrees.to_vec()),
            space: Space::P1,
            label: split_label(degrees),
        }
    }

    pub fn line_p2(d: i64) -> Self {
        Self::split_p2(&[d])
    }

    pub fn split_p2(degrees: &[i64]) -> Self {
        assert!(!degrees.is_empty(), "split bundle needs a summand");
        SheafData {
            rank: degrees.len() as u32,
            degree: Some(rat(degrees.iter().sum())),
            hilbert: Hilbert::SplitP2(degrees.to_vec()),
            space: Space::P2,
            label: split_label(degrees),
        }
    }

    pub fn tangent_p2() -> Self {
        SheafData {
            rank: 2,
            degree: Some(rat(3)),
            hilbert: Hilbert::TangentP2,
            space: Space::P2,
            label: "T_P2".into(),
        }
    }

    pub fn from_table(rank: u32, degree: Option<Rat>, table: BTreeMap<i64, u64>, space: Space) -> Self {
        SheafData { rank, degree, hilbert: Hilbert::Table(table), space, label: format!("rank {rank} sheaf") }
    }

    pub fn h0_at(&self, k: i64) -> Option<u64> {
        match &self.hilbert {
            Hilbert::SplitP1(ds) => Some(ds.iter().map(|d| h0_line_p1(d + k)).sum()),
            Hilbert::SplitP2(ds) => Some(ds.iter().map(|d| h0_line_p2(d + k)).sum()),
            Hilbert::TangentP2 => Some(euler_tp2_cohomology(k)[0]),
            Hilbert::Table(t) => t.get(&k).copied(),
        }
    }

    /// Dimensions (h⁰, h¹, h²) of F(m) for catalog sheaves.
    pub fn cohomology(&self, m: i64) -> Result<[u64; 3]> {
        match &self.hilbert {
            Hilbert::SplitP1(ds) => Ok(ds.iter().fold([0, 0, 0], |acc, &d| {
                let e = d + m;
                [acc[0] + h0_line_p1(e), acc[1] + h0_line_p1(-e - 2), 0]
            })),
            Hilbert::SplitP2(ds) => Ok(ds.iter().fold([0, 0, 0], |acc, &d| {
                let e = d + m;
                [acc[0] + h0_line_p2(e), acc[1], acc[2] + h0_line_p2(-e - 3)]
            })),
            Hilbert::TangentP2 => Ok(euler_tp2_cohomology(m)),
            Hilbert::Table(_) => Err(BmlError::UnsupportedBundle(self.label.clone())),
        }
    }
}

impl fmt::Display for SheafData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

/// Rank of multiplication H⁰(O(a-1))³ → H⁰(O(a)), (s₀,s₁,s₂) ↦ Σ Zᵢsᵢ on P².
fn euler_multiplication_rank(a: i64) -> usize {
    let target = exact::monomials(3, a);
    let source = exact::monomials(3, a - 1);
    if target.is_empty() || source.is_empty() {
        return 0;
    }
    let index: BTreeMap<&Vec<u32>, usize> = target.iter().enumerate().map(|(i, m)| (m, i)).collect();
    let mut rows = Vec::with_capacity(3 * source.len());
    for var in 0..3 {
        for m in &source {
            let mut prod = m.clone();
            prod[var] += 1;
            let mut row = vec![Rat::zero(); target.len()];
            row[index[&prod]] = Rat::one();
            rows.push(row);
        }
    }
    exact::rank(&rows)
}

/// (h⁰, h¹, h²) of T_{P²}(m), from the Euler sequence 0 → O(m) → O(m+1)³ → T(m) → 0.
///
/// H¹ and H² come from the connecting map H²(O(m)) → H²(O(m+1))³, which by
/// Serre duality has the rank of the multiplication map in degree -m-3.
pub fn euler_tp2_cohomology(m: i64) -> [u64; 3] {
    let h0 = 3 * h0_line_p2(m + 1) - h0_line_p2(m);
    let a = -m - 3;
    let r = euler_multiplication_rank(a) as u64;
    let h1 = h0_line_p2(a) - r;
    let h2 = 3 * h0_line_p2(a - 1) - r;
    [h0, h1, h2]
}

pub fn mu(sheaf: &SheafData) -> Result<Rat> {
    let d = sheaf.degree.clone().ok_or(BmlError::MissingDegree { step: 0 })?;
    Ok(d / rat(sheaf.rank as i64))
}

/// Least common multiple of the reduced denominators.
pub fn j_of_zeta(weights: &[Rat]) -> BigInt {
    weights.iter().fold(BigInt::one(), |acc, w| acc.lcm(w.denom()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationSpec {
    /// Weights w₁ > … > w_ν as supplied.
    pub weights: Vec<Rat>,
    /// Saturated subsheaves E'_{≤-wᵢ}; the last one is E.
    pub steps: Vec<SheafData>,
    /// dim V_{≤-wᵢ,k}.
    pub v_dims: Vec<u64>,
    pub level: i64,
    /// max(1, max|wᵢ|): the supplied weights divided by this have norm ≤ 1.
    pub scale: Rat,
}

impl FiltrationSpec {
    pub fn new(weights: Vec<Rat>, steps: Vec<SheafData>, v_dims: Vec<u64>, level: i64) -> Result<Self> {
        let bad = |m: &str| Err(BmlError::InvalidFiltration(m.to_string()));
        let nu = weights.len();
        if nu == 0 {
            return bad("no weights");
        }
        if steps.len() != nu || v_dims.len() != nu {
            return bad("weights, steps and v_dims differ in length");
        }
        if weights.windows(2).any(|w| w[0] <= w[1]) {
            return bad("weights must be strictly decreasing");
        }
        if steps.windows(2).any(|s| s[0].rank > s[1].rank) {
            return bad("step ranks must be nondecreasing");
        }
        if v_dims[0] == 0 || v_dims.windows(2).any(|v| v[0] >= v[1]) {
            return bad("v_dims must be positive and strictly increasing");
        }
        let ambient = &steps[nu - 1];
        if let Some(h0) = ambient.h0_at(level) {
            if h0 != v_dims[nu - 1] {
                return bad("last v_dim must equal h0(E(k))");
            }
        }
        let mut prev = 0u64;
        let mut trace = Rat::zero();
        for (w, &v) in weights.iter().zip(&v_dims) {
            trace += w * rat((v - prev) as i64);
            prev = v;
        }
        if !trace.is_zero() {
            return bad("weights are not trace-free on the section space");
        }
        let m = exact::max_abs(&weights);
        let scale = if m > Rat::one() { m } else { Rat::one() };
        Ok(FiltrationSpec { weights, steps, v_dims, level, scale })
    }

    /// The trivial filtration 0 ⊊ E with the single weight 0.
    pub fn trivial(ambient: SheafData, level: i64) -> Result<Self> {
        let h0 = ambient
            .h0_at(level)
            .ok_or_else(|| BmlError::InvalidFiltration("ambient h0 unknown".into()))?;
        Self::new(vec![Rat::zero()], vec![ambient], vec![h0], level)
    }

    /// Two-step filtration 0 ⊊ F ⊊ E with weights (w₁, w₂).
    pub fn two_step(sub: SheafData, ambient: SheafData, weights: (Rat, Rat), level: i64) -> Result<Self> {
        let missing = || BmlError::InvalidFiltration("h0 unknown".into());
        let v1 = sub.h0_at(level).ok_or_else(missing)?;
        let v2 = ambient.h0_at(level).ok_or_else(missing)?;
        Self::new(vec![weights.0, weights.1], vec![sub, ambient], vec![v1, v2], level)
    }

    pub fn ambient(&self) -> &SheafData {
        self.steps.last().expect("validated nonempty")
    }

    pub fn normalized_weights(&self) -> Vec<Rat> {
        self.weights.iter().map(|w| w / &self.scale).collect()
    }

    /// Same filtration with every weight multiplied by `c > 0`.
    pub fn scaled(&self, c: &Rat) -> Result<Self> {
        Self::new(self.weights.iter().map(|w| w * c).collect(), self.steps.clone(), self.v_dims.clone(), self.level)
    }

    pub fn grading(&self) -> WeightGrading {
        WeightGrading::new(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrading {
    pub j: BigInt,
    pub integer_weights: Vec<BigInt>,
    /// 0-based indices i with rk(E'_{≤-wᵢ}) - rk(E'_{≤-wᵢ₋₁}) > 0.
    pub surviving: Vec<usize>,
}

impl WeightGrading {
    pub fn new(filt: &FiltrationSpec) -> Self {
        let j = j_of_zeta(&filt.weights);
        let integer_weights = filt
            .weights
            .iter()
            .map(|w| (w * Rat::from_integer(j.clone())).to_integer())
            .collect();
        let mut prev = 0;
        let mut surviving = Vec::new();
        for (i, s) in filt.steps.iter().enumerate() {
            if s.rank > prev {
                surviving.push(i);
            }
            prev = s.rank;
        }
        WeightGrading { j, integer_weights, surviving }
    }

    /// Number of integer grades q ∈ [-w̄ᵢ, -w̄ᵢ₊₁) at which step i is E'_{≤q}.
    fn grade_count(&self, i: usize) -> BigInt {
        &self.integer_weights[i] - &self.integer_weights[i + 1]
    }
}

/// Sum of `term(i)` over the integer grades q ∈ [-w̄₁, -w̄_ν), grouped by step.
fn grade_sum(g: &WeightGrading, nu: usize, mut term: impl FnMut(usize) -> Rat) -> Rat {
    (0..nu.saturating_sub(1)).fold(Rat::zero(), |acc, i| acc + Rat::from_integer(g.grade_count(i)) * term(i))
}

/// Non-Archimedean Donaldson functional (2/j) Σ_q rk(E'_{≤q})(μ(E) − μ(E'_{≤q})).
pub fn m_na(filt: &FiltrationSpec) -> Result<Rat> {
    let g = filt.grading();
    let mu_e = mu(filt.ambient()).map_err(|_| BmlError::MissingDegree { step: filt.steps.len() - 1 })?;
    let mut slopes = Vec::with_capacity(filt.steps.len());
    for (i, s) in filt.steps.iter().enumerate() {
        slopes.push(mu(s).map_err(|_| BmlError::MissingDegree { step: i })?);
    }
    let sum = grade_sum(&g, filt.steps.len(), |i| rat(filt.steps[i].rank as i64) * (&mu_e - &slopes[i]));
    Ok(sum * rat(2) / Rat::from_integer(g.j))
}

/// max |w_α − w_β| over surviving indices.
pub fn j_na(grading: &WeightGrading, weights: &[Rat]) -> Rat {
    let surv: Vec<&Rat> = grading.surviving.iter().map(|&i| &weights[i]).collect();
    match (surv.iter().max(), surv.iter().min()) {
        (Some(hi), Some(lo)) => (*hi).clone() - (*lo).clone(),
        _ => Rat::zero(),
    }
}

/// Predicted asymptotic slope of M₂ along the 1-PS:
/// (2/j)(rk E/h⁰) Σ_q rk(E_{≤q})(h⁰/rk E − dim V_{≤q}/rk E_{≤q}).
pub fn m2_slope_prediction(filt: &FiltrationSpec, grading: &WeightGrading) -> Rat {
    let r = rat(filt.ambient().rank as i64);
    let h0 = rat(*filt.v_dims.last().expect("nonempty") as i64);
    let sum = grade_sum(grading, filt.steps.len(), |i| {
        let rk = rat(filt.steps[i].rank as i64);
        let v = rat(filt.v_dims[i] as i64);
        &rk * (&h0 / &r - v / &rk)
    });
    sum * rat(2) * r / (h0 * Rat::from_integer(grading.j.clone()))
}

/// (Σᵢ wᵢ·rk(grᵢ), Gieseker q-sum). The second equals twice the first.
pub fn weight_sum_identity(filt: &FiltrationSpec, grading: &WeightGrading) -> (Rat, Rat) {
    let mut prev = 0i64;
    let mut lhs = Rat::zero();
    for (w, s) in filt.weights.iter().zip(&filt.steps) {
        lhs += w * rat(s.rank as i64 - prev);
        prev = s.rank as i64;
    }
    (lhs, m2_slope_prediction(filt, grading))
}

/// Sign of h⁰(F(k))/rk F − h⁰(E(k))/rk E.
pub fn le_potier_verdict(sub: &SheafData, ambient: &SheafData, k: i64) -> Result<Ordering> {
    let missing = |s: &SheafData| BmlError::UnsupportedBundle(format!("h0 of {s} at level {k} unknown"));
    let hf = sub.h0_at(k).ok_or_else(|| missing(sub))? as u128;
    let he = ambient.h0_at(k).ok_or_else(|| missing(ambient))? as u128;
    Ok((hf * ambient.rank as u128).cmp(&(he * sub.rank as u128)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Semistable,
    Unstable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityVerdict {
    pub verdict: Verdict,
    /// Index of the candidate of maximal slope (ties broken by larger rank).
    pub witness: usize,
}

pub fn slope_stability_verdict(ambient: &SheafData, candidates: &[SheafData]) -> Result<StabilityVerdict> {
    if candidates.is_empty() {
        return Err(BmlError::EmptyCandidates);
    }
    let mu_e = mu(ambient)?;
    let mut best: Option<(Rat, u32, usize)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let m = mu(c).map_err(|_| BmlError::MissingDegree { step: i })?;
        let better = match &best {
            None => true,
            Some((bm, br, _)) => m > *bm || (m == *bm && c.rank > *br),
        };
        if better {
            best = Some((m, c.rank, i));
        }
    }
    let (m, _, witness) = best.expect("nonempty");
    let verdict = match m.cmp(&mu_e) {
        Ordering::Less => Verdict::Stable,
        Ordering::Equal => Verdict::Semistable,
        Ordering::Greater => Verdict::Unstable,
    };
    Ok(StabilityVerdict { verdict, witness })
}

/// Maximal destabilising subsheaf of a split bundle on P¹.
pub fn f_max_split(degrees: &[i64]) -> SheafData {
    let top = *degrees.iter().max().expect("nonempty degree list");
    let tops: Vec<i64> = degrees.iter().copied().filter(|&d| d == top).collect();
    SheafData::split_p1(&tops)
}

/// Castelnuovo–Mumford regularity: least m with H^i(F(m − i)) = 0 for i > 0.
pub fn regularity_catalog(sheaf: &SheafData) -> Result<i64> {
    if let Hilbert::Table(_) = sheaf.hilbert {
        return Err(BmlError::UnsupportedBundle(sheaf.label.clone()));
    }
    let regular = |m: i64| -> Result<bool> {
        let ok1 = sheaf.cohomology(m - 1)?[1] == 0;
        let ok2 = sheaf.cohomology(m - 2)?[2] == 0;
        Ok(ok1 && ok2)
    };
    // Regularity is upward closed, so scan upward from a level that is
    // certainly irregular for the catalog (the table for T_P2 starts at -6).
    let start = match &sheaf.hilbert {
        Hilbert::SplitP1(ds) | Hilbert::SplitP2(ds) => -ds.iter().max().copied().unwrap_or(0) - 4,
        _ => -6,
    };
    for m in start..=start + 128 {
        if regular(m)? {
            return Ok(m);
        }
    }
    Err(BmlError::UnsupportedBundle(format!("{}: regularity outside scan range", sheaf.label)))
}

/// Catalog F_max: top-degree summands for split bundles, the bundle itself for T_{P²}.
pub fn f_max_catalog(sheaf: &SheafData) -> Result<SheafData> {
    match &sheaf.hilbert {
        Hilbert::SplitP1(ds) => Ok(f_max_split(ds)),
        Hilbert::SplitP2(ds) => {
            let top = *ds.iter().max().expect("nonempty");
            Ok(SheafData::split_p2(&ds.iter().copied().filter(|&d| d == top).collect::<Vec<_>>()))
        }
        Hilbert::TangentP2 => Ok(sheaf.clone()),
        Hilbert::Table(_) => Err(BmlError::UnsupportedBundle(sheaf.label.clone())),
    }
}

/// k₀ = max(reg(E), reg(F_max)).
pub fn k0_level(sheaf: &SheafData) -> Result<i64> {
    let f = f_max_catalog(sheaf)?;
    Ok(regularity_catalog(sheaf)?.max(regularity_catalog(&f)?))
}

fn best_rational(x: f64, bound: u64) -> Option<Rat> {
    (1..=bound).find_map(|q| {
        let p = (x * q as f64).round();
        ((x - p / q as f64).abs() <= 1e-12 * x.abs().max(1.0)).then(|| ratio(p as i64, q as i64))
    })
}

/// Candidate rationals near x with denominator ≤ bound, closest first.
fn nearby_rationals(x: f64, bound: u64, keep: usize) -> Vec<Rat> {
    let mut cands: Vec<Rat> = Vec::new();
    for q in 1..=bound {
        let base = (x * q as f64).floor() as i64;
        for p in base - 1..=base + 2 {
            let r = ratio(p, q as i64);
            if !cands.contains(&r) {
                cands.push(r);
            }
        }
    }
    let dist = |r: &Rat| (x - r.to_f64().unwrap_or(f64::NAN)).abs();
    cands.sort_by(|a, b| dist(a).partial_cmp(&dist(b)).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b)));
    cands.truncate(keep);
    cands
}

/// Rational weights w̃ with denominators ≤ bound such that w̃ and w − w̃ are
/// both strictly decreasing. Inputs that are already such rationals come
/// back unchanged.
pub fn rationalize_weights(real_weights: &[f64], bound: u64) -> Result<Vec<Rat>> {
    if bound == 0 || real_weights.iter().any(|w| !w.is_finite()) {
        return Err(BmlError::BoundTooSmall { bound });
    }
    if real_weights.windows(2).any(|w| w[0] <= w[1]) {
        return Err(BmlError::InvalidFiltration("weights must be strictly decreasing".into()));
    }
    let exact: Option<Vec<Rat>> = real_weights.iter().map(|&x| best_rational(x, bound)).collect();
    if let Some(e) = exact {
        return Ok(e);
    }
    let cands: Vec<Vec<Rat>> = real_weights.iter().map(|&x| nearby_rationals(x, bound, 8)).collect();
    let mut chosen: Vec<Rat> = Vec::new();
    if search(real_weights, &cands, &mut chosen) {
        Ok(chosen)
    } else {
        Err(BmlError::BoundTooSmall { bound })
    }
}

fn search(w: &[f64], cands: &[Vec<Rat>], chosen: &mut Vec<Rat>) -> bool {
    let i = chosen.len();
    if i == w.len() {
        return true;
    }
    for c in &cands[i] {
        if let Some(prev) = chosen.last() {
            let err_prev = w[i - 1] - prev.to_f64().unwrap_or(f64::NAN);
            let err = w[i] - c.to_f64().unwrap_or(f64::NAN);
            if c >= prev || err >= err_prev {
                continue;
            }
        }
        chosen.push(c.clone());
        if search(w, cands, chosen) {
            return true;
        }
        chosen.pop();
    }
    false
}

/// Parse "p/q" or "p" into a reduced rational.
pub fn parse_rational(s: &str) -> Result<Rat> {
    let t = s.trim();
    let bad = || BmlError::config("rational", format!("cannot parse `{s}` as p/q"));
    let (n, d) = match t.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (t, "1"),
    };
    let n: BigInt = n.parse().map_err(|_| bad())?;
    let d: BigInt = d.parse().map_err(|_| bad())?;
    if d.is_zero() || d.is_negative() {
        return Err(bad());
    }
    Ok(Rat::new(n, d))
}

pub fn rat_to_f64(r: &Rat) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

//! Text formats: FiltrationSpec JSON, ζ matrix text, inline CLI specs and the
//! experiment config. Every parser takes untrusted input and returns errors.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bergman::{generic_points, weight_filtration, OnePS};
use crate::bundle::{BundleKind, CMat, SectionBasis, C};
use crate::error::{BmlError, Result};
use crate::exact::Rat;
use crate::geometry::GridSpec;
use crate::stability::{k0_level, parse_rational, regularity_catalog, FiltrationSpec, SheafData, Space};

/// A rational that serializes as a "p/q" string in lowest terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatStr(pub Rat);

impl Serialize for RatStr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for RatStr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).map(RatStr).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for RatStr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepDoc {
    rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    degree: Option<RatStr>,
    h0_table: BTreeMap<i64, u64>,
    #[serde(default = "default_space")]
    space: Space,
}

fn default_space() -> Space {
    Space::P1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FiltrationDoc {
    weights: Vec<RatStr>,
    steps: Vec<StepDoc>,
    v_dims: Vec<u64>,
    level: i64,
}

fn json_err(field: &str, e: serde_json::Error) -> BmlError {
    BmlError::config(field, e.to_string())
}

pub fn parse_filtration_json(data: &[u8]) -> Result<FiltrationSpec> {
    let doc: FiltrationDoc = serde_json::from_slice(data).map_err(|e| json_err("filtration", e))?;
    if doc.steps.iter().any(|s| s.rank == 0) {
        return Err(BmlError::config("steps.rank", "ranks must be positive"));
    }
    let steps = doc
        .steps
        .into_iter()
        .map(|s| SheafData::from_table(s.rank, s.degree.map(|d| d.0), s.h0_table, s.space))
        .collect();
    FiltrationSpec::new(doc.weights.into_iter().map(|w| w.0).collect(), steps, doc.v_dims, doc.level)
}

/// Steps are written with their h⁰ at the working level only.
pub fn filtration_to_json(filt: &FiltrationSpec) -> String {
    let steps = filt
        .steps
        .iter()
        .map(|s| StepDoc {
            rank: s.rank,
            degree: s.degree.clone().map(RatStr),
            h0_table: s.h0_at(filt.level).map(|h| BTreeMap::from([(filt.level, h)])).unwrap_or_default(),
            space: s.space,
        })
        .collect();
    let doc = FiltrationDoc {
        weights: filt.weights.iter().cloned().map(RatStr).collect(),
        steps,
        v_dims: filt.v_dims.clone(),
        level: filt.level,
    };
    serde_json::to_string_pretty(&doc).expect("plain data")
}

/// ζ as text: one row per line, entries `re` or `re,im` separated by
/// whitespace; `#` starts a comment. The matrix must be square.
pub fn parse_zeta_text(text: &str) -> Result<CMat> {
    let mut rows: Vec<Vec<C>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let row = body
            .split_whitespace()
            .map(|tok| {
                let bad = || BmlError::config("zeta", format!("line {}: bad entry `{tok}`", ln + 1));
                let (re, im) = match tok.split_once(',') {
                    Some((a, b)) => (a, b),
                    None => (tok, "0"),
                };
                let re: f64 = re.parse().map_err(|_| bad())?;
                let im: f64 = im.parse().map_err(|_| bad())?;
                if !re.is_finite() || !im.is_finite() {
                    return Err(bad());
                }
                Ok(C::new(re, im))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(BmlError::config("zeta", "empty matrix"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != n) {
        return Err(BmlError::config("zeta", format!("row {} has {} entries, expected {n}", i + 1, rows[i].len())));
    }
    Ok(CMat::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn zeta_to_text(z: &CMat) -> String {
    let mut out = String::new();
    for i in 0..z.nrows() {
        let row: Vec<String> = (0..z.ncols())
            .map(|j| {
                let c = z[(i, j)];
                if c.im == 0.0 {
                    format!("{}", c.re)
                } else {
                    format!("{},{}", c.re, c.im)
                }
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// `split_p1:0,2` or `euler_tp2`.
pub fn parse_bundle_spec(s: &str) -> Result<BundleKind> {
    let s = s.trim();
    let bad = |m: String| BmlError::config("bundle", m);
    match s.split_once(':') {
        None if s == "euler_tp2" => Ok(BundleKind::EulerTp2),
        Some(("split_p1", list)) => {
            let degrees = list
                .split(',')
                .map(|d| d.trim().parse::<i64>().map_err(|_| bad(format!("bad degree `{d}`"))))
                .collect::<Result<Vec<_>>>()?;
            if degrees.len() > 8 || degrees.iter().any(|d| !(-64..=64).contains(d)) {
                return Err(bad("at most 8 summands with |degree| <= 64".into()));
            }
            Ok(BundleKind::SplitP1 { degrees })
        }
        _ => Err(bad(format!("unknown bundle `{s}`; expected split_p1:<d,..> or euler_tp2"))),
    }
}

pub fn bundle_to_spec(b: &BundleKind) -> String {
    match b {
        BundleKind::SplitP1 { degrees } => {
            format!("split_p1:{}", degrees.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","))
        }
        BundleKind::EulerTp2 => "euler_tp2".into(),
    }
}

/// One-parameter subgroup specification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsSpec {
    Trivial,
    /// The summand `subsheaf` (e.g. "O(2)") gets the first weight, the rest the second.
    TwoStep { subsheaf: String, weights: [RatStr; 2] },
    /// Weights on the section basis, one per basis element.
    Diagonal { weights: Vec<RatStr> },
    /// ζ read from a matrix text file.
    Matrix { path: String },
}

fn parse_rat_list(s: &str, field: &str) -> Result<Vec<Rat>> {
    s.split(',')
        .map(|w| parse_rational(w).map_err(|_| BmlError::config(field, format!("bad rational `{w}`"))))
        .collect()
}

/// `two_step:O(2):2/3,-1`, `diag:1,-1`, `trivial` or `matrix:<path>`.
pub fn parse_ps_spec(s: &str) -> Result<PsSpec> {
    let s = s.trim();
    let mut parts = s.splitn(3, ':');
    match (parts.next(), parts.next(), parts.next()) {
        (Some("trivial"), None, None) => Ok(PsSpec::Trivial),
        (Some("two_step"), Some(sub), Some(ws)) => {
            parse_line_label(sub)?;
            let w = parse_rat_list(ws, "ps.weights")?;
            let [a, b]: [Rat; 2] = w.try_into().map_err(|_| BmlError::config("ps.weights", "two_step takes two weights"))?;
            Ok(PsSpec::TwoStep { subsheaf: sub.to_string(), weights: [RatStr(a), RatStr(b)] })
        }
        (Some("diag"), Some(ws), None) => {
            Ok(PsSpec::Diagonal { weights: parse_rat_list(ws, "ps.weights")?.into_iter().map(RatStr).collect() })
        }
        (Some("matrix"), Some(path), rest) => {
            let path = match rest {
                Some(r) => format!("{path}:{r}"),
                None => path.to_string(),
            };
            Ok(PsSpec::Matrix { path })
        }
        _ => Err(BmlError::config("ps", format!("cannot parse `{s}`"))),
    }
}

pub fn ps_to_spec(p: &PsSpec) -> String {
    match p {
        PsSpec::Trivial => "trivial".into(),
        PsSpec::TwoStep { subsheaf, weights } => format!("two_step:{subsheaf}:{},{}", weights[0], weights[1]),
        PsSpec::Diagonal { weights } => {
            format!("diag:{}", weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","))
        }
        PsSpec::Matrix { path } => format!("matrix:{path}"),
    }
}

/// "O(d)" → d.
pub fn parse_line_label(s: &str) -> Result<i64> {
    let bad = || BmlError::config("ps.subsheaf", format!("expected O(d), got `{s}`"));
    let inner = s.trim().strip_prefix("O(").and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
    inner.trim().parse().map_err(|_| bad())
}

/// A resolved 1-PS with its exact filtration when one is available.
#[derive(Debug, Clone)]
pub struct ResolvedPs {
    pub zeta: OnePS,
    pub filtration: Option<FiltrationSpec>,
    /// Factor the supplied weights were divided by to reach operator norm ≤ 1.
    pub scale: Rat,
}

fn normalize(ws: &[Rat]) -> (Vec<Rat>, Rat) {
    let m = crate::exact::max_abs(ws);
    let scale = if m > Rat::from_integer(1.into()) { m } else { Rat::from_integer(1.into()) };
    (ws.iter().map(|w| w / &scale).collect(), scale)
}

/// Filtration of a 1-PS with rational cluster weights, ranks read off numerically.
pub fn numeric_filtration(basis: &SectionBasis, zeta: &OnePS, weights: &[Rat], seed: u64) -> Result<FiltrationSpec> {
    let pts = generic_points(basis.space().dim(), 64, seed);
    let wf = weight_filtration(basis, zeta, &pts)?;
    let ambient = basis.bundle.sheaf();
    let nu = weights.len();
    let steps = (0..nu)
        .map(|i| {
            if i + 1 == nu {
                ambient.clone()
            } else {
                SheafData::from_table(wf.ranks[i] as u32, None, BTreeMap::from([(basis.level, wf.v_dims[i] as u64)]), basis.space())
            }
        })
        .collect();
    FiltrationSpec::new(weights.to_vec(), steps, wf.v_dims.iter().map(|&v| v as u64).collect(), basis.level)
}

fn distinct_desc(ws: &[Rat]) -> Vec<Rat> {
    let mut d = ws.to_vec();
    d.sort_by(|a, b| b.cmp(a));
    d.dedup();
    d
}

pub fn resolve_ps(spec: &PsSpec, basis: &SectionBasis, seed: u64) -> Result<ResolvedPs> {
    let n = basis.n();
    let to_f = |r: &Rat| crate::stability::rat_to_f64(r);
    match spec {
        PsSpec::Trivial => Ok(ResolvedPs {
            zeta: OnePS::new(CMat::zeros(n, n))?,
            filtration: Some(FiltrationSpec::trivial(basis.bundle.sheaf(), basis.level)?),
            scale: Rat::from_integer(1.into()),
        }),
        PsSpec::TwoStep { subsheaf, weights } => {
            let d = parse_line_label(subsheaf)?;
            let BundleKind::SplitP1 { degrees } = &basis.bundle else {
                return Err(BmlError::config("ps", "two_step needs a split bundle"));
            };
            let i = degrees
                .iter()
                .position(|&x| x == d)
                .ok_or_else(|| BmlError::config("ps.subsheaf", format!("{subsheaf} is not a summand")))?;
            let (w, scale) = normalize(&[weights[0].0.clone(), weights[1].0.clone()]);
            let filt = FiltrationSpec::two_step(SheafData::line_p1(d), basis.bundle.sheaf(), (w[0].clone(), w[1].clone()), basis.level)
                .map_err(|e| BmlError::config("ps.weights", e.to_string()))?;
            let zeta = OnePS::two_step(n, basis.summand_rows(i), to_f(&w[0]), to_f(&w[1]))?;
            Ok(ResolvedPs { zeta, filtration: Some(filt), scale })
        }
        PsSpec::Diagonal { weights } => {
            if weights.len() != n {
                return Err(BmlError::config("ps.weights", format!("{} weights for N = {n}", weights.len())));
            }
            let raw: Vec<Rat> = weights.iter().map(|w| w.0.clone()).collect();
            let (w, scale) = normalize(&raw);
            let zeta = OnePS::diagonal(&w.iter().map(to_f).collect::<Vec<_>>())?;
            let filtration = numeric_filtration(basis, &zeta, &distinct_desc(&w), seed).ok();
            Ok(ResolvedPs { zeta, filtration, scale })
        }
        PsSpec::Matrix { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| BmlError::config("ps.path", e.to_string()))?;
            let m = parse_zeta_text(&text)?;
            if m.nrows() != n {
                return Err(BmlError::config("ps", format!("matrix is {}x{}, N = {n}", m.nrows(), m.nrows())));
            }
            let zeta = OnePS::new(m)?;
            let filtration = crate::stability::rationalize_weights(&zeta.weights, 64)
                .ok()
                .filter(|r| r.iter().zip(&zeta.weights).all(|(a, b)| (to_f(a) - b).abs() < 1e-9))
                .and_then(|r| numeric_filtration(basis, &zeta, &r, seed).ok());
            Ok(ResolvedPs { zeta, filtration, scale: Rat::from_integer(1.into()) })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Verify,
    Slope,
    Mna,
    Asymptote,
    Balance,
    Subgeodesic,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Verify => "verify",
            ExperimentKind::Slope => "slope",
            ExperimentKind::Mna => "mna",
            ExperimentKind::Asymptote => "asymptote",
            ExperimentKind::Balance => "balance",
            ExperimentKind::Subgeodesic => "subgeodesic",
        }
    }
}

fn d_t_end() -> f64 {
    15.0
}
fn d_samples() -> usize {
    31
}
fn d_n_path() -> usize {
    16
}
fn d_tol() -> f64 {
    1e-10
}
fn d_max_iter() -> usize {
    200
}
fn d_fd_step() -> f64 {
    1e-3
}
fn d_draws() -> usize {
    200
}
fn d_bundle() -> BundleKind {
    BundleKind::SplitP1 { degrees: vec![0, 2] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "d_bundle")]
    pub bundle: BundleKind,
    /// Working level k; defaults to k₀ of the bundle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ps: Option<PsSpec>,
    #[serde(default = "d_t_end")]
    pub t_end: f64,
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_n_path")]
    pub n_path: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default = "d_fd_step")]
    pub fd_step: f64,
    #[serde(default = "d_draws")]
    pub draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        serde_json::from_value(serde_json::json!({ "experiment": experiment })).expect("defaults")
    }

    pub fn level(&self) -> Result<i64> {
        match self.level {
            Some(k) => Ok(k),
            None => k0_level(&self.bundle.sheaf()),
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid.unwrap_or_else(|| GridSpec::default_for(self.bundle.space()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, f: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(BmlError::config(f, "must be positive and finite"))
            }
        };
        positive(self.t_end, "t_end")?;
        positive(self.tol, "tol")?;
        positive(self.fd_step, "fd_step")?;
        if self.samples < 2 {
            return Err(BmlError::config("samples", "need at least 2"));
        }
        if self.n_path == 0 || self.max_iter == 0 || self.draws == 0 {
            return Err(BmlError::config("n_path/max_iter/draws", "must be positive"));
        }
        if let BundleKind::SplitP1 { degrees } = &self.bundle {
            if degrees.is_empty() || degrees.len() > 8 || degrees.iter().any(|d| !(-64..=64).contains(d)) {
                return Err(BmlError::config("bundle.degrees", "1 to 8 summands with |degree| <= 64"));
            }
        }
        let grid = self.grid();
        if grid.space() != self.bundle.space() {
            return Err(BmlError::config("grid", "grid space does not match the bundle"));
        }
        let (a, b) = match grid {
            GridSpec::P1 { n_radial, n_angular } => (n_radial, n_angular),
            GridSpec::P2 { n_simplex, n_angular } => (n_simplex, n_angular),
        };
        if a == 0 || b == 0 || a > 512 || b > 512 {
            return Err(BmlError::config("grid", "resolutions must lie in 1..=512"));
        }
        let reg = regularity_catalog(&self.bundle.sheaf())?;
        let k = self.level()?;
        if k < reg || k > 64 {
            return Err(BmlError::config("level", format!("level {k} outside [{reg}, 64]")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

pub fn parse_config(data: &[u8]) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_slice(data).map_err(|e| json_err("config", e))?;
    cfg.validate()?;
    Ok(cfg)
}

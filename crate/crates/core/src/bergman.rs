//! Fubini–Study metrics h = Q*HQ, Bergman one-parameter subgroups and the
//! renormalised limits and subgeodesic operators attached to them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{numeric_column_rank, CMat, MetricField, SampledBasis, SectionBasis, C};
use crate::error::{BmlError, Result};

pub const CLUSTER_TOL: f64 = 1e-9;
pub const RANK_TOL: f64 = 1e-8;
pub const PIVOT_TOL: f64 = 1e-8;

fn c(x: f64) -> C {
    C::new(x, 0.0)
}

fn hermitian_defect(m: &CMat) -> f64 {
    (m - m.adjoint()).norm() / m.norm().max(1.0)
}

/// Eigenvalues and eigenvectors of a hermitian matrix, eigenvalues descending.
pub fn eigh_desc(m: &CMat) -> (Vec<f64>, CMat) {
    let eig = m.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = CMat::from_fn(m.nrows(), m.ncols(), |r, k| eig.eigenvectors[(r, idx[k])]);
    (vals, vecs)
}

/// f(A) for hermitian A via its eigendecomposition.
pub fn hermitian_fn(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let eig = m.clone().symmetric_eigen();
    let d = DVector::from_iterator(m.nrows(), eig.eigenvalues.iter().map(|&x| c(f(x))));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.adjoint()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Identity,
    Explicit,
    ExpGenerator { t: f64 },
}

#[derive(Debug, Clone)]
pub struct HermitianForm {
    pub matrix: CMat,
    pub provenance: Provenance,
    pub det: f64,
}

impl HermitianForm {
    pub fn identity(n: usize) -> Self {
        HermitianForm { matrix: CMat::identity(n, n), provenance: Provenance::Identity, det: 1.0 }
    }

    pub fn from_matrix(m: CMat) -> Result<Self> {
        if !m.is_square() {
            return Err(BmlError::InvalidGenerator("hermitian form must be square".into()));
        }
        if hermitian_defect(&m) > 1e-13 {
            return Err(BmlError::InvalidGenerator("matrix is not hermitian".into()));
        }
        let m = (&m + m.adjoint()) * c(0.5);
        let (vals, _) = eigh_desc(&m);
        let min = vals.last().copied().unwrap_or(0.0);
        if min.is_nan() || min <= 0.0 {
            return Err(BmlError::DegenerateMetric { index: 0, min_eig: min });
        }
        let det = vals.iter().product();
        Ok(HermitianForm { matrix: m, provenance: Provenance::Explicit, det })
    }

    /// H = e^{2ζt}.
    pub fn exp_generator(zeta: &OnePS, t: f64) -> Self {
        HermitianForm {
            matrix: zeta.exp(2.0 * t),
            provenance: Provenance::ExpGenerator { t },
            det: zeta.eigenvalues.iter().map(|w| (2.0 * w * t).exp()).product(),
        }
    }
}

/// A Bergman 1-PS generator with clustered weights w₁ > … > w_ν.
#[derive(Debug, Clone)]
pub struct OnePS {
    pub zeta: CMat,
    /// Raw eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors, columns in the order of `eigenvalues`.
    pub eigenvectors: CMat,
    pub weights: Vec<f64>,
    pub multiplicities: Vec<usize>,
}

impl OnePS {
    pub fn new(zeta: CMat) -> Result<Self> {
        let n = zeta.nrows();
        if !zeta.is_square() || n == 0 {
            return Err(BmlError::InvalidGenerator("generator must be a non-empty square matrix".into()));
        }
        if zeta.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
            return Err(BmlError::InvalidGenerator("non-finite entry".into()));
        }
        if hermitian_defect(&zeta) > 1e-12 {
            return Err(BmlError::InvalidGenerator("generator is not hermitian".into()));
        }
        let zeta = (&zeta + zeta.adjoint()) * c(0.5);
        if zeta.trace().norm() > 1e-12 * n as f64 {
            return Err(BmlError::InvalidGenerator(format!("trace {} is not zero", zeta.trace().re)));
        }
        let (eigenvalues, eigenvectors) = eigh_desc(&zeta);
        let norm = eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if norm > 1.0 + 1e-12 {
            return Err(BmlError::InvalidGenerator(format!("operator norm {norm} exceeds 1")));
        }
        let mut weights: Vec<f64> = Vec::new();
        let mut multiplicities: Vec<usize> = Vec::new();
        for &e in &eigenvalues {
            match weights.last() {
                Some(&w) if (w - e).abs() <= CLUSTER_TOL => *multiplicities.last_mut().unwrap() += 1,
                _ => {
                    weights.push(e);
                    multiplicities.push(1);
                }
            }
        }
        // cluster representative: mean of its members
        let mut start = 0;
        for (w, &m) in weights.iter_mut().zip(&multiplicities) {
            *w = eigenvalues[start..start + m].iter().sum::<f64>() / m as f64;
            start += m;
        }
        Ok(OnePS { zeta, eigenvalues, eigenvectors, weights, multiplicities })
    }

    pub fn diagonal(weights: &[f64]) -> Result<Self> {
        let d = DVector::from_iterator(weights.len(), weights.iter().map(|&w| c(w)));
        OnePS::new(DMatrix::from_diagonal(&d))
    }

    /// Weight `w_sub` on the rows of `rows`, `w_rest` elsewhere.
    pub fn two_step(n: usize, rows: std::ops::Range<usize>, w_sub: f64, w_rest: f64) -> Result<Self> {
        let w: Vec<f64> = (0..n).map(|i| if rows.contains(&i) { w_sub } else { w_rest }).collect();
        OnePS::diagonal(&w)
    }

    pub fn n(&self) -> usize {
        self.zeta.nrows()
    }

    /// e^{sζ}.
    pub fn exp(&self, s: f64) -> CMat {
        let d = DVector::from_iterator(self.n(), self.eigenvalues.iter().map(|&w| c((s * w).exp())));
        &self.eigenvectors * DMatrix::from_diagonal(&d) * self.eigenvectors.adjoint()
    }

    pub fn is_trivial(&self) -> bool {
        self.weights.len() == 1
    }

    /// Orthonormal basis of V_{≤−w_i} (eigenvectors of weight ≥ w_i), i 0-based.
    pub fn flag_space(&self, i: usize) -> CMat {
        let m: usize = self.multiplicities[..=i].iter().sum();
        self.eigenvectors.columns(0, m).into_owned()
    }

    /// Eigenvectors of the i-th cluster alone.
    pub fn cluster(&self, i: usize) -> CMat {
        let start: usize = self.multiplicities[..i].iter().sum();
        self.eigenvectors.columns(start, self.multiplicities[i]).into_owned()
    }

    /// Spectral spread w₁ − w_ν.
    pub fn spread(&self) -> f64 {
        self.weights[0] - self.weights[self.weights.len() - 1]
    }
}

/// h = Q*HQ at one point.
pub fn fs_at(q: &CMat, h: &CMat) -> CMat {
    q.adjoint() * h * q
}

pub fn fs_metric(sampled: &SampledBasis, form: &HermitianForm) -> Result<MetricField> {
    let values: Vec<CMat> = sampled.q.par_iter().map(|q| fs_at(q, &form.matrix)).collect();
    for (i, h) in values.iter().enumerate() {
        let min = h.clone().symmetric_eigenvalues().min();
        if !(min >= 1e-300) {
            return Err(BmlError::DegenerateMetric { index: i, min_eig: min });
        }
    }
    Ok(MetricField { values })
}

pub fn bergman_path(sampled: &SampledBasis, zeta: &OnePS, t: f64) -> Result<MetricField> {
    if t < 0.0 {
        return Err(BmlError::config("t", "Bergman path is evaluated for t >= 0"));
    }
    fs_metric(sampled, &HermitianForm::exp_generator(zeta, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFiltration {
    /// Generic rank of E_{≤−w_i}, per weight cluster.
    pub ranks: Vec<usize>,
    /// dim V_{≤−w_i}.
    pub v_dims: Vec<usize>,
    /// 0-based indices i with rk(E_{−w_i}) > 0.
    pub surviving: Vec<usize>,
}

/// Numeric rank with singular values below tol·(largest) treated as zero.
pub fn numeric_rank(m: &CMat, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * top).count()
}

pub fn weight_filtration(basis: &SectionBasis, zeta: &OnePS, points: &[[C; 2]]) -> Result<WeightFiltration> {
    if points.len() < 20 {
        return Err(BmlError::InsufficientSamples { needed: 20, got: points.len() });
    }
    if zeta.n() != basis.n() {
        return Err(BmlError::InvalidGenerator(format!("generator is {}x{}, basis has N = {}", zeta.n(), zeta.n(), basis.n())));
    }
    let qs: Vec<CMat> = points.iter().map(|z| basis.q_unchecked(z)).collect();
    let mut ranks = Vec::new();
    let mut v_dims = Vec::new();
    for i in 0..zeta.weights.len() {
        let v = zeta.flag_space(i);
        let per_point: Vec<usize> = qs.iter().map(|q| numeric_rank(&(q.transpose() * &v), RANK_TOL)).collect();
        let max = *per_point.iter().max().unwrap();
        let below = per_point.iter().filter(|&&r| r < max).count();
        if 2 * below > per_point.len() {
            return Err(BmlError::DegenerateSamples(format!(
                "rank of E_(<=-w_{}) is below its maximum {max} at {below} of {} points",
                i + 1,
                per_point.len()
            )));
        }
        ranks.push(max);
        v_dims.push(v.ncols());
    }
    let surviving = (0..ranks.len()).filter(|&i| ranks[i] > if i == 0 { 0 } else { ranks[i - 1] }).collect();
    Ok(WeightFiltration { ranks, v_dims, surviving })
}

/// Deterministic generic sample points in the unit polydisc scaled by 2.
pub fn generic_points(dim: usize, count: usize, seed: u64) -> Vec<[C; 2]> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut z = [C::new(0.0, 0.0); 2];
            for zl in z.iter_mut().take(dim) {
                *zl = C::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            }
            z
        })
        .collect()
}

/// Flag-adapted frame Ξ at one point: columns grouped by weight cluster, and
/// the weight of each column. Lower-weight columns annihilate the images of the
/// higher flag pieces (v*Qη = 0), which is what makes e^{−wt}·h·e^{−wt} bounded.
/// Returns None when a pivot falls below the threshold (point outside X^reg).
pub fn adapted_frame(q: &CMat, zeta: &OnePS, filtration: &WeightFiltration) -> Option<(CMat, Vec<f64>)> {
    let r = q.ncols();
    let mut frame: Vec<DVector<C>> = Vec::with_capacity(r);
    let mut weights = Vec::with_capacity(r);
    for (i, &w) in zeta.weights.iter().enumerate() {
        let imgs = q.adjoint() * zeta.cluster(i);
        for col in imgs.column_iter() {
            if frame.len() == filtration.ranks[i] {
                break;
            }
            let mut v = col.into_owned();
            let norm0 = v.norm();
            if norm0 == 0.0 {
                continue;
            }
            for _ in 0..2 {
                for f in &frame {
                    let proj = f.dotc(&v);
                    v -= f * proj;
                }
            }
            let nv = v.norm();
            if nv > PIVOT_TOL * norm0 {
                frame.push(v / c(nv));
                weights.push(w);
            }
        }
        if frame.len() != filtration.ranks[i] {
            return None;
        }
    }
    if frame.len() != r {
        return None;
    }
    Some((CMat::from_columns(&frame), weights))
}

/// ĥ = e^{−wt} Ξ* h Ξ e^{−wt} per node; None marks masked nodes.
#[derive(Debug, Clone)]
pub struct RenormalizedField {
    pub values: Vec<Option<CMat>>,
}

impl RenormalizedField {
    pub fn unmasked(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

pub fn renormalized_at(q: &CMat, zeta: &OnePS, filtration: &WeightFiltration, t: f64) -> Option<CMat> {
    let (xi, w) = adapted_frame(q, zeta, filtration)?;
    let h = fs_at(q, &zeta.exp(2.0 * t));
    let d = DMatrix::from_diagonal(&DVector::from_iterator(w.len(), w.iter().map(|&wa| c((-wa * t).exp()))));
    Some(&d * xi.adjoint() * h * &xi * &d)
}

pub fn renormalized_metric(sampled: &SampledBasis, zeta: &OnePS, filtration: &WeightFiltration, t: f64) -> RenormalizedField {
    RenormalizedField { values: sampled.q.par_iter().map(|q| renormalized_at(q, zeta, filtration, t)).collect() }
}

fn rel_commutator(a: &CMat, b: &CMat) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        (a * b - b * a).norm() / denom
    }
}

/// Max normalised commutator among Q*σσQ, Q*σuσQ, Q*σu²σQ (σ hermitian).
pub fn commutator_residual(q: &CMat, sigma: &CMat, u: &CMat) -> f64 {
    let sq = sigma * q;
    let a = sq.adjoint() * &sq;
    let b = sq.adjoint() * u * &sq;
    let cc = sq.adjoint() * u * u * &sq;
    rel_commutator(&a, &b).max(rel_commutator(&a, &cc)).max(rel_commutator(&b, &cc))
}

#[derive(Debug, Clone)]
pub struct SubgeodesicReport {
    /// Central difference of h⁻¹∂_t h.
    pub lhs: CMat,
    /// F*F.
    pub rhs: CMat,
    /// ‖lhs − rhs‖_F.
    pub residual: f64,
    /// Analytic ∂_t(h⁻¹∂_t h) = h⁻¹ḧ − (h⁻¹ḣ)².
    pub exact_lhs: CMat,
    /// ‖lhs − exact_lhs‖_F.
    pub fd_error: f64,
    /// ‖h^{1/2}·exact_lhs·h^{−1/2} − rhs‖_F, the frame-corrected identity.
    pub conjugated_residual: f64,
    /// FD error at fd_step over FD error at fd_step/2 (≈ 4).
    pub richardson_ratio: f64,
    pub min_eig_rhs: f64,
}

struct PathDerivs {
    h: CMat,
    hd: CMat,
    hdd: CMat,
}

fn path_derivs(q: &CMat, zeta: &OnePS, t: f64) -> PathDerivs {
    let sq = zeta.exp(t) * q;
    let u = &zeta.zeta * c(2.0);
    PathDerivs { h: sq.adjoint() * &sq, hd: sq.adjoint() * &u * &sq, hdd: sq.adjoint() * &u * &u * &sq }
}

fn log_derivative(q: &CMat, zeta: &OnePS, t: f64) -> Result<CMat> {
    let d = path_derivs(q, zeta, t);
    let hinv = d.h.try_inverse().ok_or(BmlError::DegenerateMetric { index: 0, min_eig: 0.0 })?;
    Ok(hinv * d.hd)
}

pub fn subgeodesic_residual(q: &CMat, zeta: &OnePS, t: f64, fd_step: f64) -> Result<SubgeodesicReport> {
    if !(fd_step > 0.0) {
        return Err(BmlError::StepTooLarge(format!("fd_step must be positive, got {fd_step}")));
    }
    let d = path_derivs(q, zeta, t);
    let hinv = d.h.clone().try_inverse().ok_or(BmlError::DegenerateMetric { index: 0, min_eig: 0.0 })?;
    let g = &hinv * &d.hd;
    let exact_lhs = &hinv * &d.hdd - &g * &g;

    let fd = |s: f64| -> Result<CMat> { Ok((log_derivative(q, zeta, t + s)? - log_derivative(q, zeta, t - s)?) / c(2.0 * s)) };
    let lhs = fd(fd_step)?;
    let half = fd(0.5 * fd_step)?;
    let e1 = (&lhs - &exact_lhs).norm();
    let e2 = (&half - &exact_lhs).norm();
    let scale = 1.0 + exact_lhs.norm();
    let richardson_ratio = if e2 > 0.0 { e1 / e2 } else { f64::INFINITY };
    // Below ~1e-7·scale the FD error is rounding noise and the ratio is meaningless.
    if e1 > 1e-7 * scale && richardson_ratio < 3.0 {
        return Err(BmlError::StepTooLarge(format!(
            "fd_step {fd_step}: Richardson ratio {richardson_ratio:.3} (expected about 4)"
        )));
    }

    let sigma = zeta.exp(t);
    let u = &zeta.zeta * c(2.0);
    let h_isqrt = hermitian_fn(&d.h, |x| x.powf(-0.5));
    let h_sqrt = hermitian_fn(&d.h, f64::sqrt);
    let f = (&u * &sigma * q - &sigma * q * &g) * &h_isqrt;
    let rhs = f.adjoint() * &f;
    let residual = (&lhs - &rhs).norm();
    let conjugated_residual = (&h_sqrt * &exact_lhs * &h_isqrt - &rhs).norm();
    let rhs_h = (&rhs + rhs.adjoint()) * c(0.5);
    let min_eig_rhs = rhs_h.symmetric_eigenvalues().min();
    Ok(SubgeodesicReport {
        lhs,
        rhs,
        residual,
        exact_lhs,
        fd_error: e1,
        conjugated_residual,
        richardson_ratio,
        min_eig_rhs,
    })
}

/// Whether Q has full rank r at a point (global generation check).
pub fn full_rank(q: &CMat) -> bool {
    numeric_column_rank(q, 1e-10) == q.ncols()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{h_ref, BundleKind};
    use crate::geometry::build_grid_p1;

    fn raw(bundle: BundleKind, k: i64) -> SectionBasis {
        SectionBasis::new(&bundle, k, false).unwrap()
    }

    #[test]
    fn onep_validation() {
        assert!(OnePS::diagonal(&[1.0, 1.0]).is_err());
        assert!(OnePS::diagonal(&[2.0, -2.0]).is_err());
        let z = OnePS::diagonal(&[-1.0, 1.0, 1.0 - 1e-11, -1.0 + 1e-11]).unwrap();
        assert_eq!(z.multiplicities, vec![2, 2]);
        assert!((z.weights[0] - (1.0 - 5e-12)).abs() < 1e-15);
        let mut m = CMat::zeros(2, 2);
        m[(0, 1)] = C::new(0.0, 1.0);
        assert!(OnePS::new(m.clone()).is_err());
        m[(1, 0)] = C::new(0.0, -1.0);
        let z = OnePS::new(m).unwrap();
        assert_eq!(z.weights, vec![1.0, -1.0]);
    }

    #[test]
    fn fs_metric_examples() {
        let grid = build_grid_p1(8, 8).unwrap();
        let b = raw(BundleKind::SplitP1 { degrees: vec![0] }, 1);
        let s = b.sample(&grid).unwrap();
        let h0 = fs_metric(&s, &HermitianForm::identity(2)).unwrap();
        let hr = h_ref(&s);
        for (a, b) in h0.values.iter().zip(&hr.values) {
            assert_eq!(a, b);
        }
        let zeta = OnePS::diagonal(&[1.0, -1.0]).unwrap();
        let h = bergman_path(&s, &zeta, 1.0).unwrap();
        let e2 = 1f64.exp().powi(2);
        for (nd, v) in grid.nodes.iter().zip(&h.values) {
            let expect = e2 + nd.norm_sqr() / e2;
            assert!((v[(0, 0)].re - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn unitary_congruence_invariance() {
        let grid = build_grid_p1(6, 6).unwrap();
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 1, true).unwrap();
        let s = b.sample(&grid).unwrap();
        let n = b.n();
        let mut g = CMat::from_fn(n, n, |i, j| C::new(((i * 7 + j * 3) % 5) as f64 - 2.0, ((i + 2 * j) % 3) as f64 - 1.0));
        g = &g + g.adjoint();
        let unitary = {
            let eig = g.symmetric_eigen();
            eig.eigenvectors
        };
        let hmat = hermitian_fn(&(CMat::identity(n, n) + CMat::from_fn(n, n, |i, j| c(0.1 / (1.0 + (i + j) as f64)))), |x| x);
        let h1 = fs_metric(&s, &HermitianForm::from_matrix(hmat.clone()).unwrap()).unwrap();
        // rotate the basis: Q' = UᵀQ and H' = UᵀH conj(U) give Q'*H'Q' = Q*HQ
        let rot = SampledBasis { q: s.q.iter().map(|q| unitary.transpose() * q).collect(), dq: None };
        let hrot = unitary.map(|x| x.conj()).adjoint() * &hmat * unitary.map(|x| x.conj());
        let h2 = fs_metric(&rot, &HermitianForm::from_matrix((&hrot + hrot.adjoint()) * c(0.5)).unwrap()).unwrap();
        for (a, b) in h1.values.iter().zip(&h2.values) {
            let (da, db) = (a.determinant().re.ln(), b.determinant().re.ln());
            assert!((da - db).abs() < 1e-12);
        }
    }

    #[test]
    fn pairing_symmetry_for_block_scalar() {
        let grid = build_grid_p1(6, 6).unwrap();
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
        let s = b.sample(&grid).unwrap();
        let zeta = OnePS::two_step(10, b.summand_rows(1), 2.0 / 3.0, -1.0).unwrap();
        let neg = OnePS::new(-zeta.zeta.clone()).unwrap();
        let hp = bergman_path(&s, &zeta, 1.3).unwrap();
        let hm = bergman_path(&s, &neg, 1.3).unwrap();
        let hr = h_ref(&s);
        for i in 0..hr.values.len() {
            let lhs = hp.values[i].determinant().re * hm.values[i].determinant().re;
            let rhs = hr.values[i].determinant().re.powi(2);
            assert!((lhs / rhs - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn filtration_examples() {
        let pts = generic_points(1, 24, 3);
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
        let zeta = OnePS::two_step(10, b.summand_rows(1), 2.0 / 3.0, -1.0).unwrap();
        let f = weight_filtration(&b, &zeta, &pts).unwrap();
        assert_eq!(f.ranks, vec![1, 2]);
        assert_eq!(f.v_dims, vec![6, 10]);
        assert_eq!(f.surviving, vec![0, 1]);

        let o = raw(BundleKind::SplitP1 { degrees: vec![0] }, 1);
        let f = weight_filtration(&o, &OnePS::diagonal(&[1.0, -1.0]).unwrap(), &pts).unwrap();
        assert_eq!(f.ranks, vec![1, 1]);
        assert_eq!(f.surviving, vec![0]);

        let f = weight_filtration(&o, &OnePS::diagonal(&[0.0, 0.0]).unwrap(), &pts).unwrap();
        assert_eq!(f.ranks, vec![1]);
        assert!(matches!(weight_filtration(&o, &OnePS::diagonal(&[0.0, 0.0]).unwrap(), &pts[..5]), Err(BmlError::InsufficientSamples { .. })));
    }

    #[test]
    fn renormalized_limit_is_cauchy() {
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
        // a non-block generator: rotate the two-step weights by a fixed unitary
        // mixing the summands
        let n = 10;
        let mut gen = CMat::from_fn(n, n, |i, j| c(((i * 3 + j * 5) % 7) as f64 - 3.0));
        gen = &gen + gen.transpose();
        let u = gen.symmetric_eigen().eigenvectors;
        let base = OnePS::two_step(n, b.summand_rows(1), 2.0 / 3.0, -1.0).unwrap();
        let zeta = OnePS::new(&u * &base.zeta * u.adjoint()).unwrap();
        let pts = generic_points(1, 24, 9);
        let f = weight_filtration(&b, &zeta, &pts).unwrap();
        let q = b.q_unchecked(&[C::new(0.3, 0.2), C::new(0.0, 0.0)]);
        let hs: Vec<CMat> = [2.0, 4.0, 8.0, 16.0].iter().map(|&t| renormalized_at(&q, &zeta, &f, t).unwrap()).collect();
        let d: Vec<f64> = hs.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect();
        assert!(d[1] < 0.5 * d[0] && d[2] < 0.5 * d[1], "{d:?}");
        let min = hs[3].clone().symmetric_eigenvalues().min();
        assert!(min > 1e-6);
    }

    #[test]
    fn commutators() {
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![1] }, 1, true).unwrap();
        let zeta = OnePS::diagonal(&[0.5, 0.0, -0.5]).unwrap();
        let q = b.q_unchecked(&[C::new(0.3, 0.1), c(0.0)]);
        assert_eq!(commutator_residual(&q, &zeta.exp(1.0), &(&zeta.zeta * c(2.0))), 0.0);

        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
        let zeta = OnePS::two_step(10, b.summand_rows(1), 2.0 / 3.0, -1.0).unwrap();
        let q = b.q_unchecked(&[C::new(0.3, 0.1), c(0.0)]);
        assert!(commutator_residual(&q, &zeta.exp(1.0), &(&zeta.zeta * c(2.0))) < 1e-15);
    }

    #[test]
    fn subgeodesic_line_bundle() {
        let b = raw(BundleKind::SplitP1 { degrees: vec![0] }, 1);
        let zeta = OnePS::diagonal(&[1.0, -1.0]).unwrap();
        let z = C::new(0.4, -0.7);
        let q = b.q_unchecked(&[z, c(0.0)]);
        let t = 0.6;
        let rep = subgeodesic_residual(&q, &zeta, t, 1e-3).unwrap();
        let (a, bb) = (1.0, z.norm_sqr());
        let (p, m) = ((2.0 * t).exp() * a, (-2.0 * t).exp() * bb);
        // (log h)'' = 4·Var(w) = 16pm/(p+m)²
        let closed = 16.0 * p * m / (p + m).powi(2);
        assert!((rep.exact_lhs[(0, 0)].re - closed).abs() < 1e-12);
        assert!((rep.rhs[(0, 0)].re - closed).abs() < 1e-12);
        assert!(rep.residual < 1e-5);
        assert!((rep.richardson_ratio - 4.0).abs() < 0.1);
        assert!(rep.min_eig_rhs >= -1e-12);
    }

    #[test]
    fn subgeodesic_geodesic_case_and_step_check() {
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
        let zeta = OnePS::two_step(10, b.summand_rows(1), 2.0 / 3.0, -1.0).unwrap();
        let q = b.q_unchecked(&[C::new(-0.5, 0.9), c(0.0)]);
        let rep = subgeodesic_residual(&q, &zeta, 1.0, 1e-3).unwrap();
        assert!(rep.exact_lhs.norm() < 1e-12);
        assert!(rep.rhs.norm() < 1e-12);

        let o = raw(BundleKind::SplitP1 { degrees: vec![0] }, 1);
        let z = OnePS::diagonal(&[1.0, -1.0]).unwrap();
        let q = o.q_unchecked(&[C::new(0.4, -0.7), c(0.0)]);
        assert!(matches!(subgeodesic_residual(&q, &z, 0.6, 2.0), Err(BmlError::StepTooLarge(_))));
    }
}

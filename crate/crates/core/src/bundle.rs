//! Catalog bundles, bases of H⁰(E(k)) and the evaluation map Q(x).
//!
//! Q(x) is the N×r matrix whose row a is the value of section a at x in the
//! chart frame. For a coefficient vector v the section value is Qᵀv, and
//! h = Q*HQ is a hermitian form on the fibre of E(k)^∨. E is identified with
//! its metric dual throughout, as in h_σ = Q*σ*σQ.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{BmlError, Result};
use crate::exact;
use crate::geometry::{Node, QuadratureGrid};
use crate::stability::{regularity_catalog, SheafData, Space};

pub type C = Complex64;
pub type CMat = DMatrix<Complex64>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BundleKind {
    SplitP1 { degrees: Vec<i64> },
    EulerTp2,
}

impl BundleKind {
    pub fn rank(&self) -> usize {
        match self {
            BundleKind::SplitP1 { degrees } => degrees.len(),
            BundleKind::EulerTp2 => 2,
        }
    }

    pub fn space(&self) -> Space {
        match self {
            BundleKind::SplitP1 { .. } => Space::P1,
            BundleKind::EulerTp2 => Space::P2,
        }
    }

    pub fn sheaf(&self) -> SheafData {
        match self {
            BundleKind::SplitP1 { degrees } => SheafData::split_p1(degrees),
            BundleKind::EulerTp2 => SheafData::tangent_p2(),
        }
    }

    pub fn label(&self) -> String {
        self.sheaf().label
    }
}

/// One raw section: a monomial placed in a frame component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionElement {
    /// Summand index (split) or Euler component c of O(1)³.
    pub component: usize,
    /// Exponents of the homogeneous monomial in Z₀, …, Zₙ.
    pub exponents: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SectionBasis {
    pub bundle: BundleKind,
    pub level: i64,
    pub elements: Vec<SectionElement>,
    /// Row transform applied to the raw monomial basis (L²-orthonormalisation).
    pub transform: Option<CMat>,
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// ∫_{Pⁿ} |z^α|² ρ^p dμ = α! (p − |α|)! / (p + n)! over the moment simplex.
fn fs_moment(alpha: &[u32], p: u32) -> f64 {
    let s: u32 = alpha.iter().sum();
    assert!(p >= s, "moment not integrable");
    let num: f64 = alpha.iter().map(|&a| factorial(a)).product::<f64>() * factorial(p - s);
    num / factorial(p + alpha.len() as u32)
}

/// Holomorphic polynomial in the chart coordinates: exponents → coefficient.
type HPoly = BTreeMap<[u32; 2], C>;

fn hpoly_mul_monomial(p: &HPoly, e: [u32; 2], c: C) -> HPoly {
    p.iter().map(|(k, v)| ([k[0] + e[0], k[1] + e[1]], v * c)).collect()
}

/// Accumulates sign·conj(P)·Q into diagonal moments (torus orthogonality kills
/// mixed monomials).
fn pair_accumulate(acc: &mut HPoly, p: &HPoly, q: &HPoly, sign: f64) {
    for (k, a) in p {
        if let Some(b) = q.get(k) {
            *acc.entry(*k).or_insert(C::new(0.0, 0.0)) += a.conj() * b * sign;
        }
    }
}

/// ∫ Σ_α c_α |z^α|² ρ^p dμ; terms of degree above p must have cancelled.
fn moment_integral(acc: &HPoly, power: u32) -> C {
    acc.iter()
        .filter(|(_, c)| c.norm() > 0.0)
        .map(|(k, c)| c * fs_moment(k, power))
        .sum()
}

impl SectionBasis {
    pub fn new(bundle: &BundleKind, k: i64, orthonormalize: bool) -> Result<Self> {
        let reg = regularity_catalog(&bundle.sheaf())?;
        if k < reg {
            return Err(BmlError::LevelBelowRegularity { level: k, regularity: reg });
        }
        let elements = match bundle {
            BundleKind::SplitP1 { degrees } => degrees
                .iter()
                .enumerate()
                .flat_map(|(i, &d)| {
                    exact::monomials(2, d + k).into_iter().map(move |e| SectionElement { component: i, exponents: e })
                })
                .collect(),
            BundleKind::EulerTp2 => euler_elements(k),
        };
        let mut basis = SectionBasis { bundle: bundle.clone(), level: k, elements, transform: None };
        if orthonormalize {
            let gram = basis.invariant_gram();
            let chol = gram.cholesky().ok_or(BmlError::SingularGram)?;
            let linv = chol.l().try_inverse().ok_or(BmlError::SingularGram)?;
            basis.transform = Some(linv.map(|x| x.conj()));
        }
        Ok(basis)
    }

    pub fn n(&self) -> usize {
        self.elements.len()
    }

    pub fn rank(&self) -> usize {
        self.bundle.rank()
    }

    pub fn space(&self) -> Space {
        self.bundle.space()
    }

    /// Rows belonging to summand i of a split bundle.
    pub fn summand_rows(&self, i: usize) -> Range<usize> {
        let lo = self.elements.iter().position(|e| e.component == i).unwrap_or(0);
        let hi = self.elements.iter().rposition(|e| e.component == i).map_or(lo, |p| p + 1);
        lo..hi
    }

    /// L² Gram matrix ∫ s_a* G s_b dμ of the raw basis, for the SU(n+1)-invariant
    /// metric G on E(k): FS powers per summand, the quotient FS metric for T(k).
    pub fn invariant_gram(&self) -> CMat {
        let n = self.n();
        match &self.bundle {
            BundleKind::SplitP1 { .. } => CMat::from_fn(n, n, |a, b| {
                let (ea, eb) = (&self.elements[a], &self.elements[b]);
                if a != b {
                    return C::new(0.0, 0.0);
                }
                let d: u32 = ea.exponents.iter().sum();
                debug_assert_eq!(ea, eb);
                C::new(fs_moment(&[ea.exponents[1]], d), 0.0)
            }),
            BundleKind::EulerTp2 => {
                // G = ρ^{k+1}(I − ρ zz*); with 1 = ρ(1 + |z|²) the form becomes
                // ρ^{k+2}[(1 + |z|²) s_a*s_b − (s_a*z)(z*s_b)].
                let p = (self.level + 2) as u32;
                let vals: Vec<[HPoly; 2]> = self.elements.iter().map(|e| euler_value_poly(e)).collect();
                CMat::from_fn(n, n, |a, b| {
                    let mut acc = HPoly::new();
                    for i in 0..2 {
                        pair_accumulate(&mut acc, &vals[a][i], &vals[b][i], 1.0);
                        for l in 0..2 {
                            let mut e = [0, 0];
                            e[l] = 1;
                            let pa = hpoly_mul_monomial(&vals[a][i], e, C::new(1.0, 0.0));
                            let pb = hpoly_mul_monomial(&vals[b][i], e, C::new(1.0, 0.0));
                            pair_accumulate(&mut acc, &pa, &pb, 1.0);
                        }
                    }
                    // conj(s_a,i) z_i z̄_j s_b,j = conj(s_a,i z_j)·(s_b,j z_i)
                    for i in 0..2 {
                        for j in 0..2 {
                            let (mut ei, mut ej) = ([0, 0], [0, 0]);
                            ei[i] = 1;
                            ej[j] = 1;
                            let pa = hpoly_mul_monomial(&vals[a][i], ej, C::new(1.0, 0.0));
                            let pb = hpoly_mul_monomial(&vals[b][j], ei, C::new(1.0, 0.0));
                            pair_accumulate(&mut acc, &pa, &pb, -1.0);
                        }
                    }
                    moment_integral(&acc, p)
                })
            }
        }
    }

    /// Raw (untransformed) value of element a and its chart derivatives.
    fn raw_row(&self, e: &SectionElement, z: &[C; 2], out: &mut [C], d_out: &mut [[C; 2]]) {
        let r = out.len();
        out.iter_mut().for_each(|x| *x = C::new(0.0, 0.0));
        d_out.iter_mut().for_each(|x| *x = [C::new(0.0, 0.0); 2]);
        let nz = self.space().dim();
        let (m, dm) = monomial_eval(&e.exponents[1..], z, nz);
        match &self.bundle {
            BundleKind::SplitP1 { .. } => {
                out[e.component] = m;
                d_out[e.component] = dm;
            }
            BundleKind::EulerTp2 => {
                debug_assert_eq!(r, 2);
                match e.component {
                    0 => {
                        for i in 0..2 {
                            out[i] = -z[i] * m;
                            for l in 0..2 {
                                let delta = if l == i { m } else { C::new(0.0, 0.0) };
                                d_out[i][l] = -(z[i] * dm[l] + delta);
                            }
                        }
                    }
                    c => {
                        out[c - 1] = m;
                        d_out[c - 1] = dm;
                    }
                }
            }
        }
    }

    fn eval_raw(&self, z: &[C; 2], with_derivatives: bool) -> (CMat, [CMat; 2]) {
        let (n, r) = (self.n(), self.rank());
        let mut q = CMat::zeros(n, r);
        let mut dq = [CMat::zeros(n, r), CMat::zeros(n, r)];
        let mut row = vec![C::new(0.0, 0.0); r];
        let mut drow = vec![[C::new(0.0, 0.0); 2]; r];
        for (a, e) in self.elements.iter().enumerate() {
            self.raw_row(e, z, &mut row, &mut drow);
            for i in 0..r {
                q[(a, i)] = row[i];
                if with_derivatives {
                    dq[0][(a, i)] = drow[i][0];
                    dq[1][(a, i)] = drow[i][1];
                }
            }
        }
        match &self.transform {
            Some(t) => {
                let q = t * q;
                let dq = if with_derivatives { [t * &dq[0], t * &dq[1]] } else { dq };
                (q, dq)
            }
            None => (q, dq),
        }
    }

    /// Q(x) without the global-generation check.
    pub fn q_unchecked(&self, z: &[C; 2]) -> CMat {
        self.eval_raw(z, false).0
    }

    /// Q(x) and ∂Q/∂z_l (Q is holomorphic in the chart).
    pub fn q_with_derivatives(&self, z: &[C; 2]) -> (CMat, [CMat; 2]) {
        self.eval_raw(z, true)
    }

    /// Q(x), checked to have rank r after column normalisation.
    pub fn evaluate_q(&self, z: &[C; 2]) -> Result<CMat> {
        let q = self.q_unchecked(z);
        let rank = numeric_column_rank(&q, 1e-10);
        if rank < self.rank() {
            return Err(BmlError::RankDeficient { rank, expected: self.rank(), point: format!("{:?}", z) });
        }
        Ok(q)
    }

    /// Evaluate Q at every grid node (no derivatives).
    pub fn sample(&self, grid: &QuadratureGrid) -> Result<SampledBasis> {
        if grid.space() != self.space() {
            return Err(BmlError::config("grid.space", "grid space does not match the bundle"));
        }
        use rayon::prelude::*;
        let q: Vec<CMat> = grid.nodes.par_iter().map(|nd| self.q_unchecked(&nd.z)).collect();
        Ok(SampledBasis { q, dq: None })
    }

    /// Evaluate Q and its chart derivatives at every grid node.
    pub fn sample_with_derivatives(&self, grid: &QuadratureGrid) -> Result<SampledBasis> {
        if grid.space() != self.space() {
            return Err(BmlError::config("grid.space", "grid space does not match the bundle"));
        }
        use rayon::prelude::*;
        let both: Vec<(CMat, [CMat; 2])> = grid.nodes.par_iter().map(|nd| self.q_with_derivatives(&nd.z)).collect();
        let (q, dq) = both.into_iter().unzip();
        Ok(SampledBasis { q, dq: Some(dq) })
    }
}

/// Euler presentation of T(k): triples of degree-(k+1) forms modulo the image
/// of q ↦ (Z₀q, Z₁q, Z₂q). The complement is chosen greedily in exact
/// arithmetic, components 1 and 2 first, so the e₀ part is only used where needed.
fn euler_elements(k: i64) -> Vec<SectionElement> {
    let mons = exact::monomials(3, k + 1);
    let lower = exact::monomials(3, k);
    let m = mons.len();
    let index: BTreeMap<&Vec<u32>, usize> = mons.iter().enumerate().map(|(i, e)| (e, i)).collect();
    let relations: Vec<Vec<exact::Rat>> = lower
        .iter()
        .map(|q| {
            let mut row = vec![exact::Rat::from_integer(0.into()); 3 * m];
            for c in 0..3 {
                let mut e = q.clone();
                e[c] += 1;
                row[c * m + index[&e]] = exact::Rat::from_integer(1.into());
            }
            row
        })
        .collect();
    let order: Vec<usize> = (m..3 * m).chain(0..m).collect();
    let mut chosen = exact::greedy_complement(&relations, 3 * m, &order);
    chosen.sort_unstable();
    chosen.into_iter().map(|i| SectionElement { component: i / m, exponents: mons[i % m].clone() }).collect()
}

/// Frame value of an Euler element as two holomorphic polynomials.
fn euler_value_poly(e: &SectionElement) -> [HPoly; 2] {
    let mono: HPoly = [([e.exponents[1], e.exponents[2]], C::new(1.0, 0.0))].into_iter().collect();
    match e.component {
        0 => [
            hpoly_mul_monomial(&mono, [1, 0], C::new(-1.0, 0.0)),
            hpoly_mul_monomial(&mono, [0, 1], C::new(-1.0, 0.0)),
        ],
        1 => [mono, HPoly::new()],
        _ => [HPoly::new(), mono],
    }
}

fn monomial_eval(exps: &[u32], z: &[C; 2], nz: usize) -> (C, [C; 2]) {
    let mut val = C::new(1.0, 0.0);
    for l in 0..nz {
        val *= z[l].powu(exps[l]);
    }
    let mut d = [C::new(0.0, 0.0); 2];
    for l in 0..nz {
        if exps[l] > 0 {
            let mut t = C::new(exps[l] as f64, 0.0) * z[l].powu(exps[l] - 1);
            for m in 0..nz {
                if m != l {
                    t *= z[m].powu(exps[m]);
                }
            }
            d[l] = t;
        }
    }
    (val, d)
}

/// Rank after normalising columns, by singular values relative to the largest.
pub fn numeric_column_rank(q: &CMat, tol: f64) -> usize {
    let mut m = q.clone();
    for mut col in m.column_iter_mut() {
        let nrm = col.norm();
        if nrm > 0.0 {
            col /= C::new(nrm, 0.0);
        }
    }
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * top).count()
}

/// Q (and optionally ∂Q) cached at every node of a grid.
#[derive(Debug, Clone)]
pub struct SampledBasis {
    pub q: Vec<CMat>,
    pub dq: Option<Vec<[CMat; 2]>>,
}

/// Per-node r×r hermitian matrices.
#[derive(Debug, Clone)]
pub struct MetricField {
    pub values: Vec<CMat>,
}

impl MetricField {
    pub fn min_eigenvalue(&self) -> f64 {
        self.values
            .iter()
            .map(|h| h.clone().symmetric_eigenvalues().min())
            .fold(f64::INFINITY, f64::min)
    }
}

/// h_ref = Q*Q at every node.
pub fn h_ref(sampled: &SampledBasis) -> MetricField {
    MetricField { values: sampled.q.iter().map(|q| q.adjoint() * q).collect() }
}

/// Convenience: chart point of a node.
pub fn node_point(n: &Node) -> [C; 2] {
    n.z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid_p1, build_grid_p2};

    fn c(re: f64) -> C {
        C::new(re, 0.0)
    }

    #[test]
    fn split_dimensions() {
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0] }, 1, false).unwrap();
        assert_eq!(b.n(), 2);
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
        assert_eq!(b.n(), 10);
        assert_eq!(b.summand_rows(0), 0..4);
        assert_eq!(b.summand_rows(1), 4..10);
        assert_eq!(b.n() as u64, b.bundle.sheaf().h0_at(3).unwrap());
    }

    #[test]
    fn euler_dimensions() {
        for k in -1..=3 {
            let b = SectionBasis::new(&BundleKind::EulerTp2, k, false).unwrap();
            assert_eq!(b.n() as u64, SheafData::tangent_p2().h0_at(k).unwrap(), "k = {k}");
        }
        let b = SectionBasis::new(&BundleKind::EulerTp2, 0, true).unwrap();
        assert_eq!(b.n(), 8);
        assert!(matches!(
            SectionBasis::new(&BundleKind::EulerTp2, -2, false),
            Err(BmlError::LevelBelowRegularity { level: -2, regularity: -1 })
        ));
    }

    #[test]
    fn below_regularity() {
        let e = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![1] }, -2, false);
        assert!(matches!(e, Err(BmlError::LevelBelowRegularity { .. })));
    }

    #[test]
    fn q_of_trivial_bundle() {
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0] }, 1, false).unwrap();
        let q = b.evaluate_q(&[c(0.0), c(0.0)]).unwrap();
        assert_eq!(q, CMat::from_column_slice(2, 1, &[c(1.0), c(0.0)]));
        let z = C::new(0.3, -1.2);
        let q = b.evaluate_q(&[z, c(0.0)]).unwrap();
        let h = (q.adjoint() * &q)[(0, 0)];
        assert!((h.re - (1.0 + z.norm_sqr())).abs() < 1e-14);
    }

    #[test]
    fn h_ref_of_o2_raw_basis() {
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![2] }, 0, false).unwrap();
        let z = C::new(0.7, 0.4);
        let q = b.q_unchecked(&[z, c(0.0)]);
        let s = z.norm_sqr();
        assert!(((q.adjoint() * &q)[(0, 0)].re - (1.0 + s + s * s)).abs() < 1e-13);
    }

    #[test]
    fn orthonormal_split_is_binomial() {
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![2] }, 0, true).unwrap();
        let z = C::new(0.7, 0.4);
        let q = b.q_unchecked(&[z, c(0.0)]);
        let s = z.norm_sqr();
        // (d+1) Σ C(d,j)|z|^{2j} = 3(1+|z|²)²
        assert!(((q.adjoint() * &q)[(0, 0)].re - 3.0 * (1.0 + s).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn gram_matches_grid_quadrature() {
        // The closed-form moments against an independent grid integral.
        let b = SectionBasis::new(&BundleKind::EulerTp2, 0, false).unwrap();
        let gram = b.invariant_gram();
        let grid = build_grid_p2(16, 8).unwrap();
        let sampled = b.sample(&grid).unwrap();
        let mut num = CMat::zeros(b.n(), b.n());
        for (i, nd) in grid.nodes.iter().enumerate() {
            let rho = nd.rho;
            let z = nalgebra::DVector::from_vec(vec![nd.z[0], nd.z[1]]);
            let g = (CMat::identity(2, 2) - z.clone() * z.adjoint() * c(rho)) * c(rho);
            let q = &sampled.q[i];
            // Gram_ab = Σ conj(Q_a) G Q_bᵀ
            num += (q.map(|x| x.conj()) * g * q.transpose()) * c(grid.weights[i]);
        }
        assert!((num - gram).norm() < 1e-10);
    }

    #[test]
    fn global_generation_on_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
        for _ in 0..10_000 {
            let z = C::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            b.evaluate_q(&[z, c(0.0)]).unwrap();
        }
        let e = SectionBasis::new(&BundleKind::EulerTp2, 0, true).unwrap();
        for _ in 0..100 {
            let z = [C::new(rng.random_range(-3.0..3.0), rng.random()), C::new(rng.random(), rng.random())];
            assert_eq!(e.evaluate_q(&z).unwrap().ncols(), 2);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let e = SectionBasis::new(&BundleKind::EulerTp2, 1, true).unwrap();
        let z = [C::new(0.4, -0.2), C::new(-0.3, 0.5)];
        let (_, dq) = e.q_with_derivatives(&z);
        let h = 1e-6;
        for l in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[l] += h;
            zm[l] -= h;
            let fd = (e.q_unchecked(&zp) - e.q_unchecked(&zm)) / c(2.0 * h);
            assert!((fd - &dq[l]).norm() < 1e-8);
        }
    }

    #[test]
    fn h_ref_positive_and_block_diagonal() {
        let grid = build_grid_p1(16, 8).unwrap();
        let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
        let h = h_ref(&b.sample(&grid).unwrap());
        assert!(h.min_eigenvalue() > 0.0);
        assert!(h.values.iter().all(|m| m[(0, 1)].norm() == 0.0));
    }
}

//! Donaldson functionals along Bergman paths, curvature densities and slope fits.
//!
//! Sign bookkeeping: h = Q*HQ is the metric on the dual fibre, so
//! `m2_don` = (1/Vol)∫ log det(h h_ref⁻¹) is minus the log-det functional of
//! the induced metric on E. With that, M^Don(E) = M₁(E) + μ(E)·m2_don.

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::bergman::{HermitianForm, OnePS};
use crate::bundle::{CMat, SampledBasis, SectionBasis, C};
use crate::error::{BmlError, Result};
use crate::exact::Rat;
use crate::geometry::QuadratureGrid;
use crate::stability::{mu, rat_to_f64};

fn c(x: f64) -> C {
    C::new(x, 0.0)
}

/// log det of a hermitian positive matrix; NaN when not positive definite.
pub fn logdet(h: &CMat) -> f64 {
    match h.clone().cholesky() {
        Some(ch) => 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.re.ln()).sum::<f64>(),
        None => f64::NAN,
    }
}

/// (1+s)(δ_kj + z̄_k z_j): inverse of the FS Kähler matrix in the chart.
fn inverse_kahler(z: &[C; 2], dim: usize) -> [[C; 2]; 2] {
    let s: f64 = z.iter().take(dim).map(|x| x.norm_sqr()).sum();
    let mut m = [[c(0.0); 2]; 2];
    for k in 0..dim {
        for j in 0..dim {
            let delta = if j == k { 1.0 } else { 0.0 };
            m[k][j] = (z[k].conj() * z[j] + delta) * (1.0 + s);
        }
    }
    m
}

/// Contracted curvature ΛF of E(k) at one point, in the frame of h = Q*HQ.
/// With K_{jk̄} = h⁻¹[(∂_kQ)*H∂_jQ − (∂_kQ)*HQ h⁻¹ Q*H∂_jQ] the density is
/// Σ_{jk} (g⁻¹)_{kj} K_{jk̄}; its integral against dμ is deg E(k).
pub fn curvature_density_at(q: &CMat, dq: &[CMat; 2], hmat: &CMat, z: &[C; 2], dim: usize) -> Option<(CMat, CMat)> {
    let hq = hmat * q;
    let h = q.adjoint() * &hq;
    let hinv = h.clone().try_inverse()?;
    let hdq: Vec<CMat> = (0..dim).map(|j| hmat * &dq[j]).collect();
    // ∂_j h = Q*H∂_jQ
    let dh: Vec<CMat> = (0..dim).map(|j| q.adjoint() * &hdq[j]).collect();
    let minv = inverse_kahler(z, dim);
    let r = q.ncols();
    let mut acc = CMat::zeros(r, r);
    for j in 0..dim {
        for k in 0..dim {
            let term = dq[k].adjoint() * &hdq[j] - dh[k].adjoint() * &hinv * &dh[j];
            acc += term * minv[k][j];
        }
    }
    Some((h, hinv * acc))
}

#[derive(Debug, Clone)]
pub struct CurvatureField {
    pub level: i64,
    pub dim: usize,
    /// ΛF of E(k) per node.
    pub twisted: Vec<CMat>,
}

impl CurvatureField {
    /// ΛF of E itself: the twist by O(k) contributes k·n·I.
    pub fn untwisted(&self, i: usize) -> CMat {
        let r = self.twisted[i].nrows();
        &self.twisted[i] - CMat::identity(r, r) * c((self.level * self.dim as i64) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub t: f64,
    pub m1: f64,
    pub m2: f64,
    pub mdon: f64,
}

/// Cached evaluation data for one bundle level on one grid.
#[derive(Debug, Clone)]
pub struct FunctionalContext {
    pub basis: SectionBasis,
    pub grid: QuadratureGrid,
    pub sampled: SampledBasis,
    pub(crate) ref_logdet: Vec<f64>,
    pub mu: Rat,
}

impl FunctionalContext {
    pub fn new(basis: SectionBasis, grid: QuadratureGrid) -> Result<Self> {
        let sampled = basis.sample_with_derivatives(&grid)?;
        let ref_logdet: Vec<f64> = sampled.q.iter().map(|q| logdet(&(q.adjoint() * q))).collect();
        if let Some(index) = ref_logdet.iter().position(|v| !v.is_finite()) {
            return Err(BmlError::DegenerateMetric { index, min_eig: 0.0 });
        }
        let mu = mu(&basis.bundle.sheaf())?;
        Ok(FunctionalContext { basis, grid, sampled, ref_logdet, mu })
    }

    pub fn dim(&self) -> usize {
        self.basis.space().dim()
    }

    fn dq(&self, i: usize) -> &[CMat; 2] {
        &self.sampled.dq.as_ref().expect("context samples derivatives")[i]
    }

    /// (1/Vol)∫ log det(h_H h_ref⁻¹).
    pub fn m2_don(&self, hmat: &CMat) -> Result<f64> {
        let q = &self.sampled.q;
        let total = self.grid.integrate_indexed(|i| logdet(&(q[i].adjoint() * hmat * &q[i])) - self.ref_logdet[i])?;
        Ok(total / self.grid.vol)
    }

    pub fn m2_form(&self, form: &HermitianForm) -> Result<f64> {
        self.m2_don(&form.matrix)
    }

    pub fn curvature_field(&self, hmat: &CMat) -> Result<CurvatureField> {
        use rayon::prelude::*;
        let dim = self.dim();
        let twisted: Vec<Option<CMat>> = (0..self.grid.len())
            .into_par_iter()
            .map(|i| curvature_density_at(&self.sampled.q[i], self.dq(i), hmat, &self.grid.nodes[i].z, dim).map(|x| x.1))
            .collect();
        let twisted = twisted
            .into_iter()
            .enumerate()
            .map(|(index, v)| v.ok_or(BmlError::DegenerateMetric { index, min_eig: 0.0 }))
            .collect::<Result<Vec<_>>>()?;
        Ok(CurvatureField { level: self.basis.level, dim, twisted })
    }

    /// ∫ tr ΛF dμ of E(k) (twisted) or E.
    pub fn degree(&self, field: &CurvatureField, twisted: bool) -> Result<f64> {
        self.grid.integrate_indexed(|i| {
            let m = if twisted { field.twisted[i].clone() } else { field.untwisted(i) };
            m.trace().re
        })
    }

    /// d/dt M₁(E(k)) = ∫ tr(h⁻¹ḣ·ΛF_h) dμ, where ΛF_h = −(E(k) density).
    pub fn m1_rate(&self, hmat: &CMat, hdot: &CMat) -> Result<f64> {
        let dim = self.dim();
        self.grid.integrate_indexed(|i| {
            let q = &self.sampled.q[i];
            match curvature_density_at(q, self.dq(i), hmat, &self.grid.nodes[i].z, dim) {
                Some((h, dens)) => match h.try_inverse() {
                    Some(hinv) => -(hinv * (q.adjoint() * hdot * q) * dens).trace().re,
                    None => f64::NAN,
                },
                None => f64::NAN,
            }
        })
    }

    /// ∫_a^b of the M₁(E(k)) rate along a path s ↦ (H(s), dH/ds).
    pub fn m1_path_segment<P>(&self, path: &P, a: f64, b: f64, n_path: usize) -> Result<f64>
    where
        P: Fn(f64) -> (CMat, CMat),
    {
        if b == a {
            return Ok(0.0);
        }
        let gl = GaussLegendre::new(n_path).map_err(|e| BmlError::InvalidResolution(e.to_string()))?;
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        let mut acc = 0.0;
        for &(x, w) in gl.as_node_weight_pairs().iter() {
            let (h, hd) = path(mid + half * x);
            acc += w * half * self.m1_rate(&h, &hd)?;
        }
        Ok(acc)
    }

    /// M₁(E) from M₁(E(k)): untwisting by O(k) adds k·n·Vol·m2_don.
    fn untwist_m1(&self, m1_twisted: f64, m2: f64) -> f64 {
        m1_twisted + (self.basis.level * self.dim() as i64) as f64 * self.grid.vol * m2
    }

    pub fn m_don_from(&self, m1: f64, m2: f64) -> f64 {
        m1 + rat_to_f64(&self.mu) * m2
    }

    /// M₁, M₂ and M^Don along the Bergman 1-PS at each of `times` (ascending, ≥ 0),
    /// integrating the M₁ rate interval by interval with n_path nodes each.
    pub fn series(&self, zeta: &OnePS, times: &[f64], n_path: usize) -> Result<Vec<FunctionalSample>> {
        if times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
            return Err(BmlError::config("times", "sample times must be ascending and nonnegative"));
        }
        let u = &zeta.zeta * c(2.0);
        let path = |t: f64| {
            let h = zeta.exp(2.0 * t);
            let hd = &u * &h;
            (h, hd)
        };
        let mut out = Vec::with_capacity(times.len());
        let (mut prev, mut m1k) = (0.0, 0.0);
        for &t in times {
            m1k += self.m1_path_segment(&path, prev, t, n_path)?;
            prev = t;
            let m2 = self.m2_don(&zeta.exp(2.0 * t))?;
            let m1 = self.untwist_m1(m1k, m2);
            out.push(FunctionalSample { t, m1, m2, mdon: self.m_don_from(m1, m2) });
        }
        Ok(out)
    }

    pub fn m1_don(&self, zeta: &OnePS, t_end: f64, n_path: usize) -> Result<f64> {
        Ok(self.series(zeta, &[t_end], n_path)?[0].m1)
    }

    pub fn m_don(&self, zeta: &OnePS, t: f64, n_path: usize) -> Result<f64> {
        Ok(self.series(zeta, &[t], n_path)?[0].mdon)
    }

    /// M₁(E) at the end of a general path s ∈ [0, s_end] starting at H = I.
    pub fn m1_along<P>(&self, path: &P, s_end: f64, n_path: usize) -> Result<f64>
    where
        P: Fn(f64) -> (CMat, CMat),
    {
        let m1k = self.m1_path_segment(path, 0.0, s_end, n_path)?;
        let m2 = self.m2_don(&path(s_end).0)?;
        Ok(self.untwist_m1(m1k, m2))
    }
}

/// ∂_j of a matrix function in the chart by the fourth-order central stencil.
fn fd4<F: Fn(&[C; 2]) -> Option<CMat>>(f: &F, z: &[C; 2], l: usize, step: f64) -> Option<CMat> {
    let shift = |d: C| {
        let mut w = *z;
        w[l] += d;
        w
    };
    let deriv = |dir: C| -> Option<CMat> {
        let d = dir * step;
        let f1 = f(&shift(d))?;
        let f2 = f(&shift(d * 2.0))?;
        let m1 = f(&shift(-d))?;
        let m2 = f(&shift(-d * 2.0))?;
        Some(((f1 - m1) * c(8.0) - (f2 - m2)) / c(12.0 * step))
    };
    let dx = deriv(c(1.0))?;
    let dy = deriv(C::new(0.0, 1.0))?;
    Some((dx - dy * C::new(0.0, 1.0)) * c(0.5))
}

fn fd4_bar<F: Fn(&[C; 2]) -> Option<CMat>>(f: &F, z: &[C; 2], l: usize, step: f64) -> Option<CMat> {
    let shift = |d: C| {
        let mut w = *z;
        w[l] += d;
        w
    };
    let deriv = |dir: C| -> Option<CMat> {
        let d = dir * step;
        Some(((f(&shift(d))? - f(&shift(-d))?) * c(8.0) - (f(&shift(d * 2.0))? - f(&shift(-d * 2.0))?)) / c(12.0 * step))
    };
    let dx = deriv(c(1.0))?;
    let dy = deriv(C::new(0.0, 1.0))?;
    Some((dx + dy * C::new(0.0, 1.0)) * c(0.5))
}

fn density_fd_raw(basis: &SectionBasis, hmat: &CMat, z: &[C; 2], step: f64) -> Option<CMat> {
    let dim = basis.space().dim();
    let h_of = |w: &[C; 2]| {
        let q = basis.q_unchecked(w);
        Some(q.adjoint() * hmat * q)
    };
    let minv = inverse_kahler(z, dim);
    let r = basis.rank();
    let mut acc = CMat::zeros(r, r);
    for j in 0..dim {
        let a_j = |w: &[C; 2]| -> Option<CMat> {
            let h = h_of(w)?;
            Some(h.try_inverse()? * fd4(&h_of, w, j, step)?)
        };
        for k in 0..dim {
            // ∂̄_k(h⁻¹∂_j h) = K_{jk̄}
            acc += fd4_bar(&a_j, z, k, step)? * minv[k][j];
        }
    }
    Some(acc)
}

/// Finite-difference oracle for the E(k) curvature density at one chart point.
/// The step is relative to max(1, |z|); a Richardson comparison against the
/// half step guards against steps that are too large.
pub fn curvature_fd_at(basis: &SectionBasis, hmat: &CMat, z: &[C; 2], step: f64) -> Result<CMat> {
    let scale = z.iter().map(|x| x.norm()).fold(1.0, f64::max);
    let full = density_fd_raw(basis, hmat, z, step * scale).ok_or(BmlError::DegenerateMetric { index: 0, min_eig: 0.0 })?;
    let half = density_fd_raw(basis, hmat, z, 0.5 * step * scale).ok_or(BmlError::DegenerateMetric { index: 0, min_eig: 0.0 })?;
    let diff = (&full - &half).norm();
    if diff > 1e-5 * (1.0 + half.norm()) {
        return Err(BmlError::StepTooLarge(format!("curvature FD changed by {diff:e} when halving step {step}")));
    }
    Ok(half)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub t_min: f64,
    pub slope: f64,
    pub intercept: f64,
    /// RMS residual of the affine fit on the tail.
    pub residual: f64,
    /// Predicted slope as "p/q".
    pub predicted: Option<String>,
    pub relative_error: Option<f64>,
}

pub fn default_t_min(t_end: f64) -> f64 {
    0.6 * t_end
}

/// Least-squares affine fit of M(t) over t ≥ t_min.
pub fn asymptotic_slope_fit(points: &[(f64, f64)], t_min: f64, prediction: Option<&Rat>) -> Result<SlopeFit> {
    let tail: Vec<(f64, f64)> = points.iter().copied().filter(|(t, _)| *t >= t_min).collect();
    if tail.len() < 5 {
        return Err(BmlError::InsufficientSamples { needed: 5, got: tail.len() });
    }
    let n = tail.len() as f64;
    let tm = tail.iter().map(|p| p.0).sum::<f64>() / n;
    let vm = tail.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = tail.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sxy: f64 = tail.iter().map(|p| (p.0 - tm) * (p.1 - vm)).sum();
    if sxx == 0.0 {
        return Err(BmlError::InsufficientSamples { needed: 2, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = vm - slope * tm;
    let residual = (tail.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum::<f64>() / n).sqrt();
    let relative_error = prediction.map(|p| {
        let pv = rat_to_f64(p);
        if pv == 0.0 {
            slope.abs()
        } else {
            (slope - pv).abs() / pv.abs()
        }
    });
    Ok(SlopeFit {
        times: tail.iter().map(|p| p.0).collect(),
        values: tail.iter().map(|p| p.1).collect(),
        t_min,
        slope,
        intercept,
        residual,
        predicted: prediction.map(|p| p.to_string()),
        relative_error,
    })
}

/// Empirical c_k with M^Don(t) ≥ M^NA·t − c_k on the samples.
pub fn coercivity_constant(samples: &[FunctionalSample], m_na: f64) -> f64 {
    samples.iter().map(|s| m_na * s.t - s.mdon).fold(f64::NEG_INFINITY, f64::max)
}

/// Second centred differences of equally spaced values.
pub fn second_differences(values: &[f64]) -> Vec<f64> {
    values.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect()
}

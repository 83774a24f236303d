//! Quadrature on P¹ and P² against the Fubini–Study volume ωⁿ/n!.
//!
//! Both grids live on the affine chart Z₀ ≠ 0. The torus moment map pushes
//! the FS measure forward to the uniform measure on the interval (P¹) or the
//! standard simplex (P²); the angular variables carry the trapezoid rule.
//!
//! Gauss–Legendre nodes are not placed in the moment coordinate directly.
//! Integrands like log det h have log singularities at the boundary of the
//! moment polytope, so each moment coordinate is written as u = I_s(m,m), the
//! regularised incomplete beta function, and Gauss–Legendre runs in s. The
//! Jacobian ∝ s^{m−1}(1−s)^{m−1} flattens the endpoint singularities
//! (m = 4 on P¹, m = 3 on P²).

use gauss_quad::GaussLegendre;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BmlError, Result};
use crate::stability::Space;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    /// Chart coordinates; z[1] = 0 on P¹.
    pub z: [Complex64; 2],
    /// 1/(1 + |z|²), computed without cancellation near the chart boundary.
    pub rho: f64,
}

impl Node {
    pub fn norm_sqr(&self) -> f64 {
        self.z[0].norm_sqr() + self.z[1].norm_sqr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "space")]
pub enum GridSpec {
    P1 { n_radial: usize, n_angular: usize },
    P2 { n_simplex: usize, n_angular: usize },
}

impl GridSpec {
    pub fn default_for(space: Space) -> Self {
        match space {
            Space::P1 => GridSpec::P1 { n_radial: 64, n_angular: 32 },
            Space::P2 => GridSpec::P2 { n_simplex: 8, n_angular: 16 },
        }
    }

    pub fn space(&self) -> Space {
        match self {
            GridSpec::P1 { .. } => Space::P1,
            GridSpec::P2 { .. } => Space::P2,
        }
    }

    pub fn build(&self) -> Result<QuadratureGrid> {
        match *self {
            GridSpec::P1 { n_radial, n_angular } => build_grid_p1(n_radial, n_angular),
            GridSpec::P2 { n_simplex, n_angular } => build_grid_p2(n_simplex, n_angular),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub spec: GridSpec,
    pub nodes: Vec<Node>,
    pub weights: Vec<f64>,
    /// Vol_L = ∫ ωⁿ/n!: 1 on P¹, 1/2 on P².
    pub vol: f64,
}

/// Regularised incomplete beta I_s(m,m) = Σ_{j=m}^{2m−1} C(2m−1,j) s^j (1−s)^{2m−1−j}.
fn beta_cdf(m: i32, s: f64) -> f64 {
    let n = 2 * m - 1;
    let t = 1.0 - s;
    let mut c = 1.0;
    let mut acc = 0.0;
    for j in 0..=n {
        if j >= m {
            acc += c * s.powi(j) * t.powi(n - j);
        }
        c = c * (n - j) as f64 / (j + 1) as f64;
    }
    acc
}

/// Density s^{m−1}(1−s)^{m−1}/B(m,m).
fn beta_density(m: i32, s: f64) -> f64 {
    let inv_beta = match m {
        3 => 30.0,
        4 => 140.0,
        _ => unreachable!("only m = 3, 4 are used"),
    };
    inv_beta * (s * (1.0 - s)).powi(m - 1)
}

/// (u, 1 − u, weight) on [0, 1] for the graded Gauss–Legendre rule.
fn graded_rule(n: usize, m: i32) -> Result<Vec<(f64, f64, f64)>> {
    let gl = GaussLegendre::new(n).map_err(|e| BmlError::InvalidResolution(e.to_string()))?;
    let mut out: Vec<(f64, f64, f64)> = gl
        .as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| {
            let s = 0.5 * (x + 1.0);
            (beta_cdf(m, s), beta_cdf(m, 1.0 - s), 0.5 * w * beta_density(m, s))
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

pub fn build_grid_p1(n_radial: usize, n_angular: usize) -> Result<QuadratureGrid> {
    if n_radial < 2 || n_angular < 4 {
        return Err(BmlError::InvalidResolution(format!(
            "P1 grid needs n_radial >= 2 and n_angular >= 4, got {n_radial} x {n_angular}"
        )));
    }
    let radial = graded_rule(n_radial, 4)?;
    let mut nodes = Vec::with_capacity(n_radial * n_angular);
    let mut weights = Vec::with_capacity(n_radial * n_angular);
    for &(u, one_minus_u, w) in &radial {
        let r = (u / one_minus_u).sqrt();
        for m in 0..n_angular {
            let theta = 2.0 * std::f64::consts::PI * m as f64 / n_angular as f64;
            nodes.push(Node { z: [Complex64::from_polar(r, theta), Complex64::new(0.0, 0.0)], rho: one_minus_u });
            weights.push(w / n_angular as f64);
        }
    }
    Ok(QuadratureGrid { spec: GridSpec::P1 { n_radial, n_angular }, nodes, weights, vol: 1.0 })
}

/// Conical-product rule on the simplex, symmetrised under v₁ ↔ v₂, times the
/// trapezoid rule on the 2-torus.
pub fn build_grid_p2(n_simplex: usize, n_angular: usize) -> Result<QuadratureGrid> {
    if n_simplex < 2 || n_angular < 4 {
        return Err(BmlError::InvalidResolution(format!(
            "P2 grid needs n_simplex >= 2 and n_angular >= 4, got {n_simplex} x {n_angular}"
        )));
    }
    // Milder grading here keeps low moments exact at small n_simplex.
    let rule = graded_rule(n_simplex, 3)?;
    // (v1, v2, v0, weight)
    let mut simplex = Vec::with_capacity(2 * n_simplex * n_simplex);
    for &(a, one_minus_a, wa) in &rule {
        for &(b, one_minus_b, wb) in &rule {
            let v1 = a;
            let v2 = one_minus_a * b;
            let v0 = one_minus_a * one_minus_b;
            let w = 0.5 * wa * wb * one_minus_a;
            simplex.push((v1, v2, v0, w));
            simplex.push((v2, v1, v0, w));
        }
    }
    let na = n_angular;
    let tw = 1.0 / (na * na) as f64;
    let mut nodes = Vec::with_capacity(simplex.len() * na * na);
    let mut weights = Vec::with_capacity(simplex.len() * na * na);
    for &(v1, v2, v0, w) in &simplex {
        let (r1, r2) = ((v1 / v0).sqrt(), (v2 / v0).sqrt());
        for m1 in 0..na {
            let t1 = 2.0 * std::f64::consts::PI * m1 as f64 / na as f64;
            for m2 in 0..na {
                let t2 = 2.0 * std::f64::consts::PI * m2 as f64 / na as f64;
                nodes.push(Node { z: [Complex64::from_polar(r1, t1), Complex64::from_polar(r2, t2)], rho: v0 });
                weights.push(w * tw);
            }
        }
    }
    Ok(QuadratureGrid { spec: GridSpec::P2 { n_simplex, n_angular }, nodes, weights, vol: 0.5 })
}

const CHUNK: usize = 256;

/// Sum with a fixed pairwise tree, independent of thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n if n <= 8 => xs.iter().sum(),
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

fn pairwise_reduce<T: Clone>(xs: &[T], add: &(impl Fn(T, T) -> T + Sync)) -> T {
    if xs.len() == 1 {
        return xs[0].clone();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    add(pairwise_reduce(a, add), pairwise_reduce(b, add))
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn space(&self) -> Space {
        self.spec.space()
    }

    /// Deterministic weighted reduction: `f(i, node) * weight` summed with
    /// fixed-size sequential chunks combined pairwise. `f` may run in parallel.
    pub fn reduce<T, F, A>(&self, f: F, add: A) -> T
    where
        T: Clone + Send + Sync,
        F: Fn(usize, &Node, f64) -> T + Sync,
        A: Fn(T, T) -> T + Sync,
    {
        assert!(!self.nodes.is_empty(), "empty grid");
        let partial: Vec<T> = (0..self.nodes.len().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(self.nodes.len());
                let mut acc = f(lo, &self.nodes[lo], self.weights[lo]);
                for i in lo + 1..hi {
                    acc = add(acc, f(i, &self.nodes[i], self.weights[i]));
                }
                acc
            })
            .collect();
        pairwise_reduce(&partial, &add)
    }

    /// Σ weightᵢ·f(nodeᵢ).
    pub fn integrate<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&Node) -> f64 + Sync,
    {
        self.integrate_indexed(|i| f(&self.nodes[i]))
    }

    /// Σ weightᵢ·f(i), for integrands cached per node.
    pub fn integrate_indexed<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(usize) -> f64 + Sync,
    {
        let values: Vec<f64> = (0..self.nodes.len()).into_par_iter().map(&f).collect();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(BmlError::NonFiniteIntegrand { index });
        }
        let terms: Vec<f64> = values.iter().zip(&self.weights).map(|(v, w)| v * w).collect();
        Ok(pairwise_sum(&terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_map_endpoints() {
        for m in [3, 4] {
            assert_eq!(beta_cdf(m, 0.0), 0.0);
            assert!((beta_cdf(m, 1.0) - 1.0).abs() < 1e-15);
            assert!((beta_cdf(m, 0.3) + beta_cdf(m, 0.7) - 1.0).abs() < 1e-15);
        }
        let s: f64 = 0.3;
        let closed = s.powi(4) * (35.0 * 0.7f64.powi(3) + 21.0 * s * 0.49 + 7.0 * s * s * 0.7 + s.powi(3));
        assert!((beta_cdf(4, s) - closed).abs() < 1e-15);
    }

    #[test]
    fn p1_weights_and_moments() {
        let g = build_grid_p1(32, 32).unwrap();
        let total = pairwise_sum(&g.weights);
        assert!((total - 1.0).abs() < 1e-12);
        assert!(g.weights.iter().all(|&w| w > 0.0));
        let v = g.integrate(|n| n.z[0].norm_sqr() * n.rho * n.rho).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-10);
        let v = g.integrate(|n| n.rho).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn p1_log_integrals() {
        let g = build_grid_p1(64, 16).unwrap();
        let v = g.integrate(|n| -n.rho.ln()).unwrap();
        assert!((v - 1.0).abs() < 1e-8, "{v}");
        let odd = g.integrate(|n| n.z[0].re * n.rho).unwrap();
        assert!(odd.abs() < 1e-12);
    }

    #[test]
    fn p2_weights_and_moments() {
        let g = build_grid_p2(8, 8).unwrap();
        assert!((pairwise_sum(&g.weights) - 0.5).abs() < 1e-12);
        for j in 0..2 {
            let v = g.integrate(|n| n.z[j].norm_sqr() * n.rho).unwrap();
            assert!((v - 0.5 / 3.0).abs() < 1e-9, "{v}");
        }
        let v0 = g.integrate(|n| n.rho).unwrap();
        assert!((v0 - 0.5 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn resolution_errors() {
        assert!(matches!(build_grid_p1(1, 8), Err(BmlError::InvalidResolution(_))));
        assert!(matches!(build_grid_p1(8, 3), Err(BmlError::InvalidResolution(_))));
        assert!(matches!(build_grid_p2(1, 8), Err(BmlError::InvalidResolution(_))));
    }

    #[test]
    fn non_finite_reports_index() {
        let g = build_grid_p1(4, 4).unwrap();
        let err = g.integrate(|n| if n.z[0].norm() > 100.0 { f64::NAN } else { 1.0 });
        assert!(matches!(err, Err(BmlError::NonFiniteIntegrand { .. })) || err.is_ok());
        let err = g.integrate(|_| f64::INFINITY).unwrap_err();
        assert_eq!(err, BmlError::NonFiniteIntegrand { index: 0 });
    }

    #[test]
    fn reduce_is_deterministic() {
        let g = build_grid_p1(64, 32).unwrap();
        let a = g.reduce(|_, n, w| w * n.rho.ln(), |x, y| x + y);
        let b = g.reduce(|_, n, w| w * n.rho.ln(), |x, y| x + y);
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((a + 1.0).abs() < 1e-10);
    }
}

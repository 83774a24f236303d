use bml::bergman::*;
use bml::bundle::*;
use bml::functionals::logdet;
use bml::verify::random_generator;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn catalog() -> Vec<(BundleKind, i64)> {
    vec![
        (BundleKind::SplitP1 { degrees: vec![1] }, 1),
        (BundleKind::SplitP1 { degrees: vec![0, 2] }, 3),
        (BundleKind::SplitP1 { degrees: vec![1, 1] }, 1),
        (BundleKind::SplitP1 { degrees: vec![-1, 0, 2] }, 2),
        (BundleKind::EulerTp2, 1),
    ]
}

fn point(dim: usize, rng: &mut impl Rng) -> [C; 2] {
    let mut z = || C::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    if dim == 1 {
        [z(), C::new(0.0, 0.0)]
    } else {
        [z(), z()]
    }
}

fn random_unitary(n: usize, rng: &mut impl Rng) -> CMat {
    let a = CMat::from_fn(n, n, |_, _| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    a.qr().q()
}

/// Per-summand constant weights on a split basis, trace-free on sections.
fn summand_scalar(basis: &SectionBasis, rng: &mut impl Rng) -> Option<OnePS> {
    let BundleKind::SplitP1 { degrees } = &basis.bundle else { return None };
    let sizes: Vec<usize> = (0..degrees.len()).map(|i| basis.summand_rows(i).len()).collect();
    let mut w: Vec<f64> = sizes.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = w.iter().zip(&sizes).map(|(a, &s)| a * s as f64).sum::<f64>() / basis.n() as f64;
    w.iter_mut().for_each(|a| *a -= mean);
    let m = w.iter().fold(0.0f64, |acc, a| acc.max(a.abs()));
    if m < 1e-3 {
        return None;
    }
    let mut diag = Vec::new();
    for (a, &s) in w.iter().zip(&sizes) {
        diag.extend(std::iter::repeat_n(a / m, s));
    }
    OnePS::diagonal(&diag).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fs_metric_unitary_invariance(seed in any::<u64>(), which in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = &catalog()[which];
        let basis = SectionBasis::new(b, *k, true).unwrap();
        let n = basis.n();
        let q = basis.q_unchecked(&point(basis.space().dim(), &mut rng));
        let h = bml::balance::random_start(n, seed, 0.7);
        let u = random_unitary(n, &mut rng);
        let q2 = u.adjoint() * &q;
        let h2 = u.adjoint() * &h * &u;
        let a = logdet(&fs_at(&q, &h)) - logdet(&(q.adjoint() * &q));
        let b = logdet(&fs_at(&q2, &h2)) - logdet(&(q2.adjoint() * &q2));
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn det_pairing_for_summand_scalars(seed in any::<u64>(), which in 1usize..4, t in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = &catalog()[which];
        let basis = SectionBasis::new(b, *k, true).unwrap();
        let z = summand_scalar(&basis, &mut rng);
        prop_assume!(z.is_some());
        let z = z.unwrap();
        let q = basis.q_unchecked(&point(1, &mut rng));
        let plus = fs_at(&q, &z.exp(2.0 * t)).determinant().re;
        let minus = fs_at(&q, &z.exp(-2.0 * t)).determinant().re;
        let reference = (q.adjoint() * &q).determinant().re;
        prop_assert!((plus * minus / (reference * reference) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn weight_filtration_ranks(seed in any::<u64>(), which in 0usize..5, levels in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = &catalog()[which];
        let basis = SectionBasis::new(b, *k, true).unwrap();
        let n = basis.n();
        // clustered spectrum in a random unitary frame
        let mut ws: Vec<f64> = (0..n).map(|i| (i % levels) as f64).collect();
        let mean = ws.iter().sum::<f64>() / n as f64;
        ws.iter_mut().for_each(|w| *w -= mean);
        let m = ws.iter().fold(0.0f64, |a, w| a.max(w.abs()));
        let u = random_unitary(n, &mut rng);
        let d = CMat::from_diagonal(&nalgebra::DVector::from_iterator(n, ws.iter().map(|w| C::new(w / m, 0.0))));
        let zm = &u * d * u.adjoint();
        let z = OnePS::new((&zm + zm.adjoint()) * C::new(0.5, 0.0)).unwrap();
        let wf = weight_filtration(&basis, &z, &generic_points(basis.space().dim(), 40, seed)).unwrap();
        prop_assert!(wf.ranks.windows(2).all(|r| r[0] <= r[1]));
        prop_assert_eq!(*wf.ranks.last().unwrap(), basis.rank());
        prop_assert_eq!(*wf.v_dims.last().unwrap(), n);
        prop_assert_eq!(wf.surviving[0], 0);
    }

    #[test]
    fn commutators_vanish_for_line_bundles_and_split_scalars(seed in any::<u64>(), t in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![2] }, 1, true).unwrap();
        let z = random_generator(basis.n(), &mut rng).unwrap();
        let q = basis.q_unchecked(&point(1, &mut rng));
        prop_assert_eq!(commutator_residual(&q, &z.exp(t), &(&z.zeta * C::new(2.0, 0.0))), 0.0);
        let basis = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
        if let Some(z) = summand_scalar(&basis, &mut rng) {
            let q = basis.q_unchecked(&point(1, &mut rng));
            prop_assert!(commutator_residual(&q, &z.exp(t), &(&z.zeta * C::new(2.0, 0.0))) < 1e-12);
        }
    }

    #[test]
    fn subgeodesic_positivity(seed in any::<u64>(), which in 0usize..5, t in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = &catalog()[which];
        let basis = SectionBasis::new(b, *k, true).unwrap();
        let z = random_generator(basis.n(), &mut rng).unwrap();
        let q = basis.q_unchecked(&point(basis.space().dim(), &mut rng));
        let rep = subgeodesic_residual(&q, &z, t, 1e-3).unwrap();
        let scale = 1.0 + rep.rhs.norm();
        prop_assert!(rep.min_eig_rhs >= -1e-12);
        prop_assert!(rep.conjugated_residual <= 1e-9 * scale);
        prop_assert!(rep.fd_error <= 1e-5 * scale);
        if basis.rank() == 1 {
            prop_assert!(rep.residual <= 1e-5 * scale);
            prop_assert!(rep.lhs[(0, 0)].re >= -1e-9);
        }
    }
}

#[test]
fn split_scalar_generator_is_geodesic() {
    let basis = SectionBasis::new(&BundleKind::SplitP1 { degrees: vec![0, 2] }, 3, true).unwrap();
    let z = OnePS::two_step(10, basis.summand_rows(1), 2.0 / 3.0, -1.0).unwrap();
    let q = basis.q_unchecked(&[C::new(0.4, -0.7), C::new(0.0, 0.0)]);
    let rep = subgeodesic_residual(&q, &z, 1.3, 1e-3).unwrap();
    assert!(rep.exact_lhs.norm() < 1e-12);
    assert!(rep.rhs.norm() < 1e-12);
}

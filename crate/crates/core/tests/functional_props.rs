use bml::balance::{self, center_of_mass, m2_gradient, random_start, BalanceOptions, Outcome};
use bml::bergman::{hermitian_fn, OnePS};
use bml::bundle::*;
use bml::config::{parse_ps_spec, resolve_ps};
use bml::functionals::*;
use bml::geometry::build_grid_p1;
use bml::stability::{m2_slope_prediction, rat_to_f64};
use bml::verify::random_generator;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ctx(degrees: &[i64], k: i64) -> FunctionalContext {
    let b = SectionBasis::new(&BundleKind::SplitP1 { degrees: degrees.to_vec() }, k, true).unwrap();
    FunctionalContext::new(b, build_grid_p1(48, 24).unwrap()).unwrap()
}

fn cases() -> Vec<(Vec<i64>, i64)> {
    vec![(vec![0], 1), (vec![2], 1), (vec![0, 2], 3), (vec![1, 1], 2)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn center_of_mass_trace_is_rank(seed in any::<u64>(), which in 0usize..4, scale in 0.1f64..1.5) {
        let (d, k) = &cases()[which];
        let cx = ctx(d, *k);
        let m = center_of_mass(&cx, &random_start(cx.basis.n(), seed, scale)).unwrap();
        prop_assert!((m.trace().re - d.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn gradient_is_first_variation(seed in any::<u64>(), which in 0usize..4) {
        let (d, k) = &cases()[which];
        let cx = ctx(d, *k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_generator(cx.basis.n(), &mut rng).unwrap();
        let h = random_start(cx.basis.n(), seed ^ 1, 0.5);
        let sigma = hermitian_fn(&h, f64::sqrt);
        let at = |t: f64| {
            let s = z.exp(t) * &sigma;
            cx.m2_don(&(s.adjoint() * s)).unwrap()
        };
        let eps = 1e-4;
        let fd = (at(eps) - at(-eps)) / (2.0 * eps);
        prop_assert!((m2_gradient(&cx, &h, &z.zeta).unwrap() - fd).abs() < 1e-7);
    }

    #[test]
    fn m2_convex_along_random_one_ps(seed in any::<u64>(), which in 0usize..4) {
        let (d, k) = &cases()[which];
        let cx = ctx(d, *k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_generator(cx.basis.n(), &mut rng).unwrap();
        let vals: Vec<f64> = (0..40).map(|i| cx.m2_don(&z.exp(0.5 * i as f64)).unwrap()).collect();
        prop_assert!(balance::convexity_monitor(&vals).unwrap().convex);
    }

    #[test]
    fn m2_cocycle(seed in any::<u64>()) {
        // line bundle: M₂(H₂; ref) = M₂(H₁; ref) + M₂(H₂; h_{H₁})
        let cx = ctx(&[2], 1);
        let n = cx.basis.n();
        let h1 = random_start(n, seed, 0.8);
        let h2 = random_start(n, seed.wrapping_add(7), 0.8);
        let q = &cx.sampled.q;
        let rel = cx.grid.integrate_indexed(|i| {
            let a = (q[i].adjoint() * &h2 * &q[i])[(0, 0)].re;
            let b = (q[i].adjoint() * &h1 * &q[i])[(0, 0)].re;
            (a / b).ln()
        }).unwrap() / cx.grid.vol;
        let lhs = cx.m2_don(&h2).unwrap();
        prop_assert!((cx.m2_don(&h1).unwrap() + rel - lhs).abs() < 1e-10);
    }
}

#[test]
fn donaldson_coercivity_constant_is_finite() {
    let cx = ctx(&[0, 2], 3);
    let r = resolve_ps(&parse_ps_spec("two_step:O(2):2/3,-1").unwrap(), &cx.basis, 0).unwrap();
    let mna = rat_to_f64(&bml::stability::m_na(&r.filtration.unwrap()).unwrap());
    let times: Vec<f64> = (0..31).map(|i| 0.5 * i as f64).collect();
    let s = cx.series(&r.zeta, &times, 16).unwrap();
    let c = coercivity_constant(&s, mna);
    assert!(c.is_finite() && c >= 0.0 && c < 10.0, "{c}");
}

#[test]
fn diverged_run_follows_destabilising_slope() {
    let cx = ctx(&[0, 2], 3);
    let r = resolve_ps(&parse_ps_spec("two_step:O(2):2/3,-1").unwrap(), &cx.basis, 0).unwrap();
    let f = r.filtration.unwrap();
    let pred = rat_to_f64(&m2_slope_prediction(&f, &f.grading()));
    let gap = r.zeta.weights[0] - r.zeta.weights[r.zeta.weights.len() - 1];
    let id = CMat::identity(10, 10);
    for run in [
        balance::t_iterate(&cx, &id, BalanceOptions::default()).unwrap(),
        balance::lm_minimize(&cx, &id, BalanceOptions::default()).unwrap(),
    ] {
        assert!(matches!(run.outcome, Outcome::Diverged { .. }));
        let t = balance::iterate_path_times(&run.history, gap);
        let pts: Vec<(f64, f64)> = t.iter().copied().zip(run.m2_values()).collect();
        let fit = asymptotic_slope_fit(&pts, 0.6 * t.last().unwrap(), None).unwrap();
        assert!(fit.slope < 0.0 && ((fit.slope - pred) / pred).abs() < 0.1, "{} vs {pred}", fit.slope);
    }
}

#[test]
fn detector_verdicts() {
    let opts = BalanceOptions::default();
    let cx = ctx(&[2], 0);
    let run = balance::lm_minimize(&cx, &random_start(3, 2, 0.8), opts).unwrap();
    assert_eq!(balance::divergence_detect(&run.history, 1e-10).unwrap(), balance::DivergenceVerdict::Converged);
    let cx = ctx(&[1, 1], 2);
    let run = balance::t_iterate(&cx, &random_start(8, 2, 0.8), opts).unwrap();
    assert_eq!(balance::divergence_detect(&run.history, 1e-10).unwrap(), balance::DivergenceVerdict::Converged);
    let short = &run.history[..5];
    assert!(balance::divergence_detect(short, 1e-30).is_err());
}

#[test]
fn constant_one_ps_has_flat_m2() {
    let cx = ctx(&[0, 2], 3);
    let z = OnePS::new(CMat::zeros(10, 10)).unwrap();
    let vals: Vec<f64> = (0..5).map(|i| cx.m2_don(&z.exp(i as f64)).unwrap()).collect();
    let rep = balance::convexity_monitor(&vals).unwrap();
    assert_eq!(rep.min_second_difference, 0.0);
}

use std::sync::Arc;

use proptest::prelude::*;

use jumpcouple::coupling::*;
use jumpcouple::estimators::{empirical_w1, fit_decay, mean_curve};
use jumpcouple::levy::{norm, RadialLevyMeasure, Stable};
use jumpcouple::model::*;
use jumpcouple::rng::{stream, Purpose};
use jumpcouple::transport::*;

fn ou(dim: usize) -> ModelSpec {
    ModelSpec::new(dim, Arc::new(LinearDrift { rate: 1.0 }), Arc::new(ConstantCurvature { value: 1.0 }), DiffusionSpec::scalar(dim, 1.0))
}

fn unit_vec(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reflection_is_an_involutive_isometry(e in prop::collection::vec(-3.0f64..3.0, 3), w in prop::collection::vec(-3.0f64..3.0, 3)) {
        prop_assume!(norm(&e) > 1e-3);
        let e = unit_vec(&e);
        let mut once = vec![0.0; 3];
        let mut twice = vec![0.0; 3];
        reflect(&e, &w, &mut once);
        reflect(&e, &once, &mut twice);
        prop_assert!((norm(&once) - norm(&w)).abs() < 1e-12);
        for (a, b) in twice.iter().zip(&w) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_weights_stay_on_the_circle(r in 0.0f64..3.0, delta in 0.01f64..2.0) {
        let (l, p) = mixing_weights(r, delta);
        prop_assert!((l * l + p * p - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&l) && (0.0..=1.0).contains(&p));
    }

    #[test]
    fn mirror_jumps_either_glue_or_stay_on_the_axis(z in -2.0f64..2.0, v in -3.0f64..3.0, u in 0.0f64..1.0) {
        prop_assume!(z.abs() > 1e-6 && v.abs() > 1e-6);
        let m = RadialLevyMeasure::new(Arc::new(Stable { alpha: 1.5, scale: 1.0, dim: 1 }), 1, 1e-3).unwrap();
        let mut out = [0.0];
        let label = step_mirror(&[z], &[v], u, &m, &mut out);
        let z_next = z + v - out[0];
        match label {
            JumpLabel::Accepted => prop_assert!(z_next.abs() < 1e-12),
            JumpLabel::Reflected => prop_assert!((out[0] + v).abs() < 1e-12),
            JumpLabel::Common => prop_assert!(false, "z ≠ 0 never gives a common jump"),
        }
        prop_assert!((0.0..=1.0).contains(&mirror_accept_prob(&[v], &[z], &m)));
    }

    #[test]
    fn w1_is_a_metric(xs in prop::collection::vec(-5.0f64..5.0, 24), shift in -2.0f64..2.0) {
        let cloud = |k: usize, s: f64| -> Vec<Vec<f64>> { xs[8 * k..8 * k + 8].chunks(2).map(|c| vec![c[0] + s, c[1]]).collect() };
        let (a, b, c) = (cloud(0, 0.0), cloud(1, shift), cloud(2, -shift));
        let w = |x: &[Vec<f64>], y: &[Vec<f64>]| empirical_w1(x, y, 3).unwrap().value;
        prop_assert!(w(&a, &a).abs() < 1e-9);
        prop_assert!((w(&a, &b) - w(&b, &a)).abs() < 1e-9);
        prop_assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-9);
    }

    #[test]
    fn w1_of_a_translate_is_the_shift(xs in prop::collection::vec(-5.0f64..5.0, 10), shift in -3.0f64..3.0) {
        let a: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let b: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x + shift]).collect();
        prop_assert!((empirical_w1(&a, &b, 0).unwrap().value - shift.abs()).abs() < 1e-9);
    }

    #[test]
    fn beta_is_convex_and_vanishes_at_zero(scale in 0.05f64..2.0, l1 in 0.0f64..4.0, l2 in 0.0f64..4.0) {
        let j = JumpCoeffSpec {
            g: Arc::new(AdditiveJump { scale }),
            intensity: MarkIntensity::Interval { lo: -1.0, hi: 1.0, mass: 2.0 },
        };
        prop_assert_eq!(compute_beta(&j, 0.0), 0.0);
        let mid = compute_beta(&j, 0.5 * (l1 + l2));
        prop_assert!(mid <= 0.5 * (compute_beta(&j, l1) + compute_beta(&j, l2)) + 1e-12);
    }

    #[test]
    fn deviation_functions_are_convex(a in 0.1f64..5.0, scale in 0.05f64..1.0, r1 in 0.0f64..3.0, r2 in 0.0f64..3.0) {
        let k = RateConstants { c_tilde_prefactor: 2.0, c_tilde: 0.6, c_prefactor: 2.0, c: 0.6 };
        let j = JumpCoeffSpec {
            g: Arc::new(AdditiveJump { scale }),
            intensity: MarkIntensity::Atoms { points: vec![vec![-1.0], vec![1.0]], weights: vec![0.5, 0.5] },
        };
        for dev in [DeviationFunction::quadratic(a), DeviationFunction::alpha_t(1.0, k, 0.0, 1.0, vec![BetaTerm::from_jump(&j).unwrap()])] {
            prop_assert_eq!(dev.eval_alpha(0.0).unwrap(), 0.0);
            let mid = dev.eval_alpha(0.5 * (r1 + r2)).unwrap();
            let chord = 0.5 * (dev.eval_alpha(r1).unwrap() + dev.eval_alpha(r2).unwrap());
            prop_assert!(mid <= chord + 1e-9 * (1.0 + chord));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn glued_pairs_stay_glued(seed in 0u64..1000, gap in 0.1f64..2.0) {
        let model = ou(2);
        let opts = SimOptions { t_end: 3.0, dt: 1e-3, record_every: 10, log_jumps: false };
        let p = simulate_coupled(&model, &Reflection::default(), &[0.0, 0.0], &[gap, -gap], &opts, &mut stream(seed, Purpose::Coupled, 0)).unwrap();
        prop_assert_eq!(p.glued, p.coupling_time.is_finite());
        for k in 0..p.len() {
            if p.times[k] >= p.coupling_time {
                prop_assert_eq!(p.x_at(k), p.y_at(k));
            }
        }
    }

    #[test]
    fn synchronous_pairs_never_glue(seed in 0u64..1000) {
        let opts = SimOptions { t_end: 1.0, dt: 1e-3, record_every: 100, log_jumps: false };
        let p = simulate_coupled(&ou(1), &Synchronous, &[0.0], &[1.0], &opts, &mut stream(seed, Purpose::Coupled, 0)).unwrap();
        prop_assert!(!p.glued && p.coupling_time.is_infinite());
        prop_assert!((p.z_norm(p.len() - 1) - (1.0 - 1e-3f64).powi(1000)).abs() < 1e-12);
    }
}

#[test]
fn reflected_difference_has_quadratic_variation_4t() {
    // before gluing, dZ carries 2·dB along the reflection axis
    let model = ModelSpec::new(1, Arc::new(LinearDrift { rate: 0.0 }), Arc::new(ConstantCurvature { value: 0.0 }), DiffusionSpec::scalar(1, 1.0));
    let opts = SimOptions { t_end: 1.0, dt: 1e-3, record_every: 1, log_jumps: false };
    let mut qv = 0.0;
    let mut time = 0.0;
    for i in 0..200 {
        let p = simulate_coupled(&model, &Reflection::default(), &[0.0], &[50.0], &opts, &mut stream(5, Purpose::Coupled, i)).unwrap();
        let end = p.coupling_time;
        for k in 1..p.len() {
            if p.times[k] > end {
                break;
            }
            let dz = (p.x_at(k)[0] - p.y_at(k)[0]) - (p.x_at(k - 1)[0] - p.y_at(k - 1)[0]);
            qv += dz * dz;
            time += p.times[k] - p.times[k - 1];
        }
    }
    let ratio = qv / time;
    assert!((ratio - 4.0).abs() < 0.05, "QV/t = {ratio}");
}

#[test]
fn decay_fit_is_scale_invariant() {
    let opts = SimOptions { t_end: 3.0, dt: 1e-3, record_every: 100, log_jumps: false };
    let paths = run_ensemble(&ou(1), &Reflection::default(), |_| (vec![-1.0], vec![1.0]), &opts, 400, 9, 0).unwrap();
    let id = |r: f64| r;
    let scaled = |r: f64| 7.5 * r;
    let a = fit_decay(&paths, &id, (0.5, 3.0)).unwrap();
    let b = fit_decay(&paths, &scaled, (0.5, 3.0)).unwrap();
    assert!((a.rate - b.rate).abs() < 1e-9 * a.rate.abs().max(1.0));
    assert!((b.prefactor / a.prefactor - 7.5).abs() < 1e-9);
    let c = mean_curve(&paths, &id);
    assert_eq!(c.first().unwrap().mean, 2.0);
}

#[test]
fn ensembles_do_not_depend_on_worker_count() {
    let opts = SimOptions { t_end: 1.0, dt: 1e-3, record_every: 50, log_jumps: false };
    let run = |w| run_ensemble(&ou(2), &Mixed { delta: 0.2, threshold: None }, |i| (vec![0.0, 0.0], vec![1.0, i as f64 * 0.01]), &opts, 64, 4, w).unwrap();
    let (a, b) = (run(1), run(3));
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.x, q.x);
        assert_eq!(p.y, q.y);
        assert_eq!(p.coupling_time, q.coupling_time);
    }
}

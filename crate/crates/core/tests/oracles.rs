//! Closed-form and independently computed reference values.

use std::sync::Arc;

use jumpcouple::estimators::{empirical_w1, euler_directional_derivative, linear_directional_derivative, W1Method};
use jumpcouple::levy::*;
use jumpcouple::lyapunov::*;
use jumpcouple::model::*;
use jumpcouple::stats::{kolmogorov_survival, wilson};
use jumpcouple::transport::*;

fn piecewise() -> PiecewiseCurvature {
    PiecewiseCurvature { inner: -2.0, outer: 1.0, r_in: 1.0, r_out: 2.0 }
}

fn brownian(kappa: Arc<dyn Curvature>) -> DistanceFn {
    DistanceFn::Brownian(build_f_brownian(kappa, 1.0, BrownianOptions::default()).unwrap())
}

#[test]
fn constant_curvature_constants_are_closed_form() {
    // φ ≡ 1, I(r) = r²/2, f(R) = 5R/6; the affine join at x = R forces R² = 10/3, c = 2/R² = 3/5
    let f = brownian(Arc::new(ConstantCurvature { value: 1.0 }));
    let k = f.constants();
    assert_eq!(k.get("C"), Some(2.0));
    assert_eq!(k.get("R0"), Some(0.0));
    assert!((k.get("c").unwrap() - 0.6).abs() < 1e-8, "{:?}", k);
    assert!((k.get("R1").unwrap() - (10.0f64 / 3.0).sqrt()).abs() < 1e-8, "{:?}", k);
}

#[test]
fn piecewise_prefactor_is_closed_form() {
    // ½∫₀^{5/3} s κ⁻(s) ds = ½(1 + 22/27) = 49/54
    let f = brownian(Arc::new(piecewise()));
    let k = f.constants();
    assert!((k.get("R0").unwrap() - 5.0 / 3.0).abs() < 1e-12);
    let expected = 2.0 * (49.0f64 / 54.0).exp();
    assert!((k.get("C").unwrap() - expected).abs() < 1e-9 * expected, "{} vs {expected}", k.get("C").unwrap());
}

/// Plain trapezoid construction on a uniform grid, independent of the library tables.
fn trapezoid_rate(kappa: &dyn Curvature, r_hi: f64, n: usize) -> (f64, f64) {
    let h = r_hi / n as f64;
    let r: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let s: Vec<f64> = r.iter().map(|&x| -0.5 * x * (-kappa.eval(x)).max(0.0)).collect();
    let mut log_phi = vec![0.0; n + 1];
    let mut big_phi = vec![0.0; n + 1];
    let mut i_int = vec![0.0; n + 1];
    let mut j_int = vec![0.0; n + 1];
    for k in 0..n {
        log_phi[k + 1] = log_phi[k] + 0.5 * h * (s[k] + s[k + 1]);
        big_phi[k + 1] = big_phi[k] + 0.5 * h * (log_phi[k].exp() + log_phi[k + 1].exp());
        i_int[k + 1] = i_int[k] + 0.5 * h * (big_phi[k] / log_phi[k].exp() + big_phi[k + 1] / log_phi[k + 1].exp());
        j_int[k + 1] = j_int[k] + 0.5 * h * (log_phi[k].exp() * i_int[k] + log_phi[k + 1].exp() * i_int[k + 1]);
    }
    // first grid radius where the affine continuation satisfies the inequality on [R, 4R]
    for k in 1..=n / 4 {
        let rate = 1.0 / i_int[k];
        let phi = log_phi[k].exp();
        let f_r = big_phi[k] - j_int[k] / (2.0 * i_int[k]);
        let ok = (0..=400).all(|m| {
            let x = r[k] * (1.0 + 3.0 * m as f64 / 400.0);
            -x * kappa.eval(x) * phi / 2.0 + rate * (f_r + (x - r[k]) * phi / 2.0) <= 0.0
        });
        if ok {
            return (rate, r[k]);
        }
    }
    panic!("no radius found");
}

#[test]
fn piecewise_rate_matches_trapezoid_reference() {
    let kappa = piecewise();
    let (rate, r1) = trapezoid_rate(&kappa, 16.0, 320_000);
    let f = brownian(Arc::new(piecewise()));
    let k = f.constants();
    assert!((k.get("c").unwrap() - rate).abs() < 1e-4, "{} vs {rate}", k.get("c").unwrap());
    assert!((k.get("R1").unwrap() - r1).abs() < 1e-3, "{} vs {r1}", k.get("R1").unwrap());
    assert!((k.get("c").unwrap() - 0.327898).abs() < 1e-5);
}

fn stable() -> RadialLevyMeasure {
    RadialLevyMeasure::new(Arc::new(Stable { alpha: 1.5, scale: 1.0, dim: 1 }), 1, 1e-3).unwrap()
}

#[test]
fn stable_moments_are_closed_form() {
    let m = stable();
    // ∫_{|v|>1}|v|ν = 2∫₁^∞ r^{-1.5} = 4
    assert!((m.gamma().unwrap() - 4.0).abs() < 1e-8);
    // ν(|v| ≥ r) = 2 r^{-1.5}/1.5
    assert!((m.mass_above(2.0).unwrap() - 2.0 * 2f64.powf(-1.5) / 1.5).abs() < 1e-9);
    // C_ε = 2∫₀^{ε/2} y² y^{-2.5} dy = 4√(ε/2)
    for eps in [1e-3, 2f64.powi(-10), 0.1] {
        let c = m.c_eps(eps).unwrap();
        assert!((c - 4.0 * (eps / 2.0).sqrt()).abs() < 1e-9, "eps {eps}: {c}");
    }
}

#[test]
fn jump_construction_frozen_values() {
    let prof: Arc<dyn RadialProfile> = Arc::new(Stable { alpha: 1.5, scale: 1.0, dim: 1 });
    let cut = RadialLevyMeasure::default_cutoff(prof.clone(), 1, 1000.0).unwrap();
    let m = RadialLevyMeasure::new(prof, 1, cut.cutoff).unwrap();
    let f1 = build_f1_jump(Arc::new(piecewise()), &m, m.gamma().unwrap(), JumpOptions::default()).unwrap();
    assert_eq!(f1.eps(), 2f64.powi(-10));
    assert_eq!(f1.delta(), 2f64.powi(-10));
    assert!((f1.c_eps() - 4.0 * (f1.eps() / 2.0).sqrt()).abs() < 1e-9);
    assert!((f1.m() - 26.717).abs() < 1e-2, "{}", f1.m());
    assert!((f1.log_c1() + 21385.23).abs() < 0.5, "{}", f1.log_c1());
    assert!((f1.log_a1() + 21390.34).abs() < 0.5, "{}", f1.log_a1());
}

fn atoms(scale: f64) -> JumpCoeffSpec {
    JumpCoeffSpec {
        g: Arc::new(AdditiveJump { scale }),
        intensity: MarkIntensity::Atoms { points: vec![vec![-1.0], vec![1.0]], weights: vec![0.5, 0.5] },
    }
}

#[test]
fn beta_terms_are_closed_form() {
    let a = 0.5;
    let j = atoms(a);
    let term = BetaTerm::from_jump(&j).unwrap();
    for lam in [0.1, 1.0, 3.0] {
        let exact = (lam * a).exp() - lam * a - 1.0;
        assert!((compute_beta(&j, lam) - exact).abs() < 1e-12);
        assert!((term.eval(lam) - exact).abs() < 1e-12);
    }
    // 2∫₀^R (e^{λr} − λr − 1) dr for the unit-density ball of radius R
    let r = 0.5;
    let m = RadialLevyMeasure::new(Arc::new(UniformBall { scale: 1.0, r_max: r }), 1, 1e-3).unwrap();
    for lam in [0.5, 2.0, 6.0] {
        let exact = 2.0 * ((lam * r).exp_m1() / lam - lam * r * r / 2.0 - r);
        let got = m.beta_l(lam);
        assert!((got - exact).abs() < 1e-9 * exact.max(1.0), "λ {lam}: {got} vs {exact}");
    }
}

#[test]
fn alpha_t_gaussian_coefficient() {
    let k = RateConstants { c_tilde_prefactor: 2.0, c_tilde: 0.6, c_prefactor: 2.0, c: 0.6 };
    let dev = DeviationFunction::alpha_t(2.0, k, 0.5, 1.0, Vec::new());
    let a = (0.25 + 1.0) * 4.0 * (1.0 - (-2.4f64).exp()) / 1.2;
    assert!((dev.gaussian - a).abs() < 1e-12);
    for r in [0.1, 1.0, 4.0] {
        assert!((dev.eval_alpha(r).unwrap() - r * r / (2.0 * a)).abs() < 1e-8);
        assert!((dev.psi(r) - a * r * r / 2.0).abs() < 1e-12);
    }
}

#[test]
fn exact_one_dimensional_w1() {
    let a: Vec<Vec<f64>> = [0.0, 1.0, 3.0, 7.0].iter().map(|&x| vec![x]).collect();
    let b: Vec<Vec<f64>> = [2.0, -1.0, 4.0, 5.0].iter().map(|&x| vec![x]).collect();
    // sorted pairs (0,−1) (1,2) (3,4) (7,5)
    let w = empirical_w1(&a, &b, 0).unwrap();
    assert_eq!(w.method, W1Method::Exact1d);
    assert!((w.value - 5.0 / 4.0).abs() < 1e-15);
}

#[test]
fn two_dimensional_w1_by_assignment() {
    let a = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
    let b = vec![vec![1.0, 1.0], vec![0.0, 1.0]];
    let w = empirical_w1(&a, &b, 0).unwrap();
    assert!((w.value - 1.0).abs() < 1e-9, "{w:?}");
}

#[test]
fn linear_directional_derivative_limits() {
    assert!((linear_directional_derivative(1.0, 1.0, 1.0, 1.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    let e = euler_directional_derivative(1.0, 1.0, 1.0, 1.0, 1e-6);
    assert!((e - (1.0 - (-1.0f64).exp())).abs() < 1e-6);
}

#[test]
fn kolmogorov_and_wilson_reference_values() {
    assert!((kolmogorov_survival(1.0) - 0.269_999_671_677_350_2).abs() < 1e-12);
    assert!((kolmogorov_survival(1.358_098_98) - 0.05).abs() < 1e-6);
    let (lo, hi) = wilson(5, 10, 1.959_963_984_540_054);
    assert!((lo - 0.236_593_090_512_564).abs() < 1e-9 && (hi - 0.763_406_909_487_436).abs() < 1e-9, "{lo} {hi}");
}

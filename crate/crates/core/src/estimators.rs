//! Monte Carlo estimators: decay rates, empirical W₁, Malliavin-type bounds.

use pathfinding::prelude::{kuhn_munkres_min, Matrix};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coupling::{in_pool, simulate_checkpoints, simulate_drift_perturbed, simulate_marginal, CoupledPath, CouplingError, Perturbation, Scheme, SimOptions, Synchronous};
use crate::levy::norm;
use crate::model::ModelSpec;
use crate::rng::{stream, unit_direction, Purpose};
use crate::stats::{linear_fit, mean, mean_se, DEFAULT_BATCHES};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("need at least {need} paths, got {got}")]
    TooFewPaths { need: usize, got: usize },
    #[error("sample sizes differ ({a} vs {b}) for the assignment method")]
    SizeMismatch { a: usize, b: usize },
    #[error("Richardson extrapolation did not settle: residual {residual:e} > tolerance {tol:e}")]
    NonConvergent { residual: f64, tol: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvePoint {
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// Mean and standard error of `functional(|Z_t|)` at every recorded time.
pub fn mean_curve(paths: &[CoupledPath], functional: &(dyn Fn(f64) -> f64 + Sync)) -> Vec<CurvePoint> {
    let Some(first) = paths.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|k| {
            let vals: Vec<f64> = paths.iter().map(|p| functional(p.z_norm(k))).collect();
            let (m, se) = mean_se(&vals);
            CurvePoint { t: first.times[k], mean: m, stderr: se }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    pub rate: f64,
    pub prefactor: f64,
    pub stderr_rate: f64,
    pub window: (f64, f64),
    pub n_paths: usize,
    pub degenerate: bool,
    pub note: Option<String>,
}

fn fit_rows(ts: &[f64], means: &[f64]) -> Option<(f64, f64)> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = ts.iter().zip(means).filter(|(_, m)| **m > 0.0).map(|(t, m)| (*t, m.ln())).unzip();
    (xs.len() >= 2).then(|| linear_fit(&xs, &ys))
}

/// Least-squares fit of `ln E functional(|Z_t|)` on `window`; rate stderr from 16 path batches.
pub fn fit_decay(paths: &[CoupledPath], functional: &(dyn Fn(f64) -> f64 + Sync), window: (f64, f64)) -> Result<DecayFit, EstimatorError> {
    if paths.len() < 100 {
        return Err(EstimatorError::TooFewPaths { need: 100, got: paths.len() });
    }
    let times = &paths[0].times;
    let idx: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= window.0 - 1e-12 && times[k] <= window.1 + 1e-12).collect();
    if idx.len() < 2 {
        return Err(EstimatorError::Precondition(format!("window {window:?} holds fewer than two output times")));
    }
    let curve = |ps: &[CoupledPath]| -> Vec<f64> { idx.iter().map(|&k| mean(&ps.iter().map(|p| functional(p.z_norm(k))).collect::<Vec<_>>())).collect() };
    let ts: Vec<f64> = idx.iter().map(|&k| times[k]).collect();
    let full = curve(paths);
    if full[0] <= 0.0 {
        return Ok(DecayFit {
            rate: f64::INFINITY,
            prefactor: 0.0,
            stderr_rate: 0.0,
            window,
            n_paths: paths.len(),
            degenerate: true,
            note: Some(format!("all paths coupled by t = {}", window.0)),
        });
    }
    let (slope, icpt) = fit_rows(&ts, &full).ok_or_else(|| EstimatorError::Precondition("fewer than two positive means".into()))?;
    let b = DEFAULT_BATCHES;
    let rates: Vec<f64> = (0..b)
        .filter_map(|j| {
            let lo = j * paths.len() / b;
            let hi = (j + 1) * paths.len() / b;
            fit_rows(&ts, &curve(&paths[lo..hi])).map(|(s, _)| -s)
        })
        .collect();
    let stderr_rate = if rates.len() >= 2 { mean_se(&rates).1 } else { f64::NAN };
    let note = (rates.len() < b).then(|| format!("{} of {b} batches had too few positive means", b - rates.len()));
    Ok(DecayFit { rate: -slope, prefactor: icpt.exp(), stderr_rate, window, n_paths: paths.len(), degenerate: false, note })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum W1Method {
    Exact1d,
    Assignment,
    Sliced,
}

#[derive(Debug, Clone, Serialize)]
pub struct W1Estimate {
    pub value: f64,
    pub method: W1Method,
    pub n: usize,
    pub bias_note: Option<String>,
}

/// `∫|F_a − F_b|` for sorted 1-D samples of any sizes.
fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
        return mean(&d);
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut acc = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => break,
        };
        acc += (i as f64 / n - j as f64 / m).abs() * (x - prev);
        prev = x;
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
    }
    acc
}

fn sorted(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    v
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Optimal assignment `perm[i]` of `a[i]` to `b[perm[i]]` under Euclidean cost.
pub fn optimal_assignment(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    let costs: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| dist(x, y))).collect();
    let top = costs.iter().cloned().fold(0.0, f64::max);
    let scale = if top > 0.0 { 2f64.powi(40) / top } else { 1.0 };
    let weights = Matrix::from_vec(n, n, costs.iter().map(|c| (c * scale).round() as i64).collect()).expect("square cost matrix");
    kuhn_munkres_min(&weights).1
}

pub const SLICED_PROJECTIONS: usize = 64;
pub const ASSIGNMENT_LIMIT: usize = 512;

/// Empirical W₁: exact in 1-D, optimal assignment for `n ≤ 512`, sliced otherwise.
pub fn empirical_w1(a: &[Vec<f64>], b: &[Vec<f64>], seed: u64) -> Result<W1Estimate, EstimatorError> {
    if a.is_empty() || b.is_empty() {
        return Err(EstimatorError::Precondition("empty sample".into()));
    }
    let d = a[0].len();
    if d == 1 {
        let (sa, sb) = (sorted(a.iter().map(|v| v[0])), sorted(b.iter().map(|v| v[0])));
        return Ok(W1Estimate { value: w1_sorted(&sa, &sb), method: W1Method::Exact1d, n: a.len(), bias_note: None });
    }
    if a.len().max(b.len()) <= ASSIGNMENT_LIMIT {
        if a.len() != b.len() {
            return Err(EstimatorError::SizeMismatch { a: a.len(), b: b.len() });
        }
        let perm = optimal_assignment(a, b);
        let c: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| dist(&a[i], &b[j])).collect();
        return Ok(W1Estimate { value: mean(&c), method: W1Method::Assignment, n: a.len(), bias_note: None });
    }
    let mut rng = stream(seed, Purpose::Projections, 0);
    let mut dir = vec![0.0; d];
    let mut acc = Vec::with_capacity(SLICED_PROJECTIONS);
    for _ in 0..SLICED_PROJECTIONS {
        unit_direction(&mut rng, &mut dir);
        let proj = |v: &Vec<f64>| v.iter().zip(&dir).map(|(x, u)| x * u).sum::<f64>();
        acc.push(w1_sorted(&sorted(a.iter().map(proj)), &sorted(b.iter().map(proj))));
    }
    Ok(W1Estimate {
        value: mean(&acc),
        method: W1Method::Sliced,
        n: a.len(),
        bias_note: Some(format!("sliced W1 over {SLICED_PROJECTIONS} directions; a lower bound for W1 up to sampling error")),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct W1Row {
    pub t: f64,
    pub w1: f64,
    pub coupled_mean: f64,
    pub coupled_se: f64,
    pub ratio: f64,
    pub ratio_se: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct W1Report {
    pub initial_w1: f64,
    pub identical: bool,
    pub rows: Vec<W1Row>,
    pub passed: bool,
    pub note: Option<String>,
}

/// Evolves optimally paired clouds under the coupling and compares `W₁(ηp_t, μp_t)/W₁(η, μ)` with `C̃e^{−c̃t}`.
#[allow(clippy::too_many_arguments)]
pub fn w1_contractivity_check(
    model: &ModelSpec,
    scheme: &dyn Scheme,
    mu: &[Vec<f64>],
    eta: &[Vec<f64>],
    t_grid: &[f64],
    dt: f64,
    rate: (f64, f64),
    seed: u64,
    workers: usize,
) -> Result<W1Report, EstimatorError> {
    if mu.len() != eta.len() {
        return Err(EstimatorError::SizeMismatch { a: mu.len(), b: eta.len() });
    }
    let initial = empirical_w1(eta, mu, seed)?.value;
    let identical = eta == mu;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = if mu[0].len() == 1 {
        let mut a = eta.to_vec();
        let mut b = mu.to_vec();
        a.sort_by(|p, q| p[0].total_cmp(&q[0]));
        b.sort_by(|p, q| p[0].total_cmp(&q[0]));
        a.into_iter().zip(b).collect()
    } else if mu.len() <= ASSIGNMENT_LIMIT {
        let perm = optimal_assignment(eta, mu);
        perm.iter().enumerate().map(|(i, &j)| (eta[i].clone(), mu[j].clone())).collect()
    } else {
        eta.iter().cloned().zip(mu.iter().cloned()).collect()
    };
    let states: Vec<Vec<(Vec<f64>, Vec<f64>)>> = in_pool(workers, || {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, (x, y))| simulate_checkpoints(model, scheme, x, y, t_grid, dt, &mut stream(seed, Purpose::Coupled, i as u64)))
            .collect::<Result<_, _>>()
    })?;
    let (c_tilde, rate_tilde) = rate;
    let mut rows = Vec::new();
    for (k, &t) in t_grid.iter().enumerate() {
        let xs: Vec<Vec<f64>> = states.iter().map(|s| s[k].0.clone()).collect();
        let ys: Vec<Vec<f64>> = states.iter().map(|s| s[k].1.clone()).collect();
        let w1 = empirical_w1(&xs, &ys, seed)?.value;
        let gaps: Vec<f64> = states.iter().map(|s| dist(&s[k].0, &s[k].1)).collect();
        let (cm, cse) = mean_se(&gaps);
        let bound = c_tilde * (-rate_tilde * t).exp();
        let (ratio, ratio_se) = if initial > 0.0 { (w1 / initial, cse / initial) } else { (f64::NAN, f64::NAN) };
        let passed = initial == 0.0 || ratio <= bound + 3.0 * ratio_se;
        rows.push(W1Row { t, w1, coupled_mean: cm, coupled_se: cse, ratio, ratio_se, bound, passed });
    }
    let passed = rows.iter().all(|r| r.passed);
    let note = identical.then(|| "identical inputs: W1 is 0 at every time and the ratio is undefined".to_string());
    Ok(W1Report { initial_w1: initial, identical, rows, passed, note })
}

pub type Functional<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

#[derive(Debug, Clone)]
pub struct DifferenceOptions {
    pub t: f64,
    pub horizons: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DifferenceRow {
    pub horizon: f64,
    pub gap: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub lipschitz_mean: f64,
    pub lipschitz_se: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DifferenceReport {
    pub mean_jump_size: f64,
    pub rows: Vec<DifferenceRow>,
    pub passed: bool,
    pub lipschitz_step_ok: bool,
    pub note: String,
}

/// Inserts one jump `g(X_{t−}, u)` at time `t`, couples the branch back, and estimates `E[f(X^{(t,u)}_T) − f(Ŷ_T)]`.
#[allow(clippy::too_many_arguments)]
pub fn malliavin_difference_experiment(
    model: &ModelSpec,
    scheme: &dyn Scheme,
    f: Functional<'_>,
    x0: &[f64],
    u: &[f64],
    rate: (f64, f64),
    opts: &DifferenceOptions,
) -> Result<DifferenceReport, EstimatorError> {
    let jump = model.jump.as_ref().ok_or_else(|| EstimatorError::Precondition("model has no jump coefficient".into()))?;
    if opts.horizons.iter().any(|&h| h < opts.t) {
        return Err(EstimatorError::Precondition("every horizon must be ≥ t".into()));
    }
    let mut horizons = opts.horizons.clone();
    horizons.sort_by(f64::total_cmp);
    let gaps: Vec<f64> = horizons.iter().map(|h| h - opts.t).collect();
    type PathOut = (f64, Vec<(f64, f64)>);
    let per_path: Vec<PathOut> = in_pool(opts.workers, || {
        (0..opts.n_paths)
            .into_par_iter()
            .map(|i| -> Result<PathOut, CouplingError> {
                let xt = simulate_marginal(model, x0, opts.t, opts.dt, &mut stream(opts.seed, Purpose::Reference, i as u64))?;
                let mut g = vec![0.0; model.dim];
                jump.g.eval(&xt, u, &mut g);
                let branched: Vec<f64> = xt.iter().zip(&g).map(|(a, b)| a + b).collect();
                let states = simulate_checkpoints(model, scheme, &branched, &xt, &gaps, opts.dt, &mut stream(opts.seed, Purpose::Branch, i as u64))?;
                let diffs = states.iter().map(|(a, b)| (f(a) - f(b), dist(a, b))).collect();
                Ok((norm(&g), diffs))
            })
            .collect::<Result<_, _>>()
    })?;
    let sizes: Vec<f64> = per_path.iter().map(|p| p.0).collect();
    let mean_jump = mean(&sizes);
    let (c_tilde, rate_tilde) = rate;
    let mut rows = Vec::new();
    let mut lip_ok = true;
    for (k, (&horizon, &gap)) in horizons.iter().zip(&gaps).enumerate() {
        let est: Vec<f64> = per_path.iter().map(|p| p.1[k].0).collect();
        let lip: Vec<f64> = per_path.iter().map(|p| p.1[k].1).collect();
        let (m, se) = mean_se(&est);
        let (lm, lse) = mean_se(&lip);
        lip_ok &= m <= lm + 1e-12 * (1.0 + lm);
        let bound = c_tilde * (-rate_tilde * gap).exp() * mean_jump;
        rows.push(DifferenceRow { horizon, gap, estimate: m, stderr: se, lipschitz_mean: lm, lipschitz_se: lse, bound, passed: m <= bound + 3.0 * se });
    }
    let passed = rows.iter().all(|r| r.passed) && lip_ok;
    Ok(DifferenceReport {
        mean_jump_size: mean_jump,
        rows,
        passed,
        lipschitz_step_ok: lip_ok,
        note: "the L∞ form of the bound is not estimable by Monte Carlo; the conditional expectation is checked in its integrated form".into(),
    })
}

#[derive(Debug, Clone)]
pub struct DirectionalOptions {
    pub t: f64,
    pub eps: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub workers: usize,
    pub rel_tol: f64,
}

impl DirectionalOptions {
    pub fn new(t: f64, n_paths: usize, dt: f64, seed: u64) -> Self {
        Self { t, eps: vec![0.1, 0.05, 0.025], n_paths, dt, seed, workers: 0, rel_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionalReport {
    pub eps_rows: Vec<EpsRow>,
    pub estimate: f64,
    pub stderr: f64,
    pub residual: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// Finite differences `(f(X_t)(W + ε∫h) − f(X_t)(W))/ε` with common random numbers, extrapolated by Richardson.
pub fn malliavin_brownian_experiment(
    model: &ModelSpec,
    h: Perturbation<'_>,
    h_sup: f64,
    f: Functional<'_>,
    x0: &[f64],
    constants: (f64, f64),
    opts: &DirectionalOptions,
) -> Result<DirectionalReport, EstimatorError> {
    let s1 = crate::coupling::Sigma1::from_model(model).ok_or_else(|| EstimatorError::Precondition("needs an additive Brownian part".into()))?;
    if opts.eps.len() < 2 {
        return Err(EstimatorError::Precondition("need at least two ε values".into()));
    }
    let sim = SimOptions { t_end: opts.t, dt: opts.dt, record_every: usize::MAX, log_jumps: false };
    let per_path: Vec<Vec<f64>> = in_pool(opts.workers, || {
        (0..opts.n_paths)
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>, CouplingError> {
                opts.eps
                    .iter()
                    .map(|&eps| {
                        let shifted = |t: f64, x: &[f64], out: &mut [f64]| {
                            let mut hv = vec![0.0; out.len()];
                            h(t, x, &mut hv);
                            s1.apply(&hv, out);
                            out.iter_mut().for_each(|v| *v *= eps);
                        };
                        let p = simulate_drift_perturbed(model, &shifted, &Synchronous, x0, &sim, &mut stream(opts.seed, Purpose::Coupled, i as u64))?;
                        Ok((f(p.final_x()) - f(p.final_y())) / eps)
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()
    })?;
    let k = opts.eps.len();
    let eps_rows: Vec<EpsRow> = (0..k)
        .map(|j| {
            let (m, se) = mean_se(&per_path.iter().map(|p| p[j]).collect::<Vec<_>>());
            EpsRow { eps: opts.eps[j], mean: m, stderr: se }
        })
        .collect();
    let richardson = |p: &[f64], j: usize| {
        let r = opts.eps[j] / opts.eps[j + 1];
        (r * p[j + 1] - p[j]) / (r - 1.0)
    };
    let last: Vec<f64> = per_path.iter().map(|p| richardson(p, k - 2)).collect();
    let (estimate, stderr) = mean_se(&last);
    let residual = if k >= 3 {
        let prev: Vec<f64> = per_path.iter().map(|p| richardson(p, k - 3)).collect();
        let diff: Vec<f64> = last.iter().zip(&prev).map(|(a, b)| a - b).collect();
        let (m, se) = mean_se(&diff);
        let tol = opts.rel_tol * (1.0 + estimate.abs()) + 3.0 * se.max(0.0);
        if m.abs() > tol {
            return Err(EstimatorError::NonConvergent { residual: m.abs(), tol });
        }
        m.abs()
    } else {
        0.0
    };
    let (c, rate) = constants;
    let s1_norm = model.diffusion.sigma1_norm();
    let bound = c * s1_norm * (-(-rate * opts.t).exp_m1()) / rate * h_sup;
    Ok(DirectionalReport { eps_rows, estimate, stderr, residual, bound, within_bound: estimate.abs() <= bound + 3.0 * stderr.max(0.0) })
}

/// Directional derivative of `X_t` for `dX = −KX dt + s dW` along a constant `h`: `s h (1 − e^{−Kt})/K`.
pub fn linear_directional_derivative(k: f64, s: f64, h: f64, t: f64) -> f64 {
    s * h * (-(-k * t).exp_m1()) / k
}

/// The same quantity for the Euler scheme with step `dt`: `s h (1 − (1 − K dt)^n)/K`.
pub fn euler_directional_derivative(k: f64, s: f64, h: f64, t: f64, dt: f64) -> f64 {
    let n = (t / dt).round() as i32;
    s * h * (1.0 - (1.0 - k * dt).powi(n)) / k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn w1_translation() {
        let a = col(&[0.0; 10]);
        let b = col(&[1.0; 10]);
        assert_eq!(empirical_w1(&a, &b, 0).unwrap().value, 1.0);
        assert_eq!(empirical_w1(&a, &a, 0).unwrap().value, 0.0);
    }

    #[test]
    fn w1_unequal_sizes_1d() {
        let a = col(&[0.0, 1.0]);
        let b = col(&[0.0, 0.0, 1.0, 1.0]);
        assert!(empirical_w1(&a, &b, 0).unwrap().value.abs() < 1e-15);
        let c = col(&[2.0]);
        assert!((empirical_w1(&a, &c, 0).unwrap().value - 1.5).abs() < 1e-15);
    }

    #[test]
    fn assignment_small_square() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let b = vec![vec![1.0, 0.1], vec![0.0, 0.1]];
        let w = empirical_w1(&a, &b, 0).unwrap();
        assert_eq!(w.method, W1Method::Assignment);
        assert!((w.value - 0.1).abs() < 1e-12);
        let c = vec![vec![0.0, 0.0]];
        assert!(matches!(empirical_w1(&a, &c, 0), Err(EstimatorError::SizeMismatch { .. })));
    }

    #[test]
    fn euler_derivative_converges() {
        let a = linear_directional_derivative(1.0, 1.0, 1.0, 2.0);
        let b = euler_directional_derivative(1.0, 1.0, 1.0, 2.0, 1e-5);
        assert!((a - b).abs() < 1e-5);
    }
}

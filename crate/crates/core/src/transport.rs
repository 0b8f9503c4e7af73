//! Deviation functions and their dual (MGF / tail) checks.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::interp::Pchip;
use crate::levy::RadialLevyMeasure;
use crate::model::{JumpCoeffSpec, MarkIntensity};
use crate::quad::golden_max;
use crate::stats::{batch_means, wilson, DEFAULT_BATCHES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("β(λ) = +∞ for every λ > 0")]
    EmptyFeasibleSet,
    #[error("r λ − α(r) grows without bound at λ = {lam} (bracket reached r = {r:e})")]
    Unbounded { lam: f64, r: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// `e^x − x − 1` without cancellation for small `x`.
fn exp_excess(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        x * x * (0.5 + x * (1.0 / 6.0 + x / 24.0))
    } else {
        x.exp_m1() - x
    }
}

/// `β(λ) = ∫ (e^{λ g∞(u)} − λ g∞(u) − 1) ν(du)`.
pub fn compute_beta(jump: &JumpCoeffSpec, lam: f64) -> f64 {
    if lam == 0.0 {
        return 0.0;
    }
    let v = jump.intensity.integrate(|u| exp_excess(lam * jump.g.envelope(u)));
    if v.is_finite() && v >= 0.0 {
        v
    } else {
        f64::INFINITY
    }
}

type BetaFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// One exponential-compensator term, either exact or tabulated.
#[derive(Clone)]
pub struct BetaTerm {
    pub label: &'static str,
    eval: BetaFn,
    /// Finiteness boundary (`+∞` if finite everywhere probed).
    pub s_max: f64,
}

impl std::fmt::Debug for BetaTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BetaTerm").field("label", &self.label).field("s_max", &self.s_max).finish()
    }
}

fn finiteness_boundary(f: &dyn Fn(f64) -> f64) -> Result<f64, TransportError> {
    if !f(2f64.powi(-40)).is_finite() {
        return Err(TransportError::EmptyFeasibleSet);
    }
    let mut s = 1.0;
    while f(s).is_finite() && f(s) < 1e250 {
        s *= 2.0;
        if s > 2f64.powi(40) {
            return Ok(f64::INFINITY);
        }
    }
    if f(s).is_finite() {
        return Ok(f64::INFINITY);
    }
    let (mut good, mut bad) = (s / 2.0, s);
    while !f(good).is_finite() {
        bad = good;
        good /= 2.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (good + bad);
        if f(mid).is_finite() {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(good)
}

/// Largest `s` with `β(s) < 1e250`, capped at the finiteness boundary.
fn working_range(f: &dyn Fn(f64) -> f64, s_max: f64) -> f64 {
    let cap = if s_max.is_finite() { 0.999 * s_max } else { 2f64.powi(40) };
    if f(cap).is_finite() && f(cap) < 1e250 {
        return cap;
    }
    let (mut good, mut bad) = (0.0, cap);
    for _ in 0..80 {
        let mid = 0.5 * (good + bad);
        let v = f(mid);
        if v.is_finite() && v < 1e250 {
            good = mid;
        } else {
            bad = mid;
        }
    }
    good
}

impl BetaTerm {
    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            0.0
        } else if s > self.s_max {
            f64::INFINITY
        } else {
            (self.eval)(s)
        }
    }

    /// `β` of a jump coefficient; exact for atomic intensities, tabulated otherwise.
    pub fn from_jump(jump: &JumpCoeffSpec) -> Result<Self, TransportError> {
        let j = jump.clone();
        let exact = move |s: f64| compute_beta(&j, s);
        let s_max = finiteness_boundary(&exact)?;
        match jump.intensity {
            MarkIntensity::Atoms { .. } => Ok(Self { label: "beta", eval: Arc::new(exact), s_max }),
            MarkIntensity::Interval { .. } => Ok(Self::tabulated("beta", &exact, s_max)),
        }
    }

    /// `β^L(s) = ∫ (e^{s|v|} − s|v| − 1) ν^L(dv)`, tabulated.
    pub fn from_levy(measure: &RadialLevyMeasure) -> Result<Self, TransportError> {
        let m = measure.clone();
        let exact = move |s: f64| m.beta_l(s);
        let s_max = finiteness_boundary(&exact)?;
        Ok(Self::tabulated("beta_L", &exact, s_max))
    }

    pub fn from_fn(label: &'static str, f: BetaFn) -> Result<Self, TransportError> {
        let s_max = finiteness_boundary(f.as_ref())?;
        Ok(Self { label, eval: f, s_max })
    }

    fn tabulated(label: &'static str, f: &dyn Fn(f64) -> f64, s_max: f64) -> Self {
        let hi = working_range(f, s_max);
        let n = 8192;
        let xs: Vec<f64> = (0..=n).map(|k| hi * k as f64 / n as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&s| f(s)).collect();
        let table = Pchip::new(xs, ys);
        Self { label, eval: Arc::new(move |s| if s > hi { f64::INFINITY } else { table.eval(s).max(0.0) }), s_max: hi }
    }
}

/// Time profile `w(t)` in `∫₀^T β(w(t)λ) dt`.
#[derive(Clone)]
pub enum Weight {
    /// `C̃ e^{−c̃(T−t)}`.
    Exponential { prefactor: f64, rate: f64 },
    /// `C̃ (1 − e^{−c̃(T−t)}) / c̃`.
    PathIntegrated { prefactor: f64, rate: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Weight {
    fn at(&self, t: f64, horizon: f64) -> f64 {
        match self {
            Weight::Exponential { prefactor, rate } => prefactor * (-rate * (horizon - t)).exp(),
            Weight::PathIntegrated { prefactor, rate } => prefactor * (-(-rate * (horizon - t)).exp_m1()) / rate,
            Weight::Custom(w) => w(horizon - t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DeviationKind {
    AlphaT,
    AlphaTPath,
    AlphaInfty,
    Custom,
}

/// Contraction constants: `(C̃, c̃)` for initial perturbations, `(C, c)` for drift perturbations.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateConstants {
    pub c_tilde_prefactor: f64,
    pub c_tilde: f64,
    pub c_prefactor: f64,
    pub c: f64,
}

/// `α(r) = sup_{λ ≥ 0} { rλ − Ψ(λ) }` with `Ψ(λ) = Σ∫₀^T β_k(w(t)λ) dt + aλ²/2`.
#[derive(Clone)]
pub struct DeviationFunction {
    pub kind: DeviationKind,
    pub horizon: f64,
    weight: Weight,
    betas: Vec<BetaTerm>,
    pub gaussian: f64,
    time_nodes: usize,
    lam_max: f64,
}

impl std::fmt::Debug for DeviationFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviationFunction")
            .field("kind", &self.kind)
            .field("horizon", &self.horizon)
            .field("betas", &self.betas)
            .field("gaussian", &self.gaussian)
            .field("lam_max", &self.lam_max)
            .finish()
    }
}

impl DeviationFunction {
    pub fn new(kind: DeviationKind, horizon: f64, weight: Weight, betas: Vec<BetaTerm>, gaussian: f64) -> Self {
        let mut d = Self { kind, horizon, weight, betas, gaussian, time_nodes: 512, lam_max: f64::INFINITY };
        let w_max = (0..=d.time_nodes)
            .map(|k| d.weight.at(horizon * k as f64 / d.time_nodes as f64, horizon))
            .fold(0.0, f64::max);
        let s_max = d.betas.iter().map(|b| b.s_max).fold(f64::INFINITY, f64::min);
        d.lam_max = if w_max > 0.0 { s_max / w_max } else { f64::INFINITY };
        d
    }

    /// Pure Gaussian deviation `Ψ(λ) = aλ²/2`, so `α(r) = r²/(2a)`.
    pub fn quadratic(a: f64) -> Self {
        Self::new(DeviationKind::Custom, 1.0, Weight::Exponential { prefactor: 0.0, rate: 1.0 }, Vec::new(), a)
    }

    /// `α_T` built from the contraction constants.
    pub fn alpha_t(horizon: f64, k: RateConstants, sigma_inf: f64, sigma1_norm: f64, betas: Vec<BetaTerm>) -> Self {
        let a = (sigma_inf.powi(2) + sigma1_norm.powi(2)) * k.c_prefactor.powi(2) * (-(-2.0 * k.c * horizon).exp_m1()) / (2.0 * k.c);
        let w = Weight::Exponential { prefactor: k.c_tilde_prefactor, rate: k.c_tilde };
        Self::new(DeviationKind::AlphaT, horizon, w, betas, a)
    }

    /// Path-space `α_T^P` with the inner time integrals in closed form.
    pub fn alpha_t_path(horizon: f64, k: RateConstants, sigma_inf: f64, sigma1_norm: f64, betas: Vec<BetaTerm>) -> Self {
        let c = k.c;
        let e1 = -(-c * horizon).exp_m1();
        let e2 = -(-2.0 * c * horizon).exp_m1();
        let integral = (horizon - 2.0 * e1 / c + e2 / (2.0 * c)) / (c * c);
        let a = (sigma_inf.powi(2) + sigma1_norm.powi(2)) * k.c_prefactor.powi(2) * integral;
        let w = Weight::PathIntegrated { prefactor: k.c_tilde_prefactor, rate: k.c_tilde };
        Self::new(DeviationKind::AlphaTPath, horizon, w, betas, a)
    }

    /// `α_∞` as `α_T` at `T = 50/c̃`; also returns the largest relative gap to `T = 100/c̃` over `probe`.
    pub fn alpha_infty(k: RateConstants, sigma_inf: f64, sigma1_norm: f64, betas: Vec<BetaTerm>, probe: &[f64]) -> Result<(Self, f64), TransportError> {
        let mut short = Self::alpha_t(50.0 / k.c_tilde, k, sigma_inf, sigma1_norm, betas.clone());
        let long = Self::alpha_t(100.0 / k.c_tilde, k, sigma_inf, sigma1_norm, betas);
        let mut gap: f64 = 0.0;
        for &r in probe {
            let (a, b) = (short.eval_alpha(r)?, long.eval_alpha(r)?);
            if b > 0.0 {
                gap = gap.max((a - b).abs() / b);
            }
        }
        short.kind = DeviationKind::AlphaInfty;
        Ok((short, gap))
    }

    pub fn lam_max(&self) -> f64 {
        self.lam_max
    }

    pub fn betas(&self) -> &[BetaTerm] {
        &self.betas
    }

    /// `Ψ(λ)`; by Fenchel–Moreau this is also `α*(λ)`.
    pub fn psi(&self, lam: f64) -> f64 {
        if lam <= 0.0 {
            return 0.0;
        }
        if lam > self.lam_max {
            return f64::INFINITY;
        }
        let mut total = 0.5 * self.gaussian * lam * lam;
        if self.betas.is_empty() {
            return total;
        }
        let n = self.time_nodes;
        let h = self.horizon / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let t = k as f64 * h;
            let s = self.weight.at(t, self.horizon) * lam;
            let v: f64 = self.betas.iter().map(|b| b.eval(s)).sum();
            let wgt = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += wgt * v;
        }
        total += acc * h / 3.0;
        total
    }

    pub fn eval_alpha(&self, r: f64) -> Result<f64, TransportError> {
        if r < 0.0 {
            return Err(TransportError::InvalidParameter(format!("r = {r} < 0")));
        }
        if r == 0.0 {
            return Ok(0.0);
        }
        if self.lam_max <= 0.0 {
            return Err(TransportError::EmptyFeasibleSet);
        }
        let obj = |lam: f64| r * lam - self.psi(lam);
        let hi = if self.lam_max.is_finite() {
            0.999 * self.lam_max
        } else {
            if self.gaussian <= 0.0 && self.betas.is_empty() {
                return Ok(f64::INFINITY);
            }
            let mut hi = 1.0;
            while obj(2.0 * hi) > obj(hi) {
                hi *= 2.0;
                if hi > 1e15 {
                    return Ok(f64::INFINITY);
                }
            }
            2.0 * hi
        };
        let (_, v) = golden_max(obj, 0.0, hi, 1e-13 * hi);
        Ok(v.max(0.0))
    }

    /// `(r, α(r))` rows.
    pub fn table(&self, rs: &[f64]) -> Result<Vec<(f64, f64)>, TransportError> {
        rs.iter().map(|&r| self.eval_alpha(r).map(|a| (r, a))).collect()
    }
}

/// `α*(λ) = sup_{r ≥ 0} (rλ − α(r))` by golden section on a growing bracket.
pub fn convex_conjugate<F: Fn(f64) -> f64>(alpha: F, lam: f64) -> Result<f64, TransportError> {
    let obj = |r: f64| r * lam - alpha(r);
    let mut hi = 1.0;
    while obj(2.0 * hi) > obj(hi) {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(TransportError::Unbounded { lam, r: hi });
        }
    }
    let (_, v) = golden_max(obj, 0.0, 2.0 * hi, 1e-13 * hi);
    Ok(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct MgfRow {
    pub lam: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub bound: f64,
    pub conjugate_numeric: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MgfReport {
    pub rows: Vec<MgfRow>,
    pub n: usize,
    pub passed: bool,
}

fn log_mean_exp(xs: &[f64], lam: f64, centre: f64) -> f64 {
    let top = xs.iter().map(|x| lam * (x - centre)).fold(f64::NEG_INFINITY, f64::max);
    let s: Vec<f64> = xs.iter().map(|x| (lam * (x - centre) - top).exp()).collect();
    top + (crate::stats::pairwise_sum(&s) / xs.len() as f64).ln()
}

/// Compares `ln E e^{λ(F − EF)}` with `α*(λ)` on `lam_grid`; F must be 1-Lipschitz.
pub fn mgf_check(samples: &[f64], dev: &DeviationFunction, lam_grid: &[f64], numeric_conjugate: bool) -> MgfReport {
    let centre = crate::stats::mean(samples);
    let rows: Vec<MgfRow> = lam_grid
        .iter()
        .map(|&lam| {
            let (empirical, se) = if lam == 0.0 {
                (0.0, 0.0)
            } else {
                batch_means(samples, DEFAULT_BATCHES, |b| log_mean_exp(b, lam, centre))
            };
            let bound = dev.psi(lam);
            let conjugate_numeric = numeric_conjugate.then(|| convex_conjugate(|r| dev.eval_alpha(r).unwrap_or(f64::INFINITY), lam).ok()).flatten();
            MgfRow { lam, empirical, stderr: se, bound, conjugate_numeric, passed: empirical <= bound + 3.0 * se.max(0.0) }
        })
        .collect();
    let passed = rows.iter().all(|r| r.passed);
    MgfReport { rows, n: samples.len(), passed }
}

#[derive(Debug, Clone, Serialize)]
pub struct TailRow {
    pub r: f64,
    pub exceed: u64,
    pub blocks: u64,
    pub empirical: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub rows: Vec<TailRow>,
    pub n_block: usize,
    pub passed: bool,
}

/// Block means of `n_block` i.i.d. values against `exp(−n_block α(r))`.
pub fn tail_check(samples: &[f64], dev: &DeviationFunction, r_grid: &[f64], n_block: usize) -> Result<TailReport, TransportError> {
    if n_block == 0 || samples.len() < n_block {
        return Err(TransportError::InvalidParameter("need at least one full block".into()));
    }
    let centre = crate::stats::mean(samples);
    let means: Vec<f64> = samples.chunks_exact(n_block).map(|c| crate::stats::mean(c) - centre).collect();
    let blocks = means.len() as u64;
    let mut rows = Vec::new();
    for &r in r_grid {
        let exceed = means.iter().filter(|&&m| m > r).count() as u64;
        let (lo, hi) = wilson(exceed, blocks, 3.0);
        let bound = (-(n_block as f64) * dev.eval_alpha(r)?).exp();
        rows.push(TailRow {
            r,
            exceed,
            blocks,
            empirical: exceed as f64 / blocks as f64,
            wilson_lo: lo,
            wilson_hi: hi,
            bound,
            passed: lo <= bound,
        });
    }
    let passed = rows.iter().all(|r| r.passed);
    Ok(TailReport { rows, n_block, passed })
}

/// Time average `(1/T)∫₀^T ℓ(γ(t)) dt` by the trapezoid rule; 1-Lipschitz in `d_{L¹}/T` when ℓ is.
pub fn path_average(times: &[f64], values: &[f64]) -> f64 {
    let span = times.last().copied().unwrap_or(0.0) - times.first().copied().unwrap_or(0.0);
    if span <= 0.0 {
        return values.first().copied().unwrap_or(0.0);
    }
    let s: f64 = times.windows(2).zip(values.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum();
    s / span
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AdditiveJump;

    fn atoms(a: f64, mass: f64) -> JumpCoeffSpec {
        JumpCoeffSpec {
            g: Arc::new(AdditiveJump { scale: a }),
            intensity: MarkIntensity::Atoms { points: vec![vec![1.0], vec![-1.0]], weights: vec![mass / 2.0, mass / 2.0] },
        }
    }

    #[test]
    fn beta_constant_envelope() {
        let j = atoms(0.5, 3.0);
        assert_eq!(compute_beta(&j, 0.0), 0.0);
        let lam = 1.7;
        let want = 3.0 * ((lam * 0.5f64).exp() - lam * 0.5 - 1.0);
        assert!((compute_beta(&j, lam) - want).abs() < 1e-13);
    }

    #[test]
    fn quadratic_alpha_is_exact() {
        let d = DeviationFunction::quadratic(0.7);
        for r in [0.0, 0.1, 1.0, 3.5] {
            let a = d.eval_alpha(r).unwrap();
            assert!((a - r * r / 1.4).abs() <= 1e-10 * (1.0 + a), "{r} {a}");
        }
    }

    #[test]
    fn linear_alpha_conjugate() {
        assert_eq!(convex_conjugate(|r| r, 0.5).unwrap(), 0.0);
        assert!(matches!(convex_conjugate(|r| r, 1.5), Err(TransportError::Unbounded { .. })));
        let v = convex_conjugate(|r| r * r / 2.0, 1.3).unwrap();
        assert!((v - 1.3 * 1.3 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn path_weight_gaussian_closed_form() {
        let k = RateConstants { c_tilde_prefactor: 1.0, c_tilde: 1.0, c_prefactor: 2.0, c: 0.5 };
        let d = DeviationFunction::alpha_t_path(3.0, k, 0.0, 1.0, Vec::new());
        let n = 200_000;
        let h = 3.0 / n as f64;
        let brute: f64 = (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) * h;
                ((1.0 - (-0.5 * (3.0 - t)).exp()) / 0.5).powi(2)
            })
            .sum::<f64>()
            * h
            * 4.0;
        assert!((d.gaussian - brute).abs() < 1e-8 * brute);
    }

    #[test]
    fn empty_feasible_set() {
        let f: BetaFn = Arc::new(|s| if s > 0.0 { f64::INFINITY } else { 0.0 });
        assert!(matches!(BetaTerm::from_fn("x", f), Err(TransportError::EmptyFeasibleSet)));
    }

    #[test]
    fn tail_bound_trivial_at_zero() {
        let d = DeviationFunction::quadratic(1.0);
        let xs: Vec<f64> = (0..1000).map(|i| (i % 7) as f64).collect();
        let rep = tail_check(&xs, &d, &[0.0], 10).unwrap();
        assert_eq!(rep.rows[0].bound, 1.0);
        assert!(rep.passed);
    }
}

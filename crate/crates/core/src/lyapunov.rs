//! Concave distance functions and contraction certificates.
//!
//! Two constructions are provided. [`build_f_brownian`] targets
//! `2f'' − rκf' ≤ −cαf` (reflection coupling of an additive Brownian part);
//! [`build_f1_jump`] targets `−f₁'κr + 2f₁'γ + C_ε f̂_ε ≤ −c₁f₁` (mirror
//! coupling of a rotationally invariant Lévy part). [`certify`] evaluates the
//! corresponding residual on a refinement grid.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::interp::hermite;
use crate::levy::{LevyError, RadialLevyMeasure};
use crate::model::{d2_holds, Curvature};
use crate::quad::bisect;

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error("κ is not dissipative at infinity: {0}")]
    NotDissipative(String),
    #[error("κ fails to vanish-regularly at zero (r κ(r) ↛ 0, witness r = {0:e})")]
    IrregularAtZero(f64),
    #[error("φ(R₀) underflows: ∫₀^R₀ sκ⁻(s) ds / 2 = {exponent:e}")]
    CurvatureUnbounded { exponent: f64 },
    #[error("no R₁ candidate up to {upper} passed the affine-region check")]
    RadiusSearchFailed { upper: f64 },
    #[error("no feasible (δ, ε, M) on the grid explored: {}", describe_trials(.explored))]
    FeasibilitySearchFailed { explored: Vec<FeasibilityTrial> },
    #[error("jump grid would need {nodes} nodes (limit {limit})")]
    GridTooLarge { nodes: usize, limit: usize },
    #[error(transparent)]
    Levy(#[from] LevyError),
}

fn describe_trials(t: &[FeasibilityTrial]) -> String {
    let ks: Vec<String> = t.iter().map(|x| format!("k={} M={:?}", x.k, x.m)).collect();
    ks.join(", ")
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
fn hermite_integral(h: f64, y0: f64, y1: f64, d0: f64, d1: f64) -> f64 {
    h * (y0 + y1) / 2.0 + h * h * (d0 - d1) / 12.0
}

#[inline]
fn neg_part(x: f64) -> f64 {
    if x < 0.0 {
        -x
    } else {
        0.0
    }
}

/// `−expm1(−x)/x`, continuous at 0.
#[inline]
fn decay_factor(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x / 2.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// `R₀ = inf{R ≥ 0 : κ ≥ 0 on [R, ∞)}`.
pub fn zero_radius(kappa: &dyn Curvature) -> Result<f64, LyapunovError> {
    let top = (-10..=30)
        .map(|k| 2f64.powi(k))
        .find(|&x| kappa.tail_lower_bound(x).is_some_and(|v| v >= 0.0))
        .unwrap_or(1e3);
    if kappa.eval(top) < 0.0 {
        return Err(LyapunovError::NotDissipative(format!("κ({top}) = {} < 0", kappa.eval(top))));
    }
    let n = 1 << 16;
    let step = top / n as f64;
    let last_neg = (0..=n).rev().find(|&i| kappa.eval(i as f64 * step) < 0.0);
    match last_neg {
        None => Ok(0.0),
        Some(i) => {
            let bad = i as f64 * step;
            Ok(bisect(|r| kappa.eval(r) >= 0.0, bad + step, bad, 1e-14))
        }
    }
}

/// `sup_{0 < r < λ} |r κ(r)|`, grid maximum inflated by the largest adjacent variation.
pub fn local_bound(kappa: &dyn Curvature, lam: f64) -> f64 {
    let n = 4096;
    let vals: Vec<f64> = (0..=n).map(|i| {
        let r = lam * i as f64 / n as f64;
        r * kappa.eval(r)
    }).collect();
    let max = vals.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let var = vals.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    max + var
}

#[derive(Debug, Clone, Serialize)]
pub struct Constants {
    pub values: BTreeMap<String, f64>,
}

impl Constants {
    fn new(pairs: &[(&str, f64)]) -> Self {
        Self { values: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}

// ---------------------------------------------------------------------------
// Brownian route

#[derive(Debug, Clone, Copy)]
pub struct BrownianOptions {
    pub r_min: f64,
    pub log_points: usize,
    pub linear_points: usize,
    pub scan_points: usize,
    pub check_points: usize,
}

impl Default for BrownianOptions {
    fn default() -> Self {
        Self { r_min: 1e-8, log_points: 2048, linear_points: 8192, scan_points: 1 << 16, check_points: 2000 }
    }
}

#[derive(Debug, Clone, Copy)]
struct ProfilePoint {
    log_phi: f64,
    slope: f64,
    phi: f64,
    big_phi: f64,
    i: f64,
    j: f64,
}

/// Cumulative tables of `log φ`, `Φ`, `I = ∫Φ/φ` and `J = ∫φI` on a grid.
#[derive(Debug, Clone)]
struct Profile {
    grid: Vec<f64>,
    slope: Vec<f64>,
    log_phi: Vec<f64>,
    big_phi: Vec<f64>,
    i: Vec<f64>,
    j: Vec<f64>,
}

impl Profile {
    fn build(kappa: &dyn Curvature, grid: Vec<f64>) -> Self {
        let n = grid.len();
        let s = |r: f64| -0.5 * r * neg_part(kappa.eval(r));
        let slope: Vec<f64> = grid.iter().map(|&r| s(r)).collect();
        let mut log_phi = vec![0.0; n];
        for k in 0..n - 1 {
            let (a, b) = (grid[k], grid[k + 1]);
            log_phi[k + 1] = log_phi[k] + (b - a) / 6.0 * (slope[k] + 4.0 * s(0.5 * (a + b)) + slope[k + 1]);
        }
        let phi: Vec<f64> = log_phi.iter().map(|v| v.exp()).collect();
        let dphi: Vec<f64> = phi.iter().zip(&slope).map(|(p, s)| p * s).collect();
        let mut big_phi = vec![0.0; n];
        for k in 0..n - 1 {
            let h = grid[k + 1] - grid[k];
            big_phi[k + 1] = big_phi[k] + hermite_integral(h, phi[k], phi[k + 1], dphi[k], dphi[k + 1]);
        }
        let q: Vec<f64> = (0..n).map(|k| big_phi[k] / phi[k]).collect();
        let dq: Vec<f64> = (0..n).map(|k| 1.0 - q[k] * slope[k]).collect();
        let mut i = vec![0.0; n];
        for k in 0..n - 1 {
            let h = grid[k + 1] - grid[k];
            i[k + 1] = i[k] + hermite_integral(h, q[k], q[k + 1], dq[k], dq[k + 1]);
        }
        let p: Vec<f64> = (0..n).map(|k| phi[k] * i[k]).collect();
        let dp: Vec<f64> = (0..n).map(|k| phi[k] * (slope[k] * i[k] + q[k])).collect();
        let mut j = vec![0.0; n];
        for k in 0..n - 1 {
            let h = grid[k + 1] - grid[k];
            j[k + 1] = j[k] + hermite_integral(h, p[k], p[k + 1], dp[k], dp[k + 1]);
        }
        Self { grid, slope, log_phi, big_phi, i, j }
    }

    fn end(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    fn eval(&self, kappa: &dyn Curvature, r: f64) -> ProfilePoint {
        let k = crate::interp::segment(&self.grid, r);
        let (a, b) = (self.grid[k], self.grid[k + 1]);
        let (pa, pb) = (self.log_phi[k].exp(), self.log_phi[k + 1].exp());
        let log_phi = hermite(a, b, self.log_phi[k], self.log_phi[k + 1], self.slope[k], self.slope[k + 1], r);
        let phi = log_phi.exp();
        let slope = -0.5 * r * neg_part(kappa.eval(r));
        let big_phi = hermite(a, b, self.big_phi[k], self.big_phi[k + 1], pa, pb, r);
        let (qa, qb) = (self.big_phi[k] / pa, self.big_phi[k + 1] / pb);
        let i = hermite(a, b, self.i[k], self.i[k + 1], qa, qb, r);
        let j = hermite(a, b, self.j[k], self.j[k + 1], pa * self.i[k], pb * self.i[k + 1], r);
        ProfilePoint { log_phi, slope, phi, big_phi, i, j }
    }
}

fn hybrid_grid(r_min: f64, r_max: f64, log_points: usize, linear_points: usize, extra: &[f64]) -> Vec<f64> {
    let knee = r_max.min(1.0);
    let mut g = vec![0.0];
    if r_min < knee {
        let (la, lb) = (r_min.ln(), knee.ln());
        g.extend((0..log_points).map(|k| (la + (lb - la) * k as f64 / (log_points - 1) as f64).exp()));
    }
    if r_max > knee {
        g.extend((1..=linear_points).map(|k| knee + (r_max - knee) * k as f64 / linear_points as f64));
    }
    g.extend(extra.iter().copied().filter(|&x| x > 0.0 && x < r_max));
    g.sort_by(f64::total_cmp);
    g.dedup_by(|b, a| (*b - *a).abs() <= 1e-13 * (1.0 + a.abs()));
    g
}

/// `f(r) = ∫₀^r φg` with `φ = exp(−½∫sκ⁻)`, `g = 1 − (cα/2)∫Φ/φ` up to R₁ and ½ beyond.
#[derive(Debug, Clone)]
pub struct BrownianFn {
    kappa: Arc<dyn Curvature>,
    alpha: f64,
    profile: Profile,
    r0: f64,
    r1: f64,
    rate: f64,
    phi_r0: f64,
    i_r1: f64,
    big_phi_r1: f64,
    f_r1: f64,
    r_max: f64,
    f_rmax: f64,
    tail_slope: f64,
}

#[derive(Debug, Clone, Copy)]
struct Eval {
    f: f64,
    d1: f64,
    d2: f64,
}

impl BrownianFn {
    fn eval(&self, r: f64) -> Eval {
        if r <= 0.0 {
            return Eval { f: 0.0, d1: 1.0, d2: 0.0 };
        }
        if r > self.r_max {
            return Eval { f: self.f_rmax + self.tail_slope * (r - self.r_max), d1: self.tail_slope, d2: 0.0 };
        }
        let p = self.profile.eval(self.kappa.as_ref(), r);
        if r <= self.r1 {
            let g = 1.0 - p.i / (2.0 * self.i_r1);
            Eval {
                f: p.big_phi - p.j / (2.0 * self.i_r1),
                d1: p.phi * g,
                d2: p.slope * p.phi * g - p.big_phi / (2.0 * self.i_r1),
            }
        } else {
            Eval { f: self.f_r1 + 0.5 * (p.big_phi - self.big_phi_r1), d1: 0.5 * p.phi, d2: 0.5 * p.slope * p.phi }
        }
    }

    fn residual(&self, r: f64, rate: f64) -> f64 {
        let e = self.eval(r);
        2.0 * e.d2 - r * self.kappa.eval(r) * e.d1 + rate * self.alpha * e.f
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn prefactor(&self) -> f64 {
        2.0 / self.phi_r0
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    pub fn phi_r0(&self) -> f64 {
        self.phi_r0
    }

    pub fn grid(&self) -> &[f64] {
        &self.profile.grid
    }
}

fn affine_ok(profile: &Profile, kappa: &dyn Curvature, r: f64, points: usize) -> bool {
    let p = profile.eval(kappa, r);
    if !(p.i > 0.0) {
        return false;
    }
    let rate_alpha = 1.0 / p.i;
    let f_r = p.big_phi - p.j / (2.0 * p.i);
    let phi0 = p.phi;
    let ok = (0..=points).all(|k| {
        let x = r + 3.0 * r * k as f64 / points as f64;
        -x * kappa.eval(x) * phi0 / 2.0 + rate_alpha * (f_r + (x - r) * phi0 / 2.0) <= 0.0
    });
    ok && kappa.tail_lower_bound(4.0 * r).is_none_or(|k| k >= rate_alpha)
}

/// Builds `f` for `2f'' − rκf' ≤ −cαf`; κ must already be in the Brownian normalisation.
pub fn build_f_brownian(kappa: Arc<dyn Curvature>, alpha: f64, opts: BrownianOptions) -> Result<BrownianFn, LyapunovError> {
    assert!(alpha > 0.0, "alpha must be positive");
    let k = kappa.as_ref();
    let r0 = zero_radius(k)?;
    let mut extra = k.kinks();
    extra.push(r0);

    let start = r0.max(2f64.powi(-10));
    let factor = 2f64.powf(0.125);
    let mut top = 64.0 * r0.max(1.0);
    let r1 = loop {
        let profile = Profile::build(k, hybrid_grid(opts.r_min, 4.0 * top, 256, opts.scan_points, &extra));
        let lp = profile.eval(k, r0.max(opts.r_min)).log_phi;
        if lp < -700.0 {
            return Err(LyapunovError::CurvatureUnbounded { exponent: -lp });
        }
        let mut prev = None;
        let mut cand = start;
        let mut found = None;
        while cand <= top {
            if affine_ok(&profile, k, cand, opts.check_points) {
                found = Some(match prev {
                    None => cand,
                    Some(bad) => bisect(|x| affine_ok(&profile, k, x, opts.check_points), cand, bad, 1e-10),
                });
                break;
            }
            prev = Some(cand);
            cand *= factor;
        }
        if let Some(r) = found {
            break r;
        }
        top *= 8.0;
        if top > 1e6 {
            return Err(LyapunovError::RadiusSearchFailed { upper: top });
        }
    };

    let mut r1 = r1;
    for _ in 0..64 {
        let mut ex = extra.clone();
        ex.push(r1);
        let r_max = 4.0 * r0.max(r1);
        let profile = Profile::build(k, hybrid_grid(opts.r_min, r_max, opts.log_points, opts.linear_points, &ex));
        if !affine_ok(&profile, k, r1, opts.check_points) {
            r1 *= 2f64.powf(1.0 / 64.0);
            continue;
        }
        let at_r0 = profile.eval(k, r0.max(opts.r_min).min(profile.end()));
        let at_r1 = profile.eval(k, r1);
        let phi_r0 = if r0 == 0.0 { 1.0 } else { at_r0.phi };
        let i_r1 = at_r1.i;
        let mut out = BrownianFn {
            kappa: kappa.clone(),
            alpha,
            r0,
            r1,
            rate: 1.0 / (alpha * i_r1),
            phi_r0,
            i_r1,
            big_phi_r1: at_r1.big_phi,
            f_r1: at_r1.big_phi - at_r1.j / (2.0 * i_r1),
            r_max,
            f_rmax: 0.0,
            tail_slope: 0.0,
            profile,
        };
        let last = out.eval(r_max);
        out.f_rmax = last.f;
        out.tail_slope = last.d1;
        return Ok(out);
    }
    Err(LyapunovError::RadiusSearchFailed { upper: r1 })
}

// ---------------------------------------------------------------------------
// Jump route

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityTrial {
    pub k: u32,
    pub delta: f64,
    pub eps: f64,
    pub c_eps: f64,
    pub m: Option<f64>,
    pub lhs: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct JumpOptions {
    pub k_max: u32,
    pub m_cap: f64,
    pub pitch_divisor: usize,
    pub max_nodes: usize,
    pub check_points: usize,
}

impl Default for JumpOptions {
    fn default() -> Self {
        Self { k_max: 40, m_cap: 1e6, pitch_divisor: 32, max_nodes: 40_000_000, check_points: 2000 }
    }
}

fn solve_m(kappa: &dyn Curvature, gamma: f64, delta: f64, eps: f64, c_eps: f64, cap: f64) -> (Option<f64>, f64) {
    let kd = local_bound(kappa, delta) + 2.0 * gamma;
    let kde = local_bound(kappa, delta + eps);
    let kd2 = local_bound(kappa, delta + 2.0 * eps);
    let lhs = |m: f64| {
        let x = eps / c_eps * (2.0 * gamma + 2.0 * m + kd2);
        kd * (4.0 + 2.0 * x * x.exp()) + 2.0 * kde
    };
    let mut m = 0.0;
    for _ in 0..100_000 {
        let next = lhs(m) / 2.0;
        if !next.is_finite() || next > cap {
            return (None, lhs(m));
        }
        if (next - m).abs() <= 1e-13 * (1.0 + m) {
            m = next;
            break;
        }
        m = next;
    }
    let m = m * (1.0 + 1e-9) + 1e-12;
    let l = lhs(m);
    if l <= 2.0 * m {
        (Some(m), l)
    } else {
        (None, l)
    }
}

/// Scans `ε = δ = 2^{−k}` and solves for `M`; returns every trial.
pub fn feasibility_scan(kappa: &dyn Curvature, measure: &RadialLevyMeasure, gamma: f64, opts: &JumpOptions, stop_at_first: bool) -> Result<Vec<FeasibilityTrial>, LyapunovError> {
    let mut trials = Vec::new();
    for k in 0..=opts.k_max {
        let eps = 2f64.powi(-(k as i32));
        let c_eps = measure.c_eps(eps)?;
        let (m, lhs) = if c_eps > 0.0 { solve_m(kappa, gamma, eps, eps, c_eps, opts.m_cap) } else { (None, f64::INFINITY) };
        let ok = m.is_some();
        trials.push(FeasibilityTrial { k, delta: eps, eps, c_eps, m, lhs });
        if ok && stop_at_first {
            break;
        }
    }
    Ok(trials)
}

/// `f₁(r) = ∫₀^r φg` with `φ = exp(−∫h̄/C_ε)`, `g = 1 − (c₁/C_ε)∫Φ(·+ε)/φ` up to R₁.
///
/// Tables live on a uniform grid of pitch `ε/32` on `[0, R₁ + 2ε]`; the
/// function is affine beyond. `φ`, `∫Φ(·+ε)/φ` and `c₁` are stored as logs.
#[derive(Debug, Clone)]
pub struct JumpFn {
    kappa: Arc<dyn Curvature>,
    gamma: f64,
    delta: f64,
    eps: f64,
    c_eps: f64,
    m: f64,
    pitch: f64,
    r1: f64,
    i_r1: usize,
    r0_jump: f64,
    h_bar: Vec<f64>,
    log_phi: Vec<f64>,
    big_phi: Vec<f64>,
    log_i: Vec<f64>,
    f: Vec<f64>,
    log_c1: f64,
    end: f64,
    f_end: f64,
    log_tail_slope: f64,
    trials: Vec<FeasibilityTrial>,
}

impl JumpFn {
    fn nodes(&self) -> usize {
        self.log_phi.len()
    }

    fn seg(&self, r: f64) -> usize {
        ((r / self.pitch) as usize).min(self.nodes() - 2)
    }

    fn node(&self, i: usize) -> f64 {
        i as f64 * self.pitch
    }

    fn a(&self, seg: usize) -> f64 {
        self.h_bar[seg] / self.c_eps
    }

    pub fn log_phi(&self, r: f64) -> f64 {
        if r >= self.end {
            return self.log_phi[self.nodes() - 1];
        }
        let s = self.seg(r);
        self.log_phi[s] - self.a(s) * (r - self.node(s))
    }

    pub fn big_phi(&self, r: f64) -> f64 {
        if r >= self.end {
            return self.big_phi[self.nodes() - 1] + self.log_phi[self.nodes() - 1].exp() * (r - self.end);
        }
        let s = self.seg(r);
        let dx = r - self.node(s);
        self.big_phi[s] + self.log_phi[s].exp() * dx * decay_factor(self.a(s) * dx)
    }

    fn integrand_ln(&self, t: f64) -> f64 {
        self.big_phi(t + self.eps).ln() - self.log_phi(t)
    }

    fn log_i(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let s = self.seg(r);
        let a = self.node(s);
        let h = r - a;
        if h <= 0.0 {
            return self.log_i[s];
        }
        let m = 0.5 * (a + r);
        let v = logaddexp(logaddexp(self.integrand_ln(a), 4f64.ln() + self.integrand_ln(m)), self.integrand_ln(r));
        logaddexp(self.log_i[s], (h / 6.0).ln() + v)
    }

    fn g(&self, r: f64) -> f64 {
        if r >= self.r1 {
            0.5
        } else {
            1.0 - 0.5 * (self.log_i(r) - self.log_i[self.i_r1]).exp()
        }
    }

    /// `ln |f₁''(r)|` (−∞ where f₁ is affine).
    pub fn ln_second_abs(&self, r: f64) -> f64 {
        if r >= self.end {
            return f64::NEG_INFINITY;
        }
        let s = self.seg(r);
        let lp = self.log_phi(r);
        let a = self.a(s);
        let first = if a > 0.0 { a.ln() + lp + self.g(r).ln() } else { f64::NEG_INFINITY };
        if r < self.r1 {
            logaddexp(first, self.log_c1 - self.c_eps.ln() + self.big_phi(r + self.eps).ln())
        } else {
            first + 0.5f64.ln()
        }
    }

    pub fn value(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if r >= self.end {
            return self.f_end + self.log_tail_slope.exp() * (r - self.end);
        }
        let s = self.seg(r);
        let a = self.node(s);
        let dd0 = -self.second_in(a, s).exp();
        let dd1 = -self.second_in(r, s).exp();
        self.f[s] + hermite_integral(r - a, self.deriv(a), self.deriv_left(r, s), dd0, dd1)
    }

    fn second_in(&self, r: f64, s: usize) -> f64 {
        let lp = self.log_phi[s] - self.a(s) * (r - self.node(s));
        let a = self.a(s);
        let first = if a > 0.0 { a.ln() + lp + self.g(r).ln() } else { f64::NEG_INFINITY };
        if r < self.r1 || (r == self.r1 && s < self.i_r1) {
            logaddexp(first, self.log_c1 - self.c_eps.ln() + self.big_phi(r + self.eps).ln())
        } else {
            first
        }
    }

    fn deriv_left(&self, r: f64, s: usize) -> f64 {
        (self.log_phi[s] - self.a(s) * (r - self.node(s))).exp() * self.g(r)
    }

    pub fn deriv(&self, r: f64) -> f64 {
        if r >= self.end {
            return self.log_tail_slope.exp();
        }
        self.log_phi(r).exp() * self.g(r)
    }

    pub fn second_deriv(&self, r: f64) -> f64 {
        -self.ln_second_abs(r).exp()
    }

    /// `ln f₁'(r)`, finite where `f₁'` itself underflows.
    pub fn ln_deriv(&self, r: f64) -> f64 {
        if r >= self.end {
            return self.log_tail_slope;
        }
        self.log_phi(r) + self.g(r).ln()
    }

    pub fn log_c1(&self) -> f64 {
        self.log_c1
    }

    pub fn c1(&self) -> f64 {
        self.log_c1.exp()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn c_eps(&self) -> f64 {
        self.c_eps
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn trials(&self) -> &[FeasibilityTrial] {
        &self.trials
    }

    /// `ln a₁` with `a₁ r ≤ f₁(r)`; `a₁ = φ(R₁)/2`.
    pub fn log_a1(&self) -> f64 {
        self.log_tail_slope
    }

    fn residual_norm(&self, r: f64, w_min: f64, rate_ln: f64) -> f64 {
        let lp = self.log_phi(r);
        let g = self.g(r);
        let drift = -g * (r * self.kappa.eval(r) - 2.0 * self.gamma);
        let hat = if w_min == f64::NEG_INFINITY { 0.0 } else { -self.c_eps * (w_min - lp).exp() };
        let contraction = (rate_ln + self.value(r).ln() - lp).exp();
        drift + hat + contraction
    }

    /// Lower bound of `ln|f₁''|` on each segment.
    fn segment_lower(&self) -> Vec<f64> {
        let nseg = self.nodes() - 1;
        (0..nseg)
            .into_par_iter()
            .map(|s| {
                let a = self.a(s);
                let right = self.node(s + 1);
                let first = if a > 0.0 {
                    a.ln() + self.log_phi[s + 1] + self.g(right).max(0.5).ln()
                } else {
                    f64::NEG_INFINITY
                };
                if s < self.i_r1 {
                    logaddexp(first, self.log_c1 - self.c_eps.ln() + self.big_phi(self.node(s) + self.eps).ln())
                } else {
                    first + 0.5f64.ln()
                }
            })
            .collect()
    }
}

fn sliding_min(xs: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    let mut dq: VecDeque<usize> = VecDeque::new();
    for (i, &x) in xs.iter().enumerate() {
        while dq.back().is_some_and(|&j| xs[j] >= x) {
            dq.pop_back();
        }
        dq.push_back(i);
        while dq.front().is_some_and(|&j| j + width <= i) {
            dq.pop_front();
        }
        out[i] = xs[*dq.front().unwrap()];
    }
    out
}

/// Builds `f₁` for the first feasible `(δ, ε, M)`.
pub fn build_f1_jump(kappa: Arc<dyn Curvature>, measure: &RadialLevyMeasure, gamma: f64, opts: JumpOptions) -> Result<JumpFn, LyapunovError> {
    let k = kappa.as_ref();
    measure.check_l5(1.0)?;
    let (d2, w) = d2_holds(k);
    if !d2 {
        return Err(LyapunovError::IrregularAtZero(w));
    }
    let trials = feasibility_scan(k, measure, gamma, &opts, true)?;
    let last = trials.last().cloned().unwrap();
    let Some(m) = last.m else {
        return Err(LyapunovError::FeasibilitySearchFailed { explored: trials });
    };
    build_with(kappa, gamma, last.delta, last.eps, last.c_eps, m, trials, opts)
}

/// First radius beyond which `h = rκ − 2γ − 2M ≥ 0`.
fn h_zero_radius(kappa: &dyn Curvature, level: f64) -> Result<f64, LyapunovError> {
    let top = (-10..=40)
        .map(|k| 2f64.powi(k))
        .find(|&x| kappa.tail_lower_bound(x).is_some_and(|v| v >= 0.0 && x * v >= level))
        .ok_or_else(|| LyapunovError::NotDissipative(format!("r κ(r) never exceeds {level}")))?;
    let n = 1 << 18;
    let step = top / n as f64;
    let h = |r: f64| r * kappa.eval(r) - level;
    match (0..=n).rev().find(|&i| h(i as f64 * step) < 0.0) {
        None => Ok(0.0),
        Some(i) => {
            let bad = i as f64 * step;
            Ok(bisect(|r| h(r) >= 0.0, bad + step, bad, 1e-14))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn build_with(
    kappa: Arc<dyn Curvature>,
    gamma: f64,
    delta: f64,
    eps: f64,
    c_eps: f64,
    m: f64,
    trials: Vec<FeasibilityTrial>,
    opts: JumpOptions,
) -> Result<JumpFn, LyapunovError> {
    let k = kappa.as_ref();
    let level = 2.0 * gamma + 2.0 * m;
    let r0_coarse = h_zero_radius(k, level)?;
    let pitch = eps / opts.pitch_divisor as f64;
    let snap = |r: f64| (r / pitch).ceil() * pitch;
    let mut r1 = snap(r0_coarse.max(delta) + eps);
    let factor = 2f64.powf(0.125);
    for _ in 0..200 {
        let end = r1 + 4.0 * eps;
        let nodes = (end / pitch).ceil() as usize + 1;
        if nodes > opts.max_nodes {
            return Err(LyapunovError::GridTooLarge { nodes, limit: opts.max_nodes });
        }
        let f = assemble(kappa.clone(), gamma, delta, eps, c_eps, m, pitch, r1, nodes, trials.clone());
        if f.r0_jump > r1 {
            r1 = snap(f.r0_jump);
            continue;
        }
        if jump_affine_ok(&f, opts.check_points) {
            return Ok(f);
        }
        r1 = snap(r1 * factor);
    }
    Err(LyapunovError::RadiusSearchFailed { upper: r1 })
}

fn jump_affine_ok(f: &JumpFn, points: usize) -> bool {
    let r1 = f.r1;
    let ok = (0..=points).all(|k| {
        let x = r1 + 3.0 * r1 * k as f64 / points as f64;
        let lhs = 0.5 * (x * f.kappa.eval(x) - 2.0 * f.gamma);
        let rhs = (f.log_c1 + f.value(x).ln() - f.log_phi(x)).exp();
        lhs >= rhs
    });
    ok && f.kappa.tail_lower_bound(4.0 * r1).is_none_or(|k| k >= f.log_c1.exp())
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    kappa: Arc<dyn Curvature>,
    gamma: f64,
    delta: f64,
    eps: f64,
    c_eps: f64,
    m: f64,
    pitch: f64,
    r1: f64,
    nodes: usize,
    trials: Vec<FeasibilityTrial>,
) -> JumpFn {
    let k = kappa.as_ref();
    let nseg = nodes - 1;
    let end = (nodes - 1) as f64 * pitch;
    let w = (eps / pitch).round() as usize;
    let h: Vec<f64> = (0..nodes)
        .into_par_iter()
        .map(|i| {
            let r = i as f64 * pitch;
            r * k.eval(r) - 2.0 * gamma - 2.0 * m
        })
        .collect();
    let diffs: Vec<f64> = h.windows(2).map(|p| (p[1] - p[0]).abs()).collect();
    // window [r_i, r_{i+1} + ε] covers nodes i ..= i + 1 + w
    let worst = sliding_min(&h, w + 2);
    let var = sliding_min(&diffs.iter().map(|d| -d).collect::<Vec<_>>(), w + 1);
    let h_bar: Vec<f64> = (0..nseg)
        .map(|s| {
            let hi = (s + 1 + w).min(nodes - 1);
            let lo_h = worst[hi];
            let infl = -var[(s + w).min(nseg - 1)];
            if lo_h - infl < 0.0 {
                neg_part(lo_h - infl)
            } else {
                0.0
            }
        })
        .collect();
    let r0_jump = h_bar.iter().rposition(|&v| v > 0.0).map_or(0.0, |s| (s + 1) as f64 * pitch);

    let mut log_phi = vec![0.0; nodes];
    let mut big_phi = vec![0.0; nodes];
    for s in 0..nseg {
        let a = h_bar[s] / c_eps;
        log_phi[s + 1] = log_phi[s] - a * pitch;
        big_phi[s + 1] = big_phi[s] + log_phi[s].exp() * pitch * decay_factor(a * pitch);
    }
    let i_r1 = (r1 / pitch).round() as usize;
    let mut f = JumpFn {
        kappa: kappa.clone(),
        gamma,
        delta,
        eps,
        c_eps,
        m,
        pitch,
        r1,
        i_r1,
        r0_jump,
        h_bar,
        log_phi,
        big_phi,
        log_i: vec![f64::NEG_INFINITY; nodes],
        f: vec![0.0; nodes],
        log_c1: 0.0,
        end,
        f_end: 0.0,
        log_tail_slope: 0.0,
        trials,
    };
    let seg_ln: Vec<f64> = (0..i_r1.min(nseg))
        .into_par_iter()
        .map(|s| {
            let a = f.node(s);
            let b = f.node(s + 1);
            let v = logaddexp(
                logaddexp(f.integrand_ln(a), 4f64.ln() + f.integrand_ln(0.5 * (a + b))),
                f.integrand_ln(b),
            );
            (pitch / 6.0).ln() + v
        })
        .collect();
    for s in 0..seg_ln.len() {
        f.log_i[s + 1] = logaddexp(f.log_i[s], seg_ln[s]);
    }
    for s in seg_ln.len()..nseg {
        f.log_i[s + 1] = f.log_i[s];
    }
    f.log_c1 = (c_eps / 2.0).ln() - f.log_i[i_r1];
    for s in 0..nseg {
        let (a, b) = (f.node(s), f.node(s + 1));
        let d0 = f.deriv(a);
        let d1 = f.deriv_left(b, s);
        let dd0 = -f.second_in(a, s).exp();
        let dd1 = -f.second_in(b, s).exp();
        f.f[s + 1] = f.f[s] + hermite_integral(pitch, d0, d1, dd0, dd1);
    }
    f.f_end = f.f[nodes - 1];
    f.log_tail_slope = f.log_phi[nodes - 1] + 0.5f64.ln();
    f
}

// ---------------------------------------------------------------------------
// Unified handle and certificates

#[derive(Debug, Clone)]
pub enum DistanceFn {
    Brownian(BrownianFn),
    Jump(JumpFn),
}

impl DistanceFn {
    pub fn kind(&self) -> &'static str {
        match self {
            DistanceFn::Brownian(_) => "brownian",
            DistanceFn::Jump(_) => "jump",
        }
    }

    pub fn value(&self, r: f64) -> f64 {
        match self {
            DistanceFn::Brownian(b) => b.eval(r).f,
            DistanceFn::Jump(j) => j.value(r),
        }
    }

    pub fn deriv(&self, r: f64) -> f64 {
        match self {
            DistanceFn::Brownian(b) => b.eval(r).d1,
            DistanceFn::Jump(j) => j.deriv(r),
        }
    }

    pub fn ln_deriv(&self, r: f64) -> f64 {
        match self {
            DistanceFn::Brownian(b) => b.eval(r).d1.ln(),
            DistanceFn::Jump(j) => j.ln_deriv(r),
        }
    }

    pub fn second_deriv(&self, r: f64) -> f64 {
        match self {
            DistanceFn::Brownian(b) => b.eval(r).d2,
            DistanceFn::Jump(j) => j.second_deriv(r),
        }
    }

    /// Contraction rate `c` (Brownian) or `c₁` (jump; may underflow, see [`DistanceFn::rate_ln`]).
    pub fn rate(&self) -> f64 {
        self.rate_ln().exp()
    }

    pub fn rate_ln(&self) -> f64 {
        match self {
            DistanceFn::Brownian(b) => b.rate.ln(),
            DistanceFn::Jump(j) => j.log_c1,
        }
    }

    /// `(ln a₁, a₂)` with `a₁ r ≤ f(r) ≤ a₂ r`.
    pub fn comparability_ln(&self) -> (f64, f64) {
        match self {
            DistanceFn::Brownian(b) => ((b.phi_r0 / 2.0).ln(), 1.0),
            DistanceFn::Jump(j) => (j.log_a1(), 1.0),
        }
    }

    /// Largest radius at which the function is not yet affine.
    pub fn affine_from(&self) -> f64 {
        match self {
            DistanceFn::Brownian(b) => b.r1.max(b.r0),
            DistanceFn::Jump(j) => j.r1,
        }
    }

    pub fn constants(&self) -> Constants {
        match self {
            DistanceFn::Brownian(b) => Constants::new(&[
                ("c", b.rate),
                ("C", b.prefactor()),
                ("R0", b.r0),
                ("R1", b.r1),
                ("alpha", b.alpha),
                ("phi_R0", b.phi_r0),
            ]),
            DistanceFn::Jump(j) => Constants::new(&[
                ("c1_ln", j.log_c1),
                ("C_eps", j.c_eps),
                ("eps", j.eps),
                ("delta", j.delta),
                ("M", j.m),
                ("R1", j.r1),
                ("gamma", j.gamma),
                ("a1_ln", j.log_a1()),
            ]),
        }
    }

    /// `(r, f, f', f'')` at `n` points on `(0, r_hi]`, log-spaced below 1.
    pub fn tabulate(&self, r_hi: f64, n: usize) -> Vec<[f64; 4]> {
        hybrid_grid(1e-6, r_hi, n / 4, n - n / 4, &[])
            .into_iter()
            .skip(1)
            .map(|r| [r, self.value(r), self.deriv(r), self.second_deriv(r)])
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    pub tol: f64,
    pub refine: usize,
    pub near_zero_points: usize,
    /// Multiplier on the rate inside the residual (1 for the honest check).
    pub rate_scale: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { tol: 1e-8, refine: 2, near_zero_points: 64, rate_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TailCheck {
    Verified,
    Unverified,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub inequality_id: String,
    pub grid_points: usize,
    pub grid_hash: String,
    pub max_residual: f64,
    pub argmax: f64,
    pub tail: TailCheck,
    pub tol: f64,
    pub passed: bool,
    pub constants_used: Constants,
}

fn grid_hash(points: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in points {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn refinement(nodes: &[f64], refine: usize, near_zero: usize, first: f64) -> Vec<f64> {
    let mut pts = Vec::with_capacity(nodes.len() * refine + near_zero);
    let lo = 1e-12f64.min(first / 10.0);
    for k in 0..near_zero {
        pts.push((lo.ln() + (first.ln() - lo.ln()) * k as f64 / near_zero as f64).exp());
    }
    for w in nodes.windows(2) {
        for k in 0..refine {
            let x = w[0] + (w[1] - w[0]) * k as f64 / refine as f64;
            if x > 0.0 {
                pts.push(x);
            }
        }
    }
    pts.push(*nodes.last().unwrap());
    pts
}

fn reduce_max(pts: &[f64], res: &[f64]) -> (f64, f64) {
    let mut worst = f64::NEG_INFINITY;
    let mut at = 0.0;
    for (p, r) in pts.iter().zip(res) {
        if !(r <= &worst) {
            worst = *r;
            at = *p;
        }
    }
    (worst, at)
}

pub fn certify(f: &DistanceFn, opts: &CertifyOptions) -> Certificate {
    match f {
        DistanceFn::Brownian(b) => certify_brownian(b, f, opts),
        DistanceFn::Jump(j) => certify_jump(j, f, opts),
    }
}

fn certify_brownian(b: &BrownianFn, whole: &DistanceFn, opts: &CertifyOptions) -> Certificate {
    let grid = &b.profile.grid;
    let mut pts = refinement(grid, opts.refine.max(1), opts.near_zero_points, grid[1]);
    pts.extend((1..=32).map(|k| b.r_max * (1.0 + k as f64 / 32.0)));
    let rate = b.rate * opts.rate_scale;
    let res: Vec<f64> = pts.par_iter().map(|&r| b.residual(r, rate)).collect();
    let (max_residual, argmax) = reduce_max(&pts, &res);
    let tail = match b.kappa.tail_lower_bound(b.r_max) {
        Some(k) if k >= rate * b.alpha => TailCheck::Verified,
        Some(_) => TailCheck::Failed,
        None => TailCheck::Unverified,
    };
    let mut constants = whole.constants();
    constants.values.insert("rate_used".into(), rate);
    Certificate {
        inequality_id: "2f'' - r kappa f' <= -c alpha f".into(),
        grid_points: pts.len(),
        grid_hash: grid_hash(&pts),
        max_residual,
        argmax,
        tail,
        tol: opts.tol,
        passed: max_residual.is_finite() && max_residual <= opts.tol && tail != TailCheck::Failed,
        constants_used: constants,
    }
}

fn certify_jump(j: &JumpFn, whole: &DistanceFn, opts: &CertifyOptions) -> Certificate {
    let nseg = j.nodes() - 1;
    let w = (j.eps / j.pitch).round() as usize;
    let lower = j.segment_lower();
    let left = sliding_min(&lower, w + 2);
    let right_of = |s: usize| if s + w < nseg { left[s + w] } else { f64::NEG_INFINITY };
    let refine = opts.refine.max(1);
    let mut pts: Vec<f64> = Vec::with_capacity(nseg * refine + opts.near_zero_points + 64);
    let lo = 1e-12f64;
    for k in 0..opts.near_zero_points {
        pts.push((lo.ln() + (j.pitch.ln() - lo.ln()) * k as f64 / opts.near_zero_points as f64).exp());
    }
    for s in 0..nseg {
        for k in 0..refine {
            let x = j.node(s) + j.pitch * k as f64 / refine as f64;
            if x > 0.0 {
                pts.push(x);
            }
        }
    }
    pts.extend((0..=64).map(|k| j.end * (1.0 + 3.0 * k as f64 / 64.0)));
    let rate_ln = j.log_c1 + opts.rate_scale.ln();
    let res: Vec<f64> = pts
        .par_iter()
        .map(|&r| {
            let w_min = if r >= j.end + j.eps {
                f64::NEG_INFINITY
            } else if r >= j.end {
                left[nseg - 1]
            } else {
                let s = j.seg(r);
                if r > j.delta {
                    left[s]
                } else {
                    right_of(s)
                }
            };
            j.residual_norm(r, w_min, rate_ln)
        })
        .collect();
    let (max_residual, argmax) = reduce_max(&pts, &res);
    let top = 4.0 * j.end;
    let tail = match j.kappa.tail_lower_bound(top) {
        Some(k) if k >= 2.0 * j.gamma / top + (rate_ln).exp() => TailCheck::Verified,
        Some(_) => TailCheck::Failed,
        None => TailCheck::Unverified,
    };
    let mut constants = whole.constants();
    constants.values.insert("rate_used_ln".into(), rate_ln);
    Certificate {
        inequality_id: "-f1' kappa r + 2 f1' gamma + C_eps fhat <= -c1 f1".into(),
        grid_points: pts.len(),
        grid_hash: grid_hash(&pts),
        max_residual,
        argmax,
        tail,
        tol: opts.tol,
        passed: max_residual.is_finite() && max_residual <= opts.tol && tail != TailCheck::Failed,
        constants_used: constants,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantCurvature, PiecewiseCurvature};

    fn constant(k: f64) -> Arc<dyn Curvature> {
        Arc::new(ConstantCurvature { value: k })
    }

    #[test]
    fn constant_curvature_has_c_two() {
        let f = build_f_brownian(constant(1.0), 1.0, BrownianOptions::default()).unwrap();
        assert_eq!(f.r0(), 0.0);
        assert_eq!(f.prefactor(), 2.0);
        assert!(f.r1() * f.r1() >= 10.0 / 3.0 - 1e-6, "{}", f.r1());
        assert!((f.rate() - 2.0 / (f.r1() * f.r1())).abs() < 1e-9);
        let cert = certify(&DistanceFn::Brownian(f), &CertifyOptions::default());
        assert!(cert.passed, "{cert:?}");
    }

    #[test]
    fn zero_radius_of_piecewise() {
        let k = PiecewiseCurvature { inner: -1.0, outer: 1.0, r_in: 1.0, r_out: 2.0 };
        assert!((zero_radius(&k).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn corrupted_rate_fails() {
        let k: Arc<dyn Curvature> = Arc::new(PiecewiseCurvature { inner: -2.0, outer: 1.0, r_in: 1.0, r_out: 2.0 });
        let f = DistanceFn::Brownian(build_f_brownian(k, 1.0, BrownianOptions::default()).unwrap());
        assert!(certify(&f, &CertifyOptions::default()).passed);
        let bad = certify(&f, &CertifyOptions { rate_scale: 1.5, ..Default::default() });
        assert!(!bad.passed && bad.max_residual > 0.0);
    }

    #[test]
    fn sliding_min_matches_naive() {
        let xs = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let got = sliding_min(&xs, 3);
        for i in 0..xs.len() {
            let lo = i.saturating_sub(2);
            let naive = xs[lo..=i].iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(got[i], naive);
        }
    }

    #[test]
    fn logaddexp_handles_infinities() {
        assert_eq!(logaddexp(f64::NEG_INFINITY, 1.0), 1.0);
        assert!((logaddexp(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((logaddexp(-1000.0, -1000.0) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}

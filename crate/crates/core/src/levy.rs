//! Rotationally invariant Lévy measures given by a radial density profile.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::interp::Pchip;
use crate::quad::{integrate, integrate_from_zero, integrate_to_inf, QuadConfig, QuadError};
use crate::rng::{open_unit, unit_direction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LevyError {
    #[error("tail integral diverges: {detail}")]
    DivergentTail { detail: String },
    #[error("marginal quadrature failed at eps = {eps}: {detail}")]
    MarginalUnavailable { eps: f64, detail: String },
    #[error("assumption {assumption} violated (witness eps = {witness:e}): {detail}")]
    AssumptionViolated { assumption: &'static str, witness: f64, detail: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown profile family `{0}`")]
    UnknownFamily(String),
    #[error("profile table: {0}")]
    Table(String),
}

/// Radial density `r -> q~(r)` of a rotationally invariant measure.
pub trait RadialProfile: Send + Sync + fmt::Debug {
    fn family(&self) -> &'static str;
    fn density(&self, r: f64) -> f64;
    fn support_upper(&self) -> f64 {
        f64::INFINITY
    }
    /// Radius with normalised survival `p` beyond `r_hi`, when the tail is
    /// known in closed form.
    fn tail_quantile(&self, _r_hi: f64, _p: f64) -> Option<f64> {
        None
    }
    /// Whether `∫ e^{λ|v|} ν(dv)` over large jumps can be finite for some λ > 0.
    fn light_tail(&self) -> bool {
        self.support_upper().is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct Stable {
    pub alpha: f64,
    pub scale: f64,
    pub dim: usize,
}

impl RadialProfile for Stable {
    fn family(&self) -> &'static str {
        "stable"
    }
    fn density(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        self.scale * r.powf(-(self.dim as f64) - self.alpha)
    }
    fn tail_quantile(&self, r_hi: f64, p: f64) -> Option<f64> {
        Some(r_hi * p.powf(-1.0 / self.alpha))
    }
}

#[derive(Debug, Clone)]
pub struct TruncatedStable {
    pub alpha: f64,
    pub scale: f64,
    pub dim: usize,
    pub r_max: f64,
}

impl RadialProfile for TruncatedStable {
    fn family(&self) -> &'static str {
        "truncated-stable"
    }
    fn density(&self, r: f64) -> f64 {
        if r <= 0.0 || r > self.r_max {
            return 0.0;
        }
        self.scale * r.powf(-(self.dim as f64) - self.alpha)
    }
    fn support_upper(&self) -> f64 {
        self.r_max
    }
}

#[derive(Debug, Clone)]
pub struct TemperedStable {
    pub alpha: f64,
    pub scale: f64,
    pub dim: usize,
    pub rate: f64,
}

impl RadialProfile for TemperedStable {
    fn family(&self) -> &'static str {
        "tempered-stable"
    }
    fn density(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        self.scale * r.powf(-(self.dim as f64) - self.alpha) * (-self.rate * r).exp()
    }
    fn tail_quantile(&self, r_hi: f64, p: f64) -> Option<f64> {
        Some(r_hi - p.ln() / self.rate)
    }
    fn light_tail(&self) -> bool {
        true
    }
}

/// Finite measure with Gaussian radial decay, `q~(r) = scale exp(-r²/(2 width²))`.
#[derive(Debug, Clone)]
pub struct GaussianTailed {
    pub scale: f64,
    pub width: f64,
}

impl RadialProfile for GaussianTailed {
    fn family(&self) -> &'static str {
        "gaussian"
    }
    fn density(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        self.scale * (-0.5 * r * r / (self.width * self.width)).exp()
    }
    fn light_tail(&self) -> bool {
        true
    }
}

/// Constant density on the ball of radius `r_max`.
#[derive(Debug, Clone)]
pub struct UniformBall {
    pub scale: f64,
    pub r_max: f64,
}

impl RadialProfile for UniformBall {
    fn family(&self) -> &'static str {
        "uniform-ball"
    }
    fn density(&self, r: f64) -> f64 {
        if r <= 0.0 || r > self.r_max {
            0.0
        } else {
            self.scale
        }
    }
    fn support_upper(&self) -> f64 {
        self.r_max
    }
}

/// User-supplied profile sampled at `(r, q~(r))` pairs.
///
/// Log-log linear between nodes, power-law extrapolated below the first node
/// and zero above the last one.
#[derive(Debug, Clone)]
pub struct Tabulated {
    log_r: Vec<f64>,
    log_q: Vec<f64>,
    r_last: f64,
}

impl Tabulated {
    pub fn new(rs: Vec<f64>, qs: Vec<f64>) -> Result<Self, LevyError> {
        if rs.len() < 2 || rs.len() != qs.len() {
            return Err(LevyError::Table("need at least two (r, q) rows".into()));
        }
        if rs.windows(2).any(|w| w[1] <= w[0]) || rs[0] <= 0.0 {
            return Err(LevyError::Table("radii must be positive and strictly increasing".into()));
        }
        if qs.iter().any(|q| !(*q > 0.0) || !q.is_finite()) {
            return Err(LevyError::Table("densities must be positive and finite".into()));
        }
        Ok(Self {
            log_r: rs.iter().map(|r| r.ln()).collect(),
            log_q: qs.iter().map(|q| q.ln()).collect(),
            r_last: *rs.last().unwrap(),
        })
    }

    pub fn from_csv(path: &Path) -> Result<Self, LevyError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| LevyError::Table(e.to_string()))?;
        let (mut rs, mut qs) = (Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| LevyError::Table(e.to_string()))?;
            let parse = |i: usize| -> Result<Option<f64>, LevyError> {
                let field = rec.get(i).ok_or_else(|| LevyError::Table(format!("row {}: missing column {}", line + 1, i + 1)))?;
                Ok(field.parse::<f64>().ok())
            };
            match (parse(0)?, parse(1)?) {
                (Some(r), Some(q)) => {
                    rs.push(r);
                    qs.push(q);
                }
                // a non-numeric first row is a header
                _ if line == 0 => {}
                _ => return Err(LevyError::Table(format!("row {}: not numeric", line + 1))),
            }
        }
        Self::new(rs, qs)
    }
}

impl RadialProfile for Tabulated {
    fn family(&self) -> &'static str {
        "tabulated"
    }
    fn density(&self, r: f64) -> f64 {
        if r <= 0.0 || r > self.r_last {
            return 0.0;
        }
        let x = r.ln();
        let i = crate::interp::segment(&self.log_r, x);
        let t = (x - self.log_r[i]) / (self.log_r[i + 1] - self.log_r[i]);
        (self.log_q[i] + t * (self.log_q[i + 1] - self.log_q[i])).exp()
    }
    fn support_upper(&self) -> f64 {
        self.r_last
    }
}

pub type ProfileParams = BTreeMap<String, f64>;
type ProfileCtor = fn(&ProfileParams, usize) -> Result<Arc<dyn RadialProfile>, LevyError>;

fn param(p: &ProfileParams, key: &str) -> Result<f64, LevyError> {
    p.get(key).copied().ok_or_else(|| LevyError::InvalidParameter(format!("missing `{key}`")))
}

fn param_or(p: &ProfileParams, key: &str, default: f64) -> f64 {
    p.get(key).copied().unwrap_or(default)
}

fn stable_alpha(p: &ProfileParams) -> Result<f64, LevyError> {
    let a = param(p, "alpha")?;
    if !(a > 0.0 && a < 2.0) {
        return Err(LevyError::InvalidParameter(format!("alpha = {a} must lie in (0, 2)")));
    }
    Ok(a)
}

fn positive(p: &ProfileParams, key: &str, default: Option<f64>) -> Result<f64, LevyError> {
    let v = match default {
        Some(d) => param_or(p, key, d),
        None => param(p, key)?,
    };
    if !(v > 0.0) || !v.is_finite() {
        return Err(LevyError::InvalidParameter(format!("`{key}` must be positive, got {v}")));
    }
    Ok(v)
}

/// Name-indexed constructors for the built-in profile families.
pub struct ProfileRegistry {
    ctors: BTreeMap<&'static str, ProfileCtor>,
}

impl Default for ProfileRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("stable", |p, d| {
            Ok(Arc::new(Stable { alpha: stable_alpha(p)?, scale: positive(p, "scale", Some(1.0))?, dim: d }))
        });
        r.register("truncated-stable", |p, d| {
            Ok(Arc::new(TruncatedStable {
                alpha: stable_alpha(p)?,
                scale: positive(p, "scale", Some(1.0))?,
                dim: d,
                r_max: positive(p, "r_max", None)?,
            }))
        });
        r.register("tempered-stable", |p, d| {
            Ok(Arc::new(TemperedStable {
                alpha: stable_alpha(p)?,
                scale: positive(p, "scale", Some(1.0))?,
                dim: d,
                rate: positive(p, "rate", None)?,
            }))
        });
        r.register("gaussian", |p, _| {
            Ok(Arc::new(GaussianTailed { scale: positive(p, "scale", Some(1.0))?, width: positive(p, "width", Some(1.0))? }))
        });
        r.register("uniform-ball", |p, _| {
            Ok(Arc::new(UniformBall { scale: positive(p, "scale", Some(1.0))?, r_max: positive(p, "r_max", None)? }))
        });
        r
    }
}

impl ProfileRegistry {
    pub fn register(&mut self, name: &'static str, ctor: ProfileCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn build(&self, name: &str, params: &ProfileParams, dim: usize) -> Result<Arc<dyn RadialProfile>, LevyError> {
        let ctor = self.ctors.get(name).ok_or_else(|| LevyError::UnknownFamily(name.to_string()))?;
        ctor(params, dim)
    }
}

/// Surface area of the unit sphere in `R^d` (2 for d = 1).
pub fn sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * PI.powf(h) / gamma(h)
}

/// Jumps of one time step, stored flat (`vectors[k*d..(k+1)*d]`).
#[derive(Debug, Clone, Default)]
pub struct JumpBatch {
    pub dim: usize,
    pub times: Vec<f64>,
    pub vectors: Vec<f64>,
    pub compensator_drift: Vec<f64>,
}

impl JumpBatch {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn clear(&mut self) {
        self.times.clear();
        self.vectors.clear();
        self.compensator_drift.clear();
        self.compensator_drift.resize(self.dim, 0.0);
    }
}

#[derive(Debug)]
struct SamplingTable {
    rate: f64,
    inverse: Pchip,
    p_last: f64,
    r_hi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct L5Report {
    pub bound: f64,
    pub eps: Vec<f64>,
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub enum CutoffRule {
    Variance,
    RateCap,
}

#[derive(Debug, Clone, Serialize)]
pub struct CutoffChoice {
    pub cutoff: f64,
    pub variance_cutoff: f64,
    pub rate_cutoff: f64,
    pub binding: CutoffRule,
    pub residual_variance_fraction: f64,
}

const TABLE_POINTS: usize = 4096;

#[derive(Clone)]
pub struct RadialLevyMeasure {
    profile: Arc<dyn RadialProfile>,
    dim: usize,
    cutoff: f64,
    table: Arc<OnceLock<Result<SamplingTable, LevyError>>>,
    quad: QuadConfig,
}

impl fmt::Debug for RadialLevyMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RadialLevyMeasure")
            .field("family", &self.profile.family())
            .field("dim", &self.dim)
            .field("cutoff", &self.cutoff)
            .finish()
    }
}

impl RadialLevyMeasure {
    pub fn new(profile: Arc<dyn RadialProfile>, dim: usize, cutoff: f64) -> Result<Self, LevyError> {
        if dim == 0 {
            return Err(LevyError::InvalidParameter("dimension must be positive".into()));
        }
        if !(cutoff > 0.0) {
            return Err(LevyError::InvalidParameter(format!("small-jump cutoff must be positive, got {cutoff}")));
        }
        let m = Self { profile, dim, cutoff, table: Arc::new(OnceLock::new()), quad: QuadConfig::default() };
        m.check_integrability()?;
        Ok(m)
    }

    pub fn profile(&self) -> &Arc<dyn RadialProfile> {
        &self.profile
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn support_upper(&self) -> f64 {
        self.profile.support_upper()
    }

    pub fn with_cutoff(&self, cutoff: f64) -> Result<Self, LevyError> {
        Self::new(self.profile.clone(), self.dim, cutoff)
    }

    /// Density of the measure at the point `v`.
    pub fn density_at(&self, v: &[f64]) -> f64 {
        self.profile.density(norm(v))
    }

    /// Density of `|v|` under the measure: `S_{d-1} r^{d-1} q~(r)`.
    pub fn radial_density(&self, r: f64) -> f64 {
        sphere_area(self.dim) * r.powi(self.dim as i32 - 1) * self.profile.density(r)
    }

    /// `∫_a^b w(r) S r^{d-1} q~(r) dr`, clipped to the support; `b` may be infinite.
    fn radial_integral<W: Fn(f64) -> f64>(&self, a: f64, b: f64, w: W) -> Result<f64, QuadError> {
        let s = sphere_area(self.dim);
        let dm1 = self.dim as i32 - 1;
        let f = |r: f64| {
            let q = self.profile.density(r);
            if q == 0.0 {
                0.0
            } else {
                w(r) * s * r.powi(dm1) * q
            }
        };
        let top = b.min(self.profile.support_upper());
        if top <= a {
            return Ok(0.0);
        }
        if a == 0.0 {
            let split = top.min(1.0);
            let lower = integrate_from_zero(f, split, self.quad)?;
            let upper = self.radial_integral(split, b, w)?;
            return Ok(lower + upper);
        }
        if top.is_finite() {
            integrate(f, a, top, self.quad)
        } else {
            integrate_to_inf(f, a, self.quad)
        }
    }

    fn check_integrability(&self) -> Result<(), LevyError> {
        let small = self.radial_integral(0.0, 1.0, |r| r * r).map_err(|e| LevyError::DivergentTail {
            detail: format!("∫_(|v|<1) |v|² ν(dv): {e}"),
        })?;
        let large = self.radial_integral(1.0, f64::INFINITY, |_| 1.0).map_err(|e| LevyError::DivergentTail {
            detail: format!("ν(|v| > 1): {e}"),
        })?;
        if !(small.is_finite() && large.is_finite()) {
            return Err(LevyError::DivergentTail { detail: "∫(1 ∧ |v|²) ν(dv) is not finite".into() });
        }
        Ok(())
    }

    /// `ν(|v| ≥ r)`.
    pub fn mass_above(&self, r: f64) -> Result<f64, LevyError> {
        self.radial_integral(r, f64::INFINITY, |_| 1.0).map_err(|e| LevyError::DivergentTail {
            detail: format!("mass above {r}: {e}"),
        })
    }

    /// `∫_{|v|>1} |v| ν(dv)`.
    pub fn gamma(&self) -> Result<f64, LevyError> {
        self.radial_integral(1.0, f64::INFINITY, |r| r).map_err(|e| LevyError::DivergentTail {
            detail: format!("first moment of large jumps: {e}"),
        })
    }

    /// Density of the first marginal `ν₁` at `y > 0`.
    pub fn marginal_density(&self, y: f64) -> Result<f64, LevyError> {
        let y = y.abs();
        if self.dim == 1 {
            return Ok(self.profile.density(y));
        }
        let area = sphere_area(self.dim - 1);
        let k = self.dim as i32 - 2;
        let f = |s: f64| area * s.powi(k) * self.profile.density((y * y + s * s).sqrt());
        let upper = self.profile.support_upper();
        let res = if upper.is_finite() {
            if upper <= y {
                return Ok(0.0);
            }
            integrate(f, 0.0, (upper * upper - y * y).sqrt(), self.quad)
        } else {
            let head = integrate(f, 0.0, y.max(1e-300), self.quad);
            head.and_then(|h| integrate_to_inf(f, y.max(1e-300), self.quad).map(|t| h + t))
        };
        res.map_err(|e| LevyError::MarginalUnavailable { eps: y, detail: e.to_string() })
    }

    /// `C_ε = 2 ∫_0^{ε/2} y² ν₁(dy)`, computed in polar form.
    pub fn c_eps(&self, eps: f64) -> Result<f64, LevyError> {
        if !(eps > 0.0) {
            return Err(LevyError::InvalidParameter(format!("eps must be positive, got {eps}")));
        }
        let half = 0.5 * eps;
        let d = self.dim;
        let map = |e: QuadError| LevyError::MarginalUnavailable { eps, detail: e.to_string() };
        // jumps with |v| <= eps/2 contribute their whole positive half-sphere
        let inner = self
            .radial_integral(0.0, half, |r| r * r * band_fraction(d, 1.0) / sphere_area(d))
            .map_err(map)?;
        let outer = if d == 1 {
            0.0
        } else {
            self.radial_integral(half, f64::INFINITY, |r| r * r * band_fraction(d, half / r) / sphere_area(d))
                .map_err(map)?
        };
        Ok(2.0 * (inner + outer))
    }

    /// Evaluates `ε / C_ε` for `ε = lambda_cap 2^-k`, k = 0..40.
    pub fn check_l5(&self, lambda_cap: f64) -> Result<L5Report, LevyError> {
        if !(lambda_cap > 0.0) {
            return Err(LevyError::InvalidParameter("lambda_cap must be positive".into()));
        }
        let mut eps = Vec::with_capacity(41);
        let mut ratios = Vec::with_capacity(41);
        for k in 0..=40 {
            let e = lambda_cap * 2f64.powi(-k);
            let c = self.c_eps(e)?;
            let ratio = e / c;
            if !(c > 0.0) || !ratio.is_finite() {
                return Err(LevyError::AssumptionViolated {
                    assumption: "L5",
                    witness: e,
                    detail: format!("C_eps = {c} at eps = {e:e}"),
                });
            }
            eps.push(e);
            ratios.push(ratio);
        }
        let head = ratios[..30].iter().cloned().fold(0.0, f64::max);
        let tail = ratios[30..].iter().cloned().fold(0.0, f64::max);
        if tail > head * (1.0 + 1e-6) {
            let worst = (30..=40).max_by(|&a, &b| ratios[a].total_cmp(&ratios[b])).unwrap();
            return Err(LevyError::AssumptionViolated {
                assumption: "L5",
                witness: eps[worst],
                detail: format!("eps/C_eps grows towards 0 (ratio {:.3e} at eps = {:.3e})", ratios[worst], eps[worst]),
            });
        }
        Ok(L5Report { bound: head.max(tail), eps, ratios })
    }

    /// `β^L(λ) = ∫ (e^{λ|v|} - λ|v| - 1) ν(dv)`; `+inf` when the tail blows up.
    pub fn beta_l(&self, lam: f64) -> f64 {
        if lam == 0.0 {
            return 0.0;
        }
        if !self.profile.light_tail() {
            return f64::INFINITY;
        }
        let w = |r: f64| {
            let x = lam * r;
            x.exp_m1() - x
        };
        match self.radial_integral(0.0, f64::INFINITY, w) {
            Ok(v) if v.is_finite() => v.max(0.0),
            _ => f64::INFINITY,
        }
    }

    /// `∫_{δ ≤ |v| ≤ 1} |v|² ν(dv)` style helper for the default cutoff rule.
    fn small_second_moment(&self, r: f64) -> Result<f64, LevyError> {
        self.radial_integral(0.0, r, |s| s * s).map_err(|e| LevyError::DivergentTail { detail: e.to_string() })
    }

    /// Cutoff from the residual-variance rule, raised if needed so the
    /// simulated intensity stays below `max_rate` jumps per unit time.
    pub fn default_cutoff(profile: Arc<dyn RadialProfile>, dim: usize, max_rate: f64) -> Result<CutoffChoice, LevyError> {
        let probe = Self::new(profile.clone(), dim, 1.0)?;
        let total = probe.small_second_moment(1.0)?;
        let frac = |r: f64| probe.small_second_moment(r).map(|v| v / total);
        let variance_cutoff = if total == 0.0 {
            1.0
        } else {
            let mut lo = 1e-14;
            let mut hi = 1.0;
            if frac(lo)? >= 1e-4 {
                lo
            } else {
                for _ in 0..200 {
                    let mid = (lo * hi).sqrt();
                    if frac(mid)? < 1e-4 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi / lo < 1.0 + 1e-9 {
                        break;
                    }
                }
                lo
            }
        };
        let rate_cutoff = if probe.mass_above(variance_cutoff)? <= max_rate {
            variance_cutoff
        } else {
            let mut lo = variance_cutoff;
            let mut hi = variance_cutoff;
            while probe.mass_above(hi)? > max_rate {
                lo = hi;
                hi *= 2.0;
                if hi > 1e12 {
                    return Err(LevyError::InvalidParameter(format!("cannot bring the jump rate below {max_rate}")));
                }
            }
            for _ in 0..200 {
                let mid = (lo * hi).sqrt();
                if probe.mass_above(mid)? > max_rate {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi / lo < 1.0 + 1e-9 {
                    break;
                }
            }
            hi
        };
        let cutoff = variance_cutoff.max(rate_cutoff);
        let residual = if total == 0.0 { 0.0 } else { frac(cutoff.min(1.0))? };
        Ok(CutoffChoice {
            cutoff,
            variance_cutoff,
            rate_cutoff,
            binding: if rate_cutoff > variance_cutoff { CutoffRule::RateCap } else { CutoffRule::Variance },
            residual_variance_fraction: residual,
        })
    }

    fn table(&self) -> Result<&SamplingTable, LevyError> {
        self.table.get_or_init(|| self.build_table()).as_ref().map_err(|e| e.clone())
    }

    fn build_table(&self) -> Result<SamplingTable, LevyError> {
        let lo = self.cutoff;
        let rate = self.mass_above(lo)?;
        if !(rate > 0.0) {
            return Ok(SamplingTable { rate: 0.0, inverse: Pchip::new(vec![0.0, 1.0], vec![lo, lo]), p_last: 1.0, r_hi: lo });
        }
        let upper = self.profile.support_upper();
        let mut r_hi = if upper.is_finite() { upper * (1.0 - 1e-9) } else { lo * 2.0 };
        if !upper.is_finite() {
            while self.mass_above(r_hi)? / rate > 1e-12 && r_hi < lo * 1e14 {
                r_hi *= 2.0;
            }
        }
        if r_hi <= lo {
            return Err(LevyError::InvalidParameter(format!("cutoff {lo} is beyond the support")));
        }
        let ratio = (r_hi / lo).ln() / (TABLE_POINTS - 1) as f64;
        let rs: Vec<f64> = (0..TABLE_POINTS).map(|i| lo * (ratio * i as f64).exp()).collect();
        let mut tail = vec![0.0; TABLE_POINTS];
        tail[TABLE_POINTS - 1] = self.mass_above(rs[TABLE_POINTS - 1])?;
        for i in (0..TABLE_POINTS - 1).rev() {
            let seg = self
                .radial_integral(rs[i], rs[i + 1], |_| 1.0)
                .map_err(|e| LevyError::DivergentTail { detail: e.to_string() })?;
            tail[i] = tail[i + 1] + seg;
        }
        let total = tail[0];
        // x = ln P increasing after reversal, y = ln r
        let mut xs = Vec::with_capacity(TABLE_POINTS);
        let mut ys = Vec::with_capacity(TABLE_POINTS);
        for i in (0..TABLE_POINTS).rev() {
            let p = tail[i] / total;
            if p > 0.0 {
                let x = p.ln();
                if xs.last().is_none_or(|&last| x > last) {
                    xs.push(x);
                    ys.push(rs[i].ln());
                }
            }
        }
        let p_last = xs[0].exp();
        let inverse = Pchip::new(xs, ys);
        Ok(SamplingTable { rate: total, inverse, p_last, r_hi: rs[TABLE_POINTS - 1] })
    }

    /// Rate of simulated jumps, `ν(|v| ≥ δ_trunc)`.
    pub fn jump_rate(&self) -> Result<f64, LevyError> {
        Ok(self.table()?.rate)
    }

    /// Magnitude with the law of `|v|` conditioned on `|v| ≥ δ_trunc`.
    pub fn sample_radius<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64, LevyError> {
        let t = self.table()?;
        let u = open_unit(rng);
        if u >= t.p_last {
            return Ok(t.inverse.eval(u.ln()).exp().max(self.cutoff));
        }
        Ok(self.profile.tail_quantile(t.r_hi, u / t.p_last).unwrap_or(t.r_hi).max(t.r_hi))
    }

    /// Appends the jumps of a step of length `dt` to `out` (cleared first).
    pub fn sample_jumps_into<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R, out: &mut JumpBatch) -> Result<(), LevyError> {
        out.dim = self.dim;
        out.clear();
        if dt <= 0.0 {
            return Ok(());
        }
        let rate = self.table()?.rate;
        if rate == 0.0 {
            return Ok(());
        }
        let n = Poisson::new(rate * dt).map(|p| p.sample(rng) as usize).unwrap_or(0);
        let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * dt).collect();
        times.sort_by(f64::total_cmp);
        let mut dir = vec![0.0; self.dim];
        for t in times {
            let r = self.sample_radius(rng)?;
            unit_direction(rng, &mut dir);
            out.times.push(t);
            out.vectors.extend(dir.iter().map(|u| r * u));
        }
        // the dropped band |v| < δ is symmetric, so its compensator vanishes
        Ok(())
    }

    pub fn sample_jumps<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> Result<JumpBatch, LevyError> {
        let mut b = JumpBatch { dim: self.dim, ..Default::default() };
        self.sample_jumps_into(dt, rng, &mut b)?;
        Ok(b)
    }
}

/// `∫_{S^{d-1}} t² 1{0 < t < s} dσ` with `t` the first coordinate.
fn band_fraction(d: usize, s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    match d {
        1 => {
            if s >= 1.0 {
                1.0
            } else {
                0.0
            }
        }
        2 => s.asin() - s * (1.0 - s * s).sqrt(),
        _ => {
            let k = (d as f64 - 3.0) / 2.0;
            let f = |t: f64| t * t * (1.0 - t * t).max(0.0).powf(k);
            sphere_area(d - 1) * integrate(f, 0.0, s, QuadConfig::default()).unwrap_or(f64::NAN)
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn stable(alpha: f64, dim: usize) -> RadialLevyMeasure {
        RadialLevyMeasure::new(Arc::new(Stable { alpha, scale: 1.0, dim }), dim, 0.01).unwrap()
    }

    #[test]
    fn sphere_areas() {
        assert!((sphere_area(1) - 2.0).abs() < 1e-14);
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-13);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-13);
    }

    #[test]
    fn band_fraction_full_sphere_is_half_second_moment() {
        // ∫ t² over the half sphere with t > 0 is |S^{d-1}| / (2d)
        for d in 1..=4 {
            let v = band_fraction(d, 1.0);
            let expect = sphere_area(d) / (2.0 * d as f64);
            assert!((v - expect).abs() < 1e-9, "d={d}: {v} vs {expect}");
        }
    }

    #[test]
    fn stable_gamma_closed_form() {
        let g = stable(1.5, 1).gamma().unwrap();
        assert!((g - 4.0).abs() < 1e-8, "{g}");
    }

    #[test]
    fn compact_small_jumps_have_zero_gamma() {
        let m = RadialLevyMeasure::new(Arc::new(UniformBall { scale: 1.0, r_max: 1.0 }), 1, 0.01).unwrap();
        assert_eq!(m.gamma().unwrap(), 0.0);
    }

    #[test]
    fn cauchy_gamma_diverges() {
        let m = RadialLevyMeasure::new(Arc::new(Stable { alpha: 1.0, scale: 1.0, dim: 1 }), 1, 0.01).unwrap();
        assert!(matches!(m.gamma(), Err(LevyError::DivergentTail { .. })));
    }

    #[test]
    fn c_eps_stable_one_dim() {
        let m = stable(1.5, 1);
        for eps in [1.0, 0.1, 1e-3] {
            let c = m.c_eps(eps).unwrap();
            let expect = 4.0 * (eps / 2.0f64).sqrt();
            assert!((c - expect).abs() < 1e-9 * expect, "{c} vs {expect}");
        }
    }

    #[test]
    fn l5_gate() {
        assert!(stable(1.5, 1).check_l5(1.0).is_ok());
        let e = stable(0.5, 1).check_l5(1.0).unwrap_err();
        assert!(matches!(e, LevyError::AssumptionViolated { .. }));
        #[derive(Debug)]
        struct Annulus;
        impl RadialProfile for Annulus {
            fn family(&self) -> &'static str {
                "annulus"
            }
            fn density(&self, r: f64) -> f64 {
                if (0.5..=1.0).contains(&r) {
                    1.0
                } else {
                    0.0
                }
            }
            fn support_upper(&self) -> f64 {
                1.0
            }
        }
        let m = RadialLevyMeasure::new(Arc::new(Annulus), 1, 0.01).unwrap();
        assert!(matches!(m.check_l5(1.0), Err(LevyError::AssumptionViolated { .. })));
    }

    #[test]
    fn beta_l_cases() {
        let m = stable(1.5, 1);
        assert_eq!(m.beta_l(0.0), 0.0);
        assert!(m.beta_l(0.1).is_infinite());
        let ball = RadialLevyMeasure::new(Arc::new(UniformBall { scale: 2.0, r_max: 1.0 }), 1, 0.01).unwrap();
        // 2 * 2 ∫_0^1 (e^{λr} - λr - 1) dr
        let lam: f64 = 1.7;
        let expect = 4.0 * ((lam.exp() - 1.0) / lam - lam / 2.0 - 1.0);
        assert!((ball.beta_l(lam) - expect).abs() < 1e-8 * expect);
    }

    #[test]
    fn registry_names_and_errors() {
        let reg = ProfileRegistry::default();
        assert!(reg.names().contains(&"stable"));
        let mut p = ProfileParams::new();
        p.insert("alpha".into(), 2.5);
        assert!(matches!(reg.build("stable", &p, 1), Err(LevyError::InvalidParameter(_))));
        assert!(matches!(reg.build("nope", &p, 1), Err(LevyError::UnknownFamily(_))));
    }

    #[test]
    fn zero_step_is_empty() {
        let m = stable(1.5, 2);
        let mut rng = stream(1, Purpose::Validation, 0);
        let b = m.sample_jumps(0.0, &mut rng).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.compensator_drift, vec![0.0, 0.0]);
    }

    #[test]
    fn stable_radius_tail_law() {
        // conditioned on r >= δ, P(r > x) = (x/δ)^{-α}
        let m = stable(1.5, 1);
        let mut rng = stream(2, Purpose::Validation, 0);
        let n = 200_000;
        let x = 0.05;
        let hits = (0..n).filter(|_| m.sample_radius(&mut rng).unwrap() > x).count() as f64 / n as f64;
        let p = (x / 0.01f64).powf(-1.5);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits - p).abs() < 4.0 * se, "{hits} vs {p}");
    }
}

//! SDE coefficients, curvature profiles and assumption checks.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::levy::{norm, RadialLevyMeasure};
use crate::quad::{integrate, QuadConfig};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model has no noise source")]
    NoNoise,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("σσᵀ - C²I is not positive definite at x = {witness:?} (smallest eigenvalue {min_eig:e}, C² = {c2})")]
    NotUniformlyElliptic { witness: Vec<f64>, min_eig: f64, c2: f64 },
}

pub type Params = BTreeMap<String, f64>;

fn get(p: &Params, key: &str, default: f64) -> f64 {
    p.get(key).copied().unwrap_or(default)
}

fn require(p: &Params, key: &str) -> Result<f64, ModelError> {
    p.get(key).copied().ok_or_else(|| ModelError::InvalidParameter(format!("missing `{key}`")))
}

pub trait Drift: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// Curvature profile known to hold for this drift, if any.
    fn matched_curvature(&self) -> Option<Arc<dyn Curvature>> {
        None
    }
}

/// `b(x) = -K x`.
#[derive(Debug, Clone)]
pub struct LinearDrift {
    pub rate: f64,
}

impl Drift for LinearDrift {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -self.rate * v;
        }
    }
    fn matched_curvature(&self) -> Option<Arc<dyn Curvature>> {
        Some(Arc::new(ConstantCurvature { value: self.rate }))
    }
}

/// `b(x) = x - |x|² x`.
#[derive(Debug, Clone)]
pub struct DoubleWell;

impl Drift for DoubleWell {
    fn name(&self) -> &'static str {
        "double-well"
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n2: f64 = x.iter().map(|v| v * v).sum();
        for (o, v) in out.iter_mut().zip(x) {
            *o = v - n2 * v;
        }
    }
}

/// `b(x) = -β x + (β + λ) P(x)` with `P` the projection onto the ball of
/// radius `a`: repulsive (rate λ) near the origin, contracting (rate β) far out.
#[derive(Debug, Clone)]
pub struct ClampedWell {
    pub outer_rate: f64,
    pub inner_rate: f64,
    pub radius: f64,
}

impl Default for ClampedWell {
    fn default() -> Self {
        Self { outer_rate: 2.0, inner_rate: 2.0, radius: 0.25 }
    }
}

impl Drift for ClampedWell {
    fn name(&self) -> &'static str {
        "clamped-well"
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let n = norm(x);
        let shrink = if n > self.radius { self.radius / n } else { 1.0 };
        let push = self.outer_rate + self.inner_rate;
        for (o, v) in out.iter_mut().zip(x) {
            *o = -self.outer_rate * v + push * shrink * v;
        }
    }
    fn matched_curvature(&self) -> Option<Arc<dyn Curvature>> {
        Some(Arc::new(ClampedWellCurvature { well: self.clone() }))
    }
}

pub trait Curvature: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn eval(&self, r: f64) -> f64;
    /// Lower bound on `inf_{s ≥ r} κ(s)`, when known.
    fn tail_lower_bound(&self, _r: f64) -> Option<f64> {
        None
    }
    /// Radii where κ is not smooth; grids put nodes there.
    fn kinks(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct ConstantCurvature {
    pub value: f64,
}

impl Curvature for ConstantCurvature {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn eval(&self, _r: f64) -> f64 {
        self.value
    }
    fn tail_lower_bound(&self, _r: f64) -> Option<f64> {
        Some(self.value)
    }
}

/// `inner` below `r_in`, `outer` above `r_out`, linear in between.
#[derive(Debug, Clone)]
pub struct PiecewiseCurvature {
    pub inner: f64,
    pub outer: f64,
    pub r_in: f64,
    pub r_out: f64,
}

impl Curvature for PiecewiseCurvature {
    fn name(&self) -> &'static str {
        "piecewise"
    }
    fn eval(&self, r: f64) -> f64 {
        if r <= self.r_in {
            self.inner
        } else if r >= self.r_out {
            self.outer
        } else {
            self.inner + (self.outer - self.inner) * (r - self.r_in) / (self.r_out - self.r_in)
        }
    }
    fn tail_lower_bound(&self, r: f64) -> Option<f64> {
        Some(self.eval(r).min(self.outer))
    }
    fn kinks(&self) -> Vec<f64> {
        vec![self.r_in, self.r_out]
    }
}

/// Exact profile of [`ClampedWell`]: `β - (β + λ) min(1, 2a/r)`.
#[derive(Debug, Clone)]
pub struct ClampedWellCurvature {
    pub well: ClampedWell,
}

impl Curvature for ClampedWellCurvature {
    fn name(&self) -> &'static str {
        "clamped-well"
    }
    fn eval(&self, r: f64) -> f64 {
        let w = &self.well;
        let frac = if r <= 2.0 * w.radius { 1.0 } else { 2.0 * w.radius / r };
        w.outer_rate - (w.outer_rate + w.inner_rate) * frac
    }
    fn tail_lower_bound(&self, r: f64) -> Option<f64> {
        Some(self.eval(r))
    }
    fn kinks(&self) -> Vec<f64> {
        vec![2.0 * self.well.radius]
    }
}

/// Rescaled profile used by the Brownian route: negative values are
/// multiplied by `neg`, nonnegative ones by `pos`.
#[derive(Debug, Clone)]
pub struct ScaledCurvature {
    pub inner: Arc<dyn Curvature>,
    pub pos: f64,
    pub neg: f64,
}

impl Curvature for ScaledCurvature {
    fn name(&self) -> &'static str {
        "scaled"
    }
    fn eval(&self, r: f64) -> f64 {
        let k = self.inner.eval(r);
        if k >= 0.0 {
            self.pos * k
        } else {
            self.neg * k
        }
    }
    fn tail_lower_bound(&self, r: f64) -> Option<f64> {
        self.inner.tail_lower_bound(r).map(|k| if k >= 0.0 { self.pos * k } else { self.neg * k })
    }
    fn kinks(&self) -> Vec<f64> {
        self.inner.kinks()
    }
}

/// Multiplicative diffusion coefficient `σ: R^d -> R^{d×m}` (row-major).
pub trait Diffusion: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn noise_dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct ConstantDiffusion {
    pub matrix: DMatrix<f64>,
}

impl Diffusion for ConstantDiffusion {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn noise_dim(&self) -> usize {
        self.matrix.ncols()
    }
    fn eval(&self, _x: &[f64], out: &mut [f64]) {
        let (r, c) = self.matrix.shape();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = self.matrix[(i, j)];
            }
        }
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Diagonal `σ_ii(x) = lo + (hi - lo)(1 + sin x_i)/2`.
#[derive(Debug, Clone)]
pub struct DiagonalBand {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Diffusion for DiagonalBand {
    fn name(&self) -> &'static str {
        "diagonal-band"
    }
    fn noise_dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.lo + (self.hi - self.lo) * 0.5 * (1.0 + x[i].sin());
        }
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(0.5 * (self.hi - self.lo))
    }
}

/// `sqrt(σσᵀ - C²I)` of an inner coefficient.
#[derive(Debug, Clone)]
pub struct SplitRemainder {
    pub inner: Arc<dyn Diffusion>,
    pub c: f64,
    pub dim: usize,
    pub lipschitz: Option<f64>,
}

impl Diffusion for SplitRemainder {
    fn name(&self) -> &'static str {
        "split-remainder"
    }
    fn noise_dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let (root, _) = remainder_root(self.inner.as_ref(), self.dim, self.c, x);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[i * self.dim + j] = root[(i, j)];
            }
        }
    }
    fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

fn sigma_matrix(sigma: &dyn Diffusion, dim: usize, x: &[f64]) -> DMatrix<f64> {
    let m = sigma.noise_dim();
    let mut buf = vec![0.0; dim * m];
    sigma.eval(x, &mut buf);
    DMatrix::from_row_slice(dim, m, &buf)
}

/// Symmetric square root of `σσᵀ(x) - C²I` and the smallest eigenvalue of the difference.
fn remainder_root(sigma: &dyn Diffusion, dim: usize, c: f64, x: &[f64]) -> (DMatrix<f64>, f64) {
    let s = sigma_matrix(sigma, dim, x);
    let a = &s * s.transpose() - DMatrix::identity(dim, dim) * (c * c);
    let eig = SymmetricEigen::new(a);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    (root, min)
}

#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    pub sigma1: Option<DMatrix<f64>>,
    pub sigma: Option<Arc<dyn Diffusion>>,
    pub sigma_inf: f64,
}

impl DiffusionSpec {
    pub fn none() -> Self {
        Self { sigma1: None, sigma: None, sigma_inf: 0.0 }
    }

    pub fn additive(sigma1: DMatrix<f64>) -> Self {
        Self { sigma1: Some(sigma1), sigma: None, sigma_inf: 0.0 }
    }

    pub fn scalar(dim: usize, s: f64) -> Self {
        Self::additive(DMatrix::identity(dim, dim) * s)
    }

    /// `sup |σ₁⁻¹z|²` over unit `z`, i.e. one over the squared smallest singular value.
    pub fn alpha(&self) -> Option<f64> {
        let s = self.sigma1.as_ref()?;
        let sv = s.clone().singular_values();
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        (min > 0.0).then(|| 1.0 / (min * min))
    }

    /// Operator norm of σ₁.
    pub fn sigma1_norm(&self) -> f64 {
        self.sigma1
            .as_ref()
            .map(|s| s.clone().singular_values().iter().cloned().fold(0.0, f64::max))
            .unwrap_or(0.0)
    }

    pub fn sigma1_det(&self) -> f64 {
        self.sigma1.as_ref().map(|s| s.determinant()).unwrap_or(0.0)
    }

    pub fn sigma1_inverse(&self) -> Option<DMatrix<f64>> {
        self.sigma1.as_ref().and_then(|s| s.clone().try_inverse())
    }
}

/// Intensity measure of the Poisson random measure driving `g`.
#[derive(Debug, Clone, Serialize)]
pub enum MarkIntensity {
    /// Point masses `weights[i]` at `points[i]`.
    Atoms { points: Vec<Vec<f64>>, weights: Vec<f64> },
    /// Uniform density `mass / (hi - lo)` on a one-dimensional interval.
    Interval { lo: f64, hi: f64, mass: f64 },
}

impl MarkIntensity {
    pub fn total_mass(&self) -> f64 {
        match self {
            MarkIntensity::Atoms { weights, .. } => weights.iter().sum(),
            MarkIntensity::Interval { mass, .. } => *mass,
        }
    }

    pub fn mark_dim(&self) -> usize {
        match self {
            MarkIntensity::Atoms { points, .. } => points.first().map_or(1, |p| p.len()),
            MarkIntensity::Interval { .. } => 1,
        }
    }

    /// `∫ h(u) ν(du)`.
    pub fn integrate<H: FnMut(&[f64]) -> f64>(&self, mut h: H) -> f64 {
        match self {
            MarkIntensity::Atoms { points, weights } => points.iter().zip(weights).map(|(p, w)| w * h(p)).sum(),
            MarkIntensity::Interval { lo, hi, mass } => {
                let dens = mass / (hi - lo);
                let cfg = QuadConfig { abs_tol: 1e-14, rel_tol: 1e-12, ..QuadConfig::default() };
                integrate(|u| h(&[u]), *lo, *hi, cfg).map(|v| v * dens).unwrap_or(f64::INFINITY)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        out.clear();
        match self {
            MarkIntensity::Atoms { points, weights } => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (p, w) in points.iter().zip(weights) {
                    if u < *w {
                        out.extend_from_slice(p);
                        return;
                    }
                    u -= w;
                }
                out.extend_from_slice(points.last().unwrap());
            }
            MarkIntensity::Interval { lo, hi, .. } => out.push(lo + (hi - lo) * rng.random::<f64>()),
        }
    }
}

/// Jump coefficient `g(x, u)` with envelope `|g(x, u)| ≤ g∞(u)`.
pub trait JumpCoefficient: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn eval(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    fn envelope(&self, u: &[f64]) -> f64;
    /// True when `g(x, u)` does not depend on `x`.
    fn state_independent(&self) -> bool {
        false
    }
}

/// `g(x, u) = a u` (mark dimension equal to the state dimension, or scalar
/// marks applied along the first axis).
#[derive(Debug, Clone)]
pub struct AdditiveJump {
    pub scale: f64,
}

impl JumpCoefficient for AdditiveJump {
    fn name(&self) -> &'static str {
        "additive"
    }
    fn eval(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (o, m) in out.iter_mut().zip(u) {
            *o = self.scale * m;
        }
    }
    fn envelope(&self, u: &[f64]) -> f64 {
        self.scale * norm(u)
    }
    fn state_independent(&self) -> bool {
        true
    }
}

/// `g(x, u) = a u / (1 + |x|²)`; state dependent, same envelope as [`AdditiveJump`].
#[derive(Debug, Clone)]
pub struct DampedJump {
    pub scale: f64,
}

impl JumpCoefficient for DampedJump {
    fn name(&self) -> &'static str {
        "damped"
    }
    fn eval(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let damp = 1.0 / (1.0 + x.iter().map(|v| v * v).sum::<f64>());
        out.iter_mut().for_each(|v| *v = 0.0);
        for (o, m) in out.iter_mut().zip(u) {
            *o = self.scale * m * damp;
        }
    }
    fn envelope(&self, u: &[f64]) -> f64 {
        self.scale * norm(u)
    }
}

#[derive(Debug, Clone)]
pub struct JumpCoeffSpec {
    pub g: Arc<dyn JumpCoefficient>,
    pub intensity: MarkIntensity,
}

impl JumpCoeffSpec {
    /// `∫ g(x, u) ν(du)` written into `out`.
    pub fn compensator(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let mut buf = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.intensity.integrate(|u| {
                self.g.eval(x, u, &mut buf);
                buf[i]
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KappaVariant {
    /// κ bounds the drift term alone; valid when σ and g are additive.
    DriftOnly,
    /// κ must also absorb the Lipschitz terms of σ(x) and g(x, u).
    Full,
}

#[derive(Clone)]
pub struct ModelSpec {
    pub dim: usize,
    pub drift: Arc<dyn Drift>,
    pub kappa: Arc<dyn Curvature>,
    pub d1_constants: Option<(f64, f64)>,
    pub diffusion: DiffusionSpec,
    pub levy: Option<RadialLevyMeasure>,
    pub jump: Option<JumpCoeffSpec>,
    pub path_cap: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim)
            .field("drift", &self.drift.name())
            .field("kappa", &self.kappa.name())
            .field("sigma1", &self.diffusion.sigma1.as_ref().map(|s| s.shape()))
            .field("sigma", &self.diffusion.sigma.as_ref().map(|s| s.name()))
            .field("levy", &self.levy)
            .field("jump", &self.jump.as_ref().map(|j| j.g.name()))
            .finish()
    }
}

impl ModelSpec {
    pub fn new(dim: usize, drift: Arc<dyn Drift>, kappa: Arc<dyn Curvature>, diffusion: DiffusionSpec) -> Self {
        Self { dim, drift, kappa, d1_constants: None, diffusion, levy: None, jump: None, path_cap: 1e8 }
    }

    pub fn with_levy(mut self, levy: RadialLevyMeasure) -> Self {
        self.levy = Some(levy);
        self
    }

    pub fn with_jump(mut self, jump: JumpCoeffSpec) -> Self {
        self.jump = Some(jump);
        self
    }

    pub fn validate_shape(&self) -> Result<(), ModelError> {
        if self.diffusion.sigma1.is_none() && self.diffusion.sigma.is_none() && self.levy.is_none() && self.jump.is_none() {
            return Err(ModelError::NoNoise);
        }
        if let Some(s) = &self.diffusion.sigma1 {
            if s.shape() != (self.dim, self.dim) {
                return Err(ModelError::Dimension(format!("σ₁ is {:?}, expected {}×{}", s.shape(), self.dim, self.dim)));
            }
        }
        if let Some(l) = &self.levy {
            if l.dim() != self.dim {
                return Err(ModelError::Dimension(format!("Lévy measure lives in R^{}, model in R^{}", l.dim(), self.dim)));
            }
        }
        Ok(())
    }

    pub fn kappa_variant(&self) -> KappaVariant {
        if self.diffusion.sigma.is_some() || self.jump.is_some() {
            KappaVariant::Full
        } else {
            KappaVariant::DriftOnly
        }
    }

    /// Profile in the normalisation of the reflection-coupling construction,
    /// `⟨b(x)-b(y), x-y⟩ ≤ -κ(|x-y|) |x-y|⁴ / |σ₁⁻¹(x-y)|²`.
    pub fn brownian_kappa(&self) -> Option<Arc<dyn Curvature>> {
        let alpha = self.diffusion.alpha()?;
        let top = self.diffusion.sigma1_norm();
        Some(Arc::new(ScaledCurvature { inner: self.kappa.clone(), pos: 1.0 / (top * top), neg: alpha }))
    }

    /// True when σ₁ is nondegenerate, or a Lévy part is present and D2 holds.
    pub fn applicability(&self) -> bool {
        self.diffusion.sigma1_det().abs() > 0.0 || (self.levy.is_some() && d2_holds(self.kappa.as_ref()).0)
    }

    pub fn drift_at(&self, x: &[f64], out: &mut [f64]) {
        self.drift.eval(x, out)
    }
}

pub type DriftCtor = fn(&Params) -> Result<Arc<dyn Drift>, ModelError>;
pub type CurvatureCtor = fn(&Params) -> Result<Arc<dyn Curvature>, ModelError>;
pub type JumpCtor = fn(&Params) -> Result<Arc<dyn JumpCoefficient>, ModelError>;

/// Name-indexed constructors for drifts, curvature profiles and jump coefficients.
pub struct ModelRegistry {
    drifts: BTreeMap<&'static str, DriftCtor>,
    curvatures: BTreeMap<&'static str, CurvatureCtor>,
    jumps: BTreeMap<&'static str, JumpCtor>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut r = Self { drifts: BTreeMap::new(), curvatures: BTreeMap::new(), jumps: BTreeMap::new() };
        r.register_drift("linear", |p| Ok(Arc::new(LinearDrift { rate: get(p, "rate", 1.0) })));
        r.register_drift("double-well", |_| Ok(Arc::new(DoubleWell)));
        r.register_drift("clamped-well", |p| {
            let d = ClampedWell::default();
            let w = ClampedWell {
                outer_rate: get(p, "outer_rate", d.outer_rate),
                inner_rate: get(p, "inner_rate", d.inner_rate),
                radius: get(p, "radius", d.radius),
            };
            if !(w.outer_rate > 0.0 && w.radius >= 0.0) {
                return Err(ModelError::InvalidParameter("clamped-well needs outer_rate > 0 and radius ≥ 0".into()));
            }
            Ok(Arc::new(w))
        });
        r.register_curvature("constant", |p| Ok(Arc::new(ConstantCurvature { value: require(p, "value")? })));
        r.register_curvature("piecewise", |p| {
            let c = PiecewiseCurvature {
                inner: require(p, "inner")?,
                outer: require(p, "outer")?,
                r_in: require(p, "r_in")?,
                r_out: require(p, "r_out")?,
            };
            if !(c.r_out > c.r_in && c.r_in >= 0.0) {
                return Err(ModelError::InvalidParameter("piecewise curvature needs 0 ≤ r_in < r_out".into()));
            }
            Ok(Arc::new(c))
        });
        r.register_jump("additive", |p| Ok(Arc::new(AdditiveJump { scale: get(p, "scale", 1.0) })));
        r.register_jump("damped", |p| Ok(Arc::new(DampedJump { scale: get(p, "scale", 1.0) })));
        r
    }
}

impl ModelRegistry {
    pub fn register_drift(&mut self, name: &'static str, ctor: DriftCtor) {
        self.drifts.insert(name, ctor);
    }

    pub fn register_curvature(&mut self, name: &'static str, ctor: CurvatureCtor) {
        self.curvatures.insert(name, ctor);
    }

    pub fn register_jump(&mut self, name: &'static str, ctor: JumpCtor) {
        self.jumps.insert(name, ctor);
    }

    pub fn drift(&self, name: &str, p: &Params) -> Result<Arc<dyn Drift>, ModelError> {
        let c = self.drifts.get(name).ok_or_else(|| ModelError::Unknown { kind: "drift", name: name.into() })?;
        c(p)
    }

    pub fn curvature(&self, name: &str, p: &Params) -> Result<Arc<dyn Curvature>, ModelError> {
        let c = self.curvatures.get(name).ok_or_else(|| ModelError::Unknown { kind: "curvature", name: name.into() })?;
        c(p)
    }

    pub fn jump(&self, name: &str, p: &Params) -> Result<Arc<dyn JumpCoefficient>, ModelError> {
        let c = self.jumps.get(name).ok_or_else(|| ModelError::Unknown { kind: "jump coefficient", name: name.into() })?;
        c(p)
    }

    pub fn drift_names(&self) -> Vec<&'static str> {
        self.drifts.keys().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    Pass,
    Fail,
    Unknown,
    NotApplicable,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub status: Status,
    pub detail: String,
    pub witness: Option<f64>,
}

impl Check {
    fn new(status: Status, detail: impl Into<String>, witness: Option<f64>) -> Self {
        Self { status, detail: detail.into(), witness }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub checks: BTreeMap<String, Check>,
    pub kappa_variant: KappaVariant,
    pub d1: Option<(f64, f64)>,
    pub applicable: bool,
}

impl AssumptionReport {
    pub fn status(&self, name: &str) -> Status {
        self.checks.get(name).map_or(Status::Unknown, |c| c.status)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    pub pairs: usize,
    pub box_half_width: f64,
    pub tol: f64,
    pub seed: u64,
    pub r_top: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self { pairs: 10_000, box_half_width: 3.0, tol: 1e-9, seed: 0, r_top: 1e3 }
    }
}

/// Grid estimate of `(R, K)` in D1: `K` is the minimum of κ over
/// `[r_top/2, r_top]`, `R` the smallest grid radius beyond which κ ≥ K.
pub fn d1_estimate(kappa: &dyn Curvature, r_top: f64) -> Result<(f64, f64), f64> {
    let n = 4000;
    let grid: Vec<f64> = (0..=n).map(|i| r_top * i as f64 / n as f64).collect();
    let tail_min = grid[n / 2..].iter().map(|&r| kappa.eval(r)).fold(f64::INFINITY, f64::min);
    if !(tail_min > 0.0) {
        let witness = grid.iter().rev().find(|&&r| kappa.eval(r) <= 0.0).copied().unwrap_or(r_top);
        return Err(witness);
    }
    let mut r_start = 0.0;
    for &r in grid.iter().rev() {
        if kappa.eval(r) < tail_min * (1.0 - 1e-12) {
            r_start = r;
            break;
        }
    }
    let r_start = grid.iter().copied().find(|&r| r > r_start).filter(|_| r_start > 0.0).unwrap_or(0.0);
    Ok((r_start, tail_min))
}

/// Evaluates `r κ(r)` at `r = 2^-k`; returns (holds, witness radius).
pub fn d2_holds(kappa: &dyn Curvature) -> (bool, f64) {
    let vals: Vec<(f64, f64)> = (0..=60).map(|k| {
        let r = 2f64.powi(-k);
        (r, (r * kappa.eval(r)).abs())
    }).collect();
    let scale = vals.iter().map(|v| v.1).fold(1.0, f64::max);
    let bad = vals[50..].iter().find(|v| !(v.1 <= 1e-9 * scale));
    match bad {
        Some(&(r, _)) => (false, r),
        None => (true, vals[60].0),
    }
}

pub fn validate_assumptions(model: &ModelSpec, opts: ValidationOptions) -> AssumptionReport {
    let mut checks = BTreeMap::new();
    let kappa = model.kappa.as_ref();

    let d1 = match d1_estimate(kappa, opts.r_top) {
        Ok((r, k)) => {
            let mut status = Status::Pass;
            let detail = format!("κ ≥ {k:.6} beyond R = {r:.6}");
            if let Some((rc, kc)) = model.d1_constants {
                let n = 4000;
                let bad = (1..=n)
                    .map(|i| rc + (opts.r_top - rc) * i as f64 / n as f64)
                    .find(|&x| kappa.eval(x) < kc - opts.tol);
                if let Some(x) = bad {
                    status = Status::Fail;
                    let msg = format!("declared (R, K) = ({rc}, {kc}) violated at r = {x}");
                    checks.insert("D1".into(), Check::new(status, msg, Some(x)));
                }
            }
            if status == Status::Pass {
                checks.insert("D1".into(), Check::new(status, detail, None));
            }
            Some((r, k))
        }
        Err(w) => {
            checks.insert("D1".into(), Check::new(Status::Fail, format!("κ ≤ 0 at r = {w}"), Some(w)));
            None
        }
    };

    let (d2, w2) = d2_holds(kappa);
    checks.insert(
        "D2".into(),
        Check::new(if d2 { Status::Pass } else { Status::Fail }, "r κ(r) on r = 2^-k, k ≤ 60", (!d2).then_some(w2)),
    );

    checks.insert("E".into(), match &model.jump {
        None => Check::new(Status::NotApplicable, "no jump coefficient", None),
        Some(j) => {
            let lams: Vec<f64> = (-10..=4).map(|k| 2f64.powi(k)).collect();
            let finite: Vec<f64> = lams.iter().copied().filter(|&l| crate::transport::compute_beta(j, l).is_finite()).collect();
            match finite.last() {
                Some(&l) => Check::new(Status::Pass, format!("β finite up to λ = {l} on the probe grid"), Some(l)),
                None => Check::new(Status::Fail, "β infinite at every probed λ > 0", Some(lams[0])),
            }
        }
    });

    match &model.levy {
        None => {
            for a in ["L1", "L2", "L3", "L4", "L5"] {
                checks.insert(a.into(), Check::new(Status::NotApplicable, "no Lévy part", None));
            }
        }
        Some(l) => {
            checks.insert("L1".into(), Check::new(Status::Pass, "radial density", None));
            checks.insert("L2".into(), match l.gamma() {
                Ok(g) => Check::new(Status::Pass, format!("γ = {g:.10}"), None),
                Err(e) => Check::new(Status::Fail, e.to_string(), None),
            });
            checks.insert("L3".into(), Check::new(Status::Pass, "density given", None));
            checks.insert("L4".into(), overlap_check(l));
            checks.insert("L5".into(), match l.check_l5(1.0) {
                Ok(r) => Check::new(Status::Pass, format!("sup ε/C_ε = {:.6e} on (0, 1]", r.bound), None),
                Err(crate::levy::LevyError::AssumptionViolated { witness, detail, .. }) => {
                    Check::new(Status::Fail, detail, Some(witness))
                }
                Err(e) => Check::new(Status::Unknown, e.to_string(), None),
            });
        }
    }

    checks.insert("kappa".into(), kappa_consistency(model, opts));

    if let Some(sigma) = &model.diffusion.sigma {
        let mut rng = stream(opts.seed, Purpose::Validation, 1);
        let m = sigma.noise_dim();
        let mut buf = vec![0.0; model.dim * m];
        let mut x = vec![0.0; model.dim];
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            x.iter_mut().for_each(|v| *v = rng.random_range(-opts.box_half_width..opts.box_half_width));
            sigma.eval(&x, &mut buf);
            let op = DMatrix::from_row_slice(model.dim, m, &buf).singular_values().iter().cloned().fold(0.0, f64::max);
            worst = worst.max(op);
        }
        let ok = worst <= model.diffusion.sigma_inf + opts.tol;
        checks.insert(
            "sigma_envelope".into(),
            Check::new(if ok { Status::Pass } else { Status::Fail }, format!("sampled sup ‖σ(x)‖ = {worst:.6}"), Some(worst)),
        );
    }

    if let Some(j) = &model.jump {
        let mut rng = stream(opts.seed, Purpose::Validation, 2);
        let mut u = Vec::new();
        let mut out = vec![0.0; model.dim];
        let mut x = vec![0.0; model.dim];
        let mut excess: f64 = 0.0;
        for _ in 0..1000 {
            x.iter_mut().for_each(|v| *v = rng.random_range(-opts.box_half_width..opts.box_half_width));
            j.intensity.sample(&mut rng, &mut u);
            j.g.eval(&x, &u, &mut out);
            excess = excess.max(norm(&out) - j.g.envelope(&u));
        }
        let second = j.intensity.integrate(|u| j.g.envelope(u).powi(2));
        let ok = excess <= opts.tol && second.is_finite();
        checks.insert(
            "g_envelope".into(),
            Check::new(if ok { Status::Pass } else { Status::Fail }, format!("∫ g∞² dν = {second:.6}"), Some(excess)),
        );
    }

    AssumptionReport { checks, kappa_variant: model.kappa_variant(), d1, applicable: model.applicability() }
}

fn overlap_check(l: &RadialLevyMeasure) -> Check {
    if l.dim() != 1 {
        return Check::new(Status::Unknown, "overlap integral only evaluated in one dimension", None);
    }
    let cfg = QuadConfig::default();
    let mut worst = f64::INFINITY;
    let mut at = 0.0;
    for k in 0..20 {
        let x = 2f64.powi(-k);
        let f = |v: f64| l.profile().density(v.abs()).min(l.profile().density((v + x).abs()));
        let hi = l.support_upper().min(1e3);
        let v = integrate(f, -hi, -x - 1e-12, cfg).unwrap_or(0.0)
            + integrate(f, -x + 1e-12, -1e-12, cfg).unwrap_or(0.0)
            + integrate(f, 1e-12, hi, cfg).unwrap_or(0.0);
        if v < worst {
            worst = v;
            at = x;
        }
    }
    if worst > 0.0 {
        Check::new(Status::Pass, format!("min overlap mass {worst:.4e} for |x| ≤ 1"), None)
    } else {
        Check::new(Status::Fail, "overlap vanishes", Some(at))
    }
}

fn kappa_consistency(model: &ModelSpec, opts: ValidationOptions) -> Check {
    let d = model.dim;
    let mut rng = stream(opts.seed, Purpose::Validation, 0);
    let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
    let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
    let mut worst = f64::NEG_INFINITY;
    let mut witness = 0.0;
    let sigma_buf = model.diffusion.sigma.as_ref().map(|s| (vec![0.0; d * s.noise_dim()], vec![0.0; d * s.noise_dim()]));
    let mut sigma_buf = sigma_buf;
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    for _ in 0..opts.pairs {
        x.iter_mut().for_each(|v| *v = rng.random_range(-opts.box_half_width..opts.box_half_width));
        y.iter_mut().for_each(|v| *v = rng.random_range(-opts.box_half_width..opts.box_half_width));
        let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let r = norm(&z);
        if r == 0.0 {
            continue;
        }
        model.drift.eval(&x, &mut bx);
        model.drift.eval(&y, &mut by);
        let mut lhs: f64 = bx.iter().zip(&by).zip(&z).map(|((a, b), zz)| (a - b) * zz).sum();
        if let (Some(s), Some((sx, sy))) = (&model.diffusion.sigma, sigma_buf.as_mut()) {
            s.eval(&x, sx);
            s.eval(&y, sy);
            lhs += sx.iter().zip(sy.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        if let Some(j) = &model.jump {
            lhs += 0.5
                * j.intensity.integrate(|u| {
                    j.g.eval(&x, u, &mut gx);
                    j.g.eval(&y, u, &mut gy);
                    gx.iter().zip(&gy).map(|(a, b)| (a - b) * (a - b)).sum()
                });
        }
        let excess = lhs + model.kappa.eval(r) * r * r;
        if excess > worst {
            worst = excess;
            witness = r;
        }
    }
    let ok = worst <= opts.tol;
    Check::new(
        if ok { Status::Pass } else { Status::Fail },
        format!("max excess {worst:.3e} over {} sampled pairs ({:?} κ)", opts.pairs, model.kappa_variant()),
        (!ok).then_some(witness),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitReport {
    pub c: f64,
    pub min_eigenvalue: f64,
    pub lipschitz: Option<f64>,
}

/// Moves `C·I` of the multiplicative noise into the additive part.
///
/// The remainder is `sqrt(σσᵀ - C²I)`; its Lipschitz constant is reported as
/// `L M / sqrt(λ² - C²)` with `L` the Lipschitz constant of σ, `M = σ∞` and
/// `λ²` the sampled lower bound of σσᵀ.
pub fn split_diffusion(model: &ModelSpec, c: f64, samples: usize, seed: u64) -> Result<(ModelSpec, SplitReport), ModelError> {
    let sigma = model
        .diffusion
        .sigma
        .clone()
        .ok_or_else(|| ModelError::InvalidParameter("no multiplicative diffusion to split".into()))?;
    if sigma.noise_dim() != model.dim {
        return Err(ModelError::Dimension("splitting needs a square σ(x)".into()));
    }
    if !(c > 0.0) {
        return Err(ModelError::InvalidParameter(format!("C must be positive, got {c}")));
    }
    let d = model.dim;
    let mut rng = stream(seed, Purpose::Validation, 3);
    let mut x = vec![0.0; d];
    let mut lam_min = f64::INFINITY;
    for k in 0..samples.max(1) {
        if k > 0 {
            x.iter_mut().for_each(|v| *v = rng.random_range(-10.0..10.0));
        }
        let (_, m) = remainder_root(sigma.as_ref(), d, c, &x);
        if m <= 1e-14 {
            return Err(ModelError::NotUniformlyElliptic { witness: x.clone(), min_eig: m, c2: c * c });
        }
        lam_min = lam_min.min(m + c * c);
    }
    let lipschitz = sigma.lipschitz().map(|l| l * model.diffusion.sigma_inf / (lam_min - c * c).sqrt());
    let remainder = SplitRemainder { inner: sigma, c, dim: d, lipschitz };
    let additive = DMatrix::identity(d, d) * c;
    let sigma1 = match &model.diffusion.sigma1 {
        None => additive,
        Some(s) => {
            let combined = s * s.transpose() + DMatrix::identity(d, d) * (c * c);
            let eig = SymmetricEigen::new(combined);
            let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
        }
    };
    let mut out = model.clone();
    out.diffusion = DiffusionSpec { sigma1: Some(sigma1), sigma: Some(Arc::new(remainder)), sigma_inf: model.diffusion.sigma_inf };
    Ok((out, SplitReport { c, min_eigenvalue: lam_min, lipschitz }))
}

/// Frobenius norm of `(σ₁σ₁ᵀ + σ̃σ̃ᵀ) - σσᵀ` at `x`.
pub fn split_defect(original: &ModelSpec, split: &ModelSpec, x: &[f64]) -> f64 {
    let d = original.dim;
    let s = sigma_matrix(original.diffusion.sigma.as_ref().unwrap().as_ref(), d, x);
    let t = sigma_matrix(split.diffusion.sigma.as_ref().unwrap().as_ref(), d, x);
    let a = split.diffusion.sigma1.as_ref().unwrap();
    let b0 = original.diffusion.sigma1.as_ref().map(|m| m * m.transpose()).unwrap_or_else(|| DMatrix::zeros(d, d));
    (a * a.transpose() + &t * t.transpose() - &s * s.transpose() - b0).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(rate: f64) -> ModelSpec {
        let drift: Arc<dyn Drift> = Arc::new(LinearDrift { rate });
        let kappa = drift.matched_curvature().unwrap();
        ModelSpec::new(1, drift, kappa, DiffusionSpec::scalar(1, 1.0))
    }

    #[test]
    fn linear_passes_d1_d2() {
        let rep = validate_assumptions(&linear(1.0), ValidationOptions::default());
        assert_eq!(rep.status("D1"), Status::Pass);
        assert_eq!(rep.status("D2"), Status::Pass);
        assert_eq!(rep.status("kappa"), Status::Pass);
        assert_eq!(rep.d1, Some((0.0, 1.0)));
    }

    #[test]
    fn expanding_fails_d1() {
        let mut m = linear(-1.0);
        m.kappa = Arc::new(ConstantCurvature { value: -1.0 });
        let rep = validate_assumptions(&m, ValidationOptions::default());
        assert_eq!(rep.status("D1"), Status::Fail);
    }

    #[test]
    fn piecewise_reports_outer_radius() {
        let k = PiecewiseCurvature { inner: -3.0, outer: 2.0, r_in: 1.5, r_out: 2.5 };
        let (r, kk) = d1_estimate(&k, 1e3).unwrap();
        assert!((kk - 2.0).abs() < 1e-12);
        assert!((r - 2.5).abs() <= 1e3 / 4000.0, "{r}");
    }

    #[test]
    fn clamped_well_profile_is_valid() {
        let w = ClampedWell::default();
        let kappa = w.matched_curvature().unwrap();
        let m = ModelSpec::new(2, Arc::new(w), kappa, DiffusionSpec::scalar(2, 1.0));
        let rep = validate_assumptions(&m, ValidationOptions { box_half_width: 1.0, ..Default::default() });
        assert_eq!(rep.status("kappa"), Status::Pass, "{:?}", rep.checks["kappa"]);
    }

    #[test]
    fn clamped_well_dominates_acceptance_profile() {
        let k = ClampedWellCurvature { well: ClampedWell::default() };
        let p = PiecewiseCurvature { inner: -2.0, outer: 1.0, r_in: 1.0, r_out: 2.0 };
        for i in 0..=20_000 {
            let r = i as f64 * 1e-3;
            assert!(k.eval(r) >= p.eval(r) - 1e-12, "r = {r}");
        }
    }

    #[test]
    fn wrong_kappa_is_caught() {
        let mut m = linear(1.0);
        m.kappa = Arc::new(ConstantCurvature { value: 1.5 });
        let rep = validate_assumptions(&m, ValidationOptions { pairs: 1000, ..Default::default() });
        assert_eq!(rep.status("kappa"), Status::Fail);
    }

    #[test]
    fn alpha_of_scalar_sigma() {
        let d = DiffusionSpec::scalar(3, 2.0);
        assert!((d.alpha().unwrap() - 0.25).abs() < 1e-14);
        assert!((d.sigma1_norm() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn global_dissipativity_applicability() {
        assert!(linear(1.0).applicability());
        let mut m = linear(1.0);
        m.diffusion = DiffusionSpec::none();
        assert!(!m.applicability());
    }

    #[test]
    fn split_constant_scalar() {
        let mut m = linear(1.0);
        m.diffusion = DiffusionSpec {
            sigma1: None,
            sigma: Some(Arc::new(ConstantDiffusion { matrix: DMatrix::identity(1, 1) * 2.0 })),
            sigma_inf: 2.0,
        };
        let (s, rep) = split_diffusion(&m, 1.0, 10, 0).unwrap();
        let mut out = [0.0];
        s.diffusion.sigma.as_ref().unwrap().eval(&[0.3], &mut out);
        assert!((out[0] - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(rep.lipschitz, Some(0.0));
    }

    #[test]
    fn split_rejects_degenerate() {
        let mut m = linear(1.0);
        m.diffusion = DiffusionSpec {
            sigma1: None,
            sigma: Some(Arc::new(ConstantDiffusion { matrix: DMatrix::identity(1, 1) * 0.5 })),
            sigma_inf: 0.5,
        };
        assert!(matches!(split_diffusion(&m, 1.0, 10, 0), Err(ModelError::NotUniformlyElliptic { .. })));
    }
}

//! Coupled Euler–Maruyama integration of `(X_t, Y_t)`.
//!
//! A [`Scheme`] decides how the noises of `X` are transferred to `Y`. The
//! additive Brownian part can be shared, reflected or mixed. Lévy jumps can
//! be shared or mirror-thinned. The multiplicative Brownian noise and the
//! Poisson random measure driving `g` are always shared.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::levy::{norm, JumpBatch, LevyError, RadialLevyMeasure};
use crate::model::ModelSpec;
use crate::rng::{fill_normals, open_unit, stream, PathRng, Purpose};

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("scheme `{scheme}` is incompatible with the model: {reason}")]
    SchemeIncompatible { scheme: &'static str, reason: String },
    #[error("path exploded at t = {t}: |x| = {norm:e}")]
    PathExploded { t: f64, norm: f64 },
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Levy(#[from] LevyError),
}

/// Dense `d × d` matrix with its inverse, row-major.
#[derive(Debug, Clone)]
pub struct Sigma1 {
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub inverse: Vec<f64>,
}

impl Sigma1 {
    /// `None` without an additive part; the inverse is zero when σ₁ is singular.
    pub fn from_model(model: &ModelSpec) -> Option<Self> {
        let m = model.diffusion.sigma1.as_ref()?;
        let d = m.nrows();
        let inv = model.diffusion.sigma1_inverse().unwrap_or_else(|| nalgebra::DMatrix::zeros(d, d));
        let flat = |a: &nalgebra::DMatrix<f64>| (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect();
        Some(Self { dim: d, matrix: flat(m), inverse: flat(&inv) })
    }

    fn mul(a: &[f64], d: usize, v: &[f64], out: &mut [f64]) {
        for i in 0..d {
            out[i] = (0..d).map(|j| a[i * d + j] * v[j]).sum();
        }
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        Self::mul(&self.matrix, self.dim, v, out)
    }

    pub fn apply_inverse(&self, v: &[f64], out: &mut [f64]) {
        Self::mul(&self.inverse, self.dim, v, out)
    }
}

/// `w − 2e(e·w)` written into `out`.
pub fn reflect(e: &[f64], w: &[f64], out: &mut [f64]) {
    let p: f64 = e.iter().zip(w).map(|(a, b)| a * b).sum();
    for ((o, wi), ei) in out.iter_mut().zip(w).zip(e) {
        *o = wi - 2.0 * ei * p;
    }
}

/// Unit vector along `σ₁⁻¹ z`, or `None` when `z = 0`.
pub fn reflection_direction(z: &[f64], s1: &Sigma1) -> Option<Vec<f64>> {
    let mut e = vec![0.0; z.len()];
    s1.apply_inverse(z, &mut e);
    let n = norm(&e);
    if n == 0.0 {
        return None;
    }
    e.iter_mut().for_each(|v| *v /= n);
    Some(e)
}

/// Noise-space Brownian increments for the reflection coupling: `Y` gets `(I − 2eeᵀ) dW`.
pub fn step_reflection(z: &[f64], s1: &Sigma1, dw: &[f64], wx: &mut [f64], wy: &mut [f64]) {
    wx.copy_from_slice(dw);
    match reflection_direction(z, s1) {
        Some(e) => reflect(&e, dw, wy),
        None => wy.copy_from_slice(dw),
    }
}

/// Ramp `(λ, π)` with `λ² + π² = 1`; `λ = 0` on `|z| ≤ δ/2`, `λ = 1` on `|z| ≥ δ`.
pub fn mixing_weights(r: f64, delta: f64) -> (f64, f64) {
    let s = ((r - 0.5 * delta) / (0.5 * delta)).clamp(0.0, 1.0);
    let a = FRAC_PI_2 * s;
    if s == 0.0 {
        (0.0, 1.0)
    } else if s == 1.0 {
        (1.0, 0.0)
    } else {
        (a.sin(), a.cos())
    }
}

/// `X` gets `λ dW¹ + π dW²`, `Y` gets `λ R dW¹ + π dW²`.
pub fn step_mixed(z: &[f64], s1: &Sigma1, dw1: &[f64], dw2: &[f64], delta: f64, wx: &mut [f64], wy: &mut [f64]) {
    let (lam, pi) = mixing_weights(norm(z), delta);
    let mut r = vec![0.0; dw1.len()];
    if lam > 0.0 {
        match reflection_direction(z, s1) {
            Some(e) => reflect(&e, dw1, &mut r),
            None => r.copy_from_slice(dw1),
        }
    }
    for i in 0..dw1.len() {
        wx[i] = lam * dw1[i] + pi * dw2[i];
        wy[i] = lam * r[i] + pi * dw2[i];
    }
}

/// Thinning probability `ρ(v, z)`.
pub fn mirror_accept_prob(v: &[f64], z: &[f64], measure: &RadialLevyMeasure) -> f64 {
    let qv = measure.density_at(v);
    if !(qv > 0.0) {
        return 0.0;
    }
    let w: Vec<f64> = v.iter().zip(z).map(|(a, b)| a + b).collect();
    if (norm(v) <= 1.0) != (norm(&w) <= 1.0) {
        return 0.0;
    }
    (qv.min(measure.density_at(&w)) / qv).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JumpLabel {
    Accepted,
    Reflected,
    Common,
}

/// `Y`'s jump when `X` jumps by `v`: `z + v` if `u < ρ`, else the reflection of `v` across `z⊥`.
pub fn step_mirror(z: &[f64], v: &[f64], u: f64, measure: &RadialLevyMeasure, out: &mut [f64]) -> JumpLabel {
    let r = norm(z);
    if r == 0.0 {
        out.copy_from_slice(v);
        return JumpLabel::Common;
    }
    if u < mirror_accept_prob(v, z, measure) {
        for i in 0..v.len() {
            out[i] = z[i] + v[i];
        }
        JumpLabel::Accepted
    } else {
        let e: Vec<f64> = z.iter().map(|c| c / r).collect();
        reflect(&e, v, out);
        JumpLabel::Reflected
    }
}

/// Noise-transfer strategy.
pub trait Scheme: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    /// `Some` when contact `|Z| ≤ ε` glues the pair; `None` entry in the option means "default for dt".
    fn couples_on_contact(&self) -> Option<Option<f64>> {
        None
    }
    /// Variance per unit time of the `e`-component of `σ₁⁻¹Z`'s noise; drives the bridge hitting test.
    fn crossing_variance(&self, z: &[f64]) -> f64 {
        let _ = z;
        0.0
    }
    fn needs_second_normal(&self) -> bool {
        false
    }
    fn check(&self, model: &ModelSpec) -> Result<(), CouplingError>;
    fn brownian(&self, z: &[f64], s1: &Sigma1, dw1: &[f64], dw2: &[f64], wx: &mut [f64], wy: &mut [f64]) {
        let _ = (z, s1, dw2);
        wx.copy_from_slice(dw1);
        wy.copy_from_slice(dw1);
    }
    fn levy(&self, z: &[f64], v: &[f64], u: f64, measure: &RadialLevyMeasure, out: &mut [f64]) -> JumpLabel {
        let _ = (z, u, measure);
        out.copy_from_slice(v);
        JumpLabel::Common
    }
}

#[derive(Debug, Clone, Default)]
pub struct Synchronous;

impl Scheme for Synchronous {
    fn name(&self) -> &'static str {
        "synchronous"
    }
    fn check(&self, _model: &ModelSpec) -> Result<(), CouplingError> {
        Ok(())
    }
}

fn need_sigma1(name: &'static str, model: &ModelSpec) -> Result<(), CouplingError> {
    if model.diffusion.sigma1_det().abs() > 0.0 {
        Ok(())
    } else {
        Err(CouplingError::SchemeIncompatible { scheme: name, reason: "needs a nondegenerate additive Brownian part (det σ₁ ≠ 0)".into() })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Reflection {
    pub threshold: Option<f64>,
}

impl Scheme for Reflection {
    fn name(&self) -> &'static str {
        "reflection"
    }
    fn couples_on_contact(&self) -> Option<Option<f64>> {
        Some(self.threshold)
    }
    fn crossing_variance(&self, _z: &[f64]) -> f64 {
        4.0
    }
    fn check(&self, model: &ModelSpec) -> Result<(), CouplingError> {
        need_sigma1(self.name(), model)
    }
    fn brownian(&self, z: &[f64], s1: &Sigma1, dw1: &[f64], _dw2: &[f64], wx: &mut [f64], wy: &mut [f64]) {
        step_reflection(z, s1, dw1, wx, wy)
    }
}

#[derive(Debug, Clone)]
pub struct Mixed {
    pub delta: f64,
    pub threshold: Option<f64>,
}

impl Scheme for Mixed {
    fn name(&self) -> &'static str {
        "mixed"
    }
    fn couples_on_contact(&self) -> Option<Option<f64>> {
        Some(self.threshold)
    }
    fn crossing_variance(&self, z: &[f64]) -> f64 {
        4.0 * mixing_weights(norm(z), self.delta).0.powi(2)
    }
    fn needs_second_normal(&self) -> bool {
        true
    }
    fn check(&self, model: &ModelSpec) -> Result<(), CouplingError> {
        if !(self.delta > 0.0) {
            return Err(CouplingError::InvalidParameter(format!("mixed scheme needs delta > 0, got {}", self.delta)));
        }
        need_sigma1(self.name(), model)
    }
    fn brownian(&self, z: &[f64], s1: &Sigma1, dw1: &[f64], dw2: &[f64], wx: &mut [f64], wy: &mut [f64]) {
        step_mixed(z, s1, dw1, dw2, self.delta, wx, wy)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Mirror;

impl Scheme for Mirror {
    fn name(&self) -> &'static str {
        "mirror"
    }
    fn check(&self, model: &ModelSpec) -> Result<(), CouplingError> {
        if model.levy.is_none() {
            return Err(CouplingError::SchemeIncompatible { scheme: "mirror", reason: "needs a Lévy measure".into() });
        }
        Ok(())
    }
    fn levy(&self, z: &[f64], v: &[f64], u: f64, measure: &RadialLevyMeasure, out: &mut [f64]) -> JumpLabel {
        step_mirror(z, v, u, measure, out)
    }
}

pub type SchemeParams = BTreeMap<String, f64>;
pub type SchemeCtor = fn(&SchemeParams) -> Result<Arc<dyn Scheme>, CouplingError>;

pub struct SchemeRegistry {
    ctors: BTreeMap<&'static str, SchemeCtor>,
}

impl Default for SchemeRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("synchronous", |_| Ok(Arc::new(Synchronous)));
        r.register("reflection", |p| Ok(Arc::new(Reflection { threshold: p.get("threshold").copied() })));
        r.register("mirror", |_| Ok(Arc::new(Mirror)));
        r.register("mixed", |p| {
            let delta = *p.get("delta").ok_or_else(|| CouplingError::InvalidParameter("mixed scheme needs `delta`".into()))?;
            if !(delta > 0.0) {
                return Err(CouplingError::InvalidParameter(format!("delta must be positive, got {delta}")));
            }
            Ok(Arc::new(Mixed { delta, threshold: p.get("threshold").copied() }))
        });
        r
    }
}

impl SchemeRegistry {
    pub fn register(&mut self, name: &'static str, ctor: SchemeCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ctors.keys().copied().collect()
    }

    pub fn build(&self, name: &str, params: &SchemeParams) -> Result<Arc<dyn Scheme>, CouplingError> {
        let ctor = self.ctors.get(name).ok_or_else(|| CouplingError::UnknownScheme(name.to_string()))?;
        ctor(params)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub t_end: f64,
    pub dt: f64,
    pub record_every: usize,
    pub log_jumps: bool,
}

impl SimOptions {
    pub fn new(t_end: f64, dt: f64) -> Self {
        Self { t_end, dt, record_every: 1, log_jumps: false }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    fn validate(&self) -> Result<(), CouplingError> {
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) || self.record_every == 0 {
            return Err(CouplingError::InvalidParameter(format!("need dt > 0, T ≥ 0, record_every ≥ 1 (dt = {}, T = {})", self.dt, self.t_end)));
        }
        Ok(())
    }
}

/// `max(10⁻⁶, 10⁻²√dt)`.
pub fn default_threshold(dt: f64) -> f64 {
    (1e-2 * dt.sqrt()).max(1e-6)
}

#[derive(Debug, Clone, Serialize)]
pub struct JumpRecord {
    pub time: f64,
    pub step: usize,
    pub v: Vec<f64>,
    pub label: JumpLabel,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoupledPath {
    pub dim: usize,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub jump_log: Vec<JumpRecord>,
    pub coupling_time: f64,
    pub glued: bool,
    pub proposed_jumps: u64,
    pub accepted_jumps: u64,
}

impl CoupledPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.dim..(k + 1) * self.dim]
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.dim..(k + 1) * self.dim]
    }

    pub fn z_norm(&self, k: usize) -> f64 {
        self.x_at(k).iter().zip(self.y_at(k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn final_x(&self) -> &[f64] {
        self.x_at(self.len() - 1)
    }

    pub fn final_y(&self) -> &[f64] {
        self.y_at(self.len() - 1)
    }
}

/// Drift perturbation `h(t, x̃)` written into `out`.
pub type Perturbation<'a> = &'a (dyn Fn(f64, &[f64], &mut [f64]) + Sync);

struct Stepper<'a> {
    model: &'a ModelSpec,
    scheme: &'a dyn Scheme,
    s1: Option<Sigma1>,
    d: usize,
    noise_dim: usize,
    comp_cache: Option<Vec<f64>>,
    g_rate: f64,
    dw1: Vec<f64>,
    dw2: Vec<f64>,
    db: Vec<f64>,
    wx: Vec<f64>,
    wy: Vec<f64>,
    buf: Vec<f64>,
    sig: Vec<f64>,
    bx: Vec<f64>,
    by: Vec<f64>,
    z: Vec<f64>,
    yj: Vec<f64>,
    mark: Vec<f64>,
    batch: JumpBatch,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a ModelSpec, scheme: &'a dyn Scheme) -> Self {
        let d = model.dim;
        let noise_dim = model.diffusion.sigma.as_ref().map_or(0, |s| s.noise_dim());
        let comp_cache = model.jump.as_ref().filter(|j| j.g.state_independent()).map(|j| {
            let mut c = vec![0.0; d];
            j.compensator(&vec![0.0; d], &mut c);
            c
        });
        let g_rate = model.jump.as_ref().map_or(0.0, |j| j.intensity.total_mass());
        Self {
            model,
            scheme,
            s1: Sigma1::from_model(model),
            d,
            noise_dim,
            comp_cache,
            g_rate,
            dw1: vec![0.0; d],
            dw2: vec![0.0; d],
            db: vec![0.0; noise_dim],
            wx: vec![0.0; d],
            wy: vec![0.0; d],
            buf: vec![0.0; d],
            sig: vec![0.0; d * noise_dim],
            bx: vec![0.0; d],
            by: vec![0.0; d],
            z: vec![0.0; d],
            yj: vec![0.0; d],
            mark: Vec::new(),
            batch: JumpBatch { dim: d, ..Default::default() },
        }
    }

    fn add_sigma(&mut self, state: &[f64], out: &mut [f64]) {
        if let Some(s) = &self.model.diffusion.sigma {
            s.eval(state, &mut self.sig);
            for i in 0..self.d {
                out[i] += (0..self.noise_dim).map(|j| self.sig[i * self.noise_dim + j] * self.db[j]).sum::<f64>();
            }
        }
    }

    fn compensator(&self, state: &[f64], out: &mut [f64]) {
        match (&self.comp_cache, &self.model.jump) {
            (Some(c), _) => out.copy_from_slice(c),
            (None, Some(j)) => j.compensator(state, out),
            (None, None) => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// One Euler step; returns true when the pair is glued during the step.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        rng: &mut PathRng,
        t: f64,
        dt: f64,
        step: usize,
        x: &mut [f64],
        y: &mut [f64],
        glued: bool,
        h: Option<Perturbation<'_>>,
        log: Option<&mut Vec<JumpRecord>>,
        counts: &mut (u64, u64),
    ) -> Result<Option<f64>, CouplingError> {
        let d = self.d;
        let sq = dt.sqrt();
        let tracking = !glued || h.is_some();
        for i in 0..d {
            self.z[i] = x[i] - y[i];
        }
        // continuous part, evaluated at the start of the step
        self.model.drift_at(x, &mut self.bx);
        if let Some(h) = h {
            h(t, x, &mut self.buf);
            for i in 0..d {
                self.bx[i] += self.buf[i];
            }
        }
        if tracking {
            self.model.drift_at(y, &mut self.by);
        }
        if let Some(s1) = &self.s1 {
            fill_normals(rng, &mut self.dw1, sq);
            if self.scheme.needs_second_normal() {
                fill_normals(rng, &mut self.dw2, sq);
            }
            if tracking {
                self.scheme.brownian(&self.z, s1, &self.dw1, &self.dw2, &mut self.wx, &mut self.wy);
            } else {
                self.wx.copy_from_slice(&self.dw1);
            }
        }
        if self.noise_dim > 0 {
            fill_normals(rng, &mut self.db, sq);
        }
        let mut dx = vec![0.0; d];
        let mut dy = vec![0.0; d];
        for i in 0..d {
            dx[i] = self.bx[i] * dt;
            dy[i] = self.by[i] * dt;
        }
        if let Some(s1) = &self.s1 {
            s1.apply(&self.wx, &mut self.buf);
            dx.iter_mut().zip(&self.buf).for_each(|(a, b)| *a += b);
            if tracking {
                s1.apply(&self.wy, &mut self.buf);
                dy.iter_mut().zip(&self.buf).for_each(|(a, b)| *a += b);
            }
        }
        if self.noise_dim > 0 {
            self.add_sigma(&x.to_vec(), &mut dx);
            if tracking {
                self.add_sigma(&y.to_vec(), &mut dy);
            }
        }
        // jumps of the Poisson random measure, shared marks
        if let Some(j) = &self.model.jump {
            let mut cx = vec![0.0; d];
            self.compensator(x, &mut cx);
            let mut cy = vec![0.0; d];
            if tracking {
                self.compensator(y, &mut cy);
            }
            for i in 0..d {
                dx[i] -= cx[i] * dt;
                dy[i] -= cy[i] * dt;
            }
            let n = if self.g_rate > 0.0 { Poisson::new(self.g_rate * dt).map(|p| p.sample(rng) as usize).unwrap_or(0) } else { 0 };
            for _ in 0..n {
                j.intensity.sample(rng, &mut self.mark);
                j.g.eval(x, &self.mark, &mut self.buf);
                dx.iter_mut().zip(&self.buf).for_each(|(a, b)| *a += b);
                if tracking {
                    j.g.eval(y, &self.mark, &mut self.buf);
                    dy.iter_mut().zip(&self.buf).for_each(|(a, b)| *a += b);
                }
            }
        }
        for i in 0..d {
            x[i] += dx[i];
            if tracking {
                y[i] += dy[i];
            }
        }
        let mut glued_at = None;
        let mut still_glued = glued;
        if let Some(m) = &self.model.levy {
            m.sample_jumps_into(dt, rng, &mut self.batch)?;
            let mut log = log;
            for k in 0..self.batch.len() {
                let u = open_unit(rng);
                let v = self.batch.vector(k).to_vec();
                counts.0 += 1;
                let label = if still_glued && h.is_none() {
                    JumpLabel::Common
                } else {
                    for i in 0..d {
                        self.z[i] = x[i] - y[i];
                    }
                    self.scheme.levy(&self.z, &v, u, m, &mut self.yj)
                };
                for i in 0..d {
                    x[i] += v[i];
                }
                match label {
                    JumpLabel::Accepted => {
                        counts.1 += 1;
                        if h.is_none() {
                            y.copy_from_slice(x);
                            still_glued = true;
                            glued_at = Some(t + self.batch.times[k]);
                        } else {
                            y.iter_mut().zip(&self.yj).for_each(|(a, b)| *a += b);
                        }
                    }
                    JumpLabel::Common if still_glued && h.is_none() => {}
                    _ => y.iter_mut().zip(&self.yj).for_each(|(a, b)| *a += b),
                }
                if let Some(l) = log.as_deref_mut() {
                    l.push(JumpRecord { time: t + self.batch.times[k], step, v, label, x: x.to_vec(), y: if still_glued && h.is_none() { x.to_vec() } else { y.to_vec() } });
                }
            }
        }
        Ok(glued_at)
    }
}

fn check_cap(x: &[f64], cap: f64, t: f64) -> Result<(), CouplingError> {
    let n = norm(x);
    if !n.is_finite() || n > cap {
        return Err(CouplingError::PathExploded { t, norm: n });
    }
    Ok(())
}

fn run(
    model: &ModelSpec,
    scheme: &dyn Scheme,
    x0: &[f64],
    y0: &[f64],
    opts: &SimOptions,
    rng: &mut PathRng,
    h: Option<Perturbation<'_>>,
) -> Result<CoupledPath, CouplingError> {
    opts.validate()?;
    scheme.check(model)?;
    let d = model.dim;
    if x0.len() != d || y0.len() != d {
        return Err(CouplingError::InvalidParameter(format!("initial states must have dimension {d}")));
    }
    let contact = if h.is_none() { scheme.couples_on_contact().map(|t| t.unwrap_or_else(|| default_threshold(opts.dt))) } else { None };
    let mut stepper = Stepper::new(model, scheme);
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut glued = h.is_none() && x == y;
    let mut coupling_time = if glued { 0.0 } else { f64::INFINITY };
    let n = opts.steps();
    let cap = n / opts.record_every + 2;
    let mut path = CoupledPath {
        dim: d,
        times: Vec::with_capacity(cap),
        x: Vec::with_capacity(cap * d),
        y: Vec::with_capacity(cap * d),
        jump_log: Vec::new(),
        coupling_time,
        glued,
        proposed_jumps: 0,
        accepted_jumps: 0,
    };
    let record = |p: &mut CoupledPath, t: f64, x: &[f64], y: &[f64]| {
        p.times.push(t);
        p.x.extend_from_slice(x);
        p.y.extend_from_slice(y);
    };
    record(&mut path, 0.0, &x, &y);
    let mut counts = (0, 0);
    let mut log = Vec::new();
    let s1 = Sigma1::from_model(model);
    let whiten = |x: &[f64], y: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        match &s1 {
            Some(s) => {
                let mut w = vec![0.0; z.len()];
                s.apply_inverse(&z, &mut w);
                w
            }
            None => z,
        }
    };
    for k in 0..n {
        let t = k as f64 * opts.dt;
        // pre-step reflection axis for the bridge hitting test
        let bridge = match contact {
            Some(_) if !glued => {
                let z0: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                let v = scheme.crossing_variance(&z0);
                let w = whiten(&x, &y);
                let a = norm(&w);
                (v > 0.0 && a > 0.0).then(|| (w.iter().map(|c| c / a).collect::<Vec<f64>>(), a, v))
            }
            _ => None,
        };
        let hit = stepper.step(rng, t, opts.dt, k, &mut x, &mut y, glued, h, opts.log_jumps.then_some(&mut log), &mut counts)?;
        let t1 = (k + 1) as f64 * opts.dt;
        if glued {
            y.copy_from_slice(&x);
        } else if let Some(tc) = hit {
            glued = true;
            coupling_time = tc;
        } else if let Some(eps) = contact {
            let z = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let crossed = match &bridge {
                Some((e, a, v)) => {
                    let b: f64 = e.iter().zip(whiten(&x, &y)).map(|(p, q)| p * q).sum();
                    b <= 0.0 || open_unit(rng) < (-2.0 * a * b / (v * opts.dt)).exp()
                }
                None => false,
            };
            if z <= eps || crossed {
                y.copy_from_slice(&x);
                glued = true;
                coupling_time = t1;
            }
        }
        check_cap(&x, model.path_cap, t1)?;
        check_cap(&y, model.path_cap, t1)?;
        if (k + 1) % opts.record_every == 0 || k + 1 == n {
            record(&mut path, t1, &x, &y);
        }
    }
    path.jump_log = log;
    path.coupling_time = coupling_time;
    path.glued = glued;
    path.proposed_jumps = counts.0;
    path.accepted_jumps = counts.1;
    Ok(path)
}

/// Coupled trajectory from `(x0, y0)`; the pair is glued from the coupling time on.
pub fn simulate_coupled(model: &ModelSpec, scheme: &dyn Scheme, x0: &[f64], y0: &[f64], opts: &SimOptions, rng: &mut PathRng) -> Result<CoupledPath, CouplingError> {
    run(model, scheme, x0, y0, opts, rng, None)
}

/// `x` integrates the drift perturbed by `h`, `y` the unperturbed equation; both start at `x0` and are never glued.
pub fn simulate_drift_perturbed(model: &ModelSpec, h: Perturbation<'_>, scheme: &dyn Scheme, x0: &[f64], opts: &SimOptions, rng: &mut PathRng) -> Result<CoupledPath, CouplingError> {
    run(model, scheme, x0, x0, opts, rng, Some(h))
}

/// Final state of a single uncoupled path.
pub fn simulate_marginal(model: &ModelSpec, x0: &[f64], t_end: f64, dt: f64, rng: &mut PathRng) -> Result<Vec<f64>, CouplingError> {
    let opts = SimOptions { t_end, dt, record_every: usize::MAX, log_jumps: false };
    let p = run(model, &Synchronous, x0, x0, &opts, rng, None)?;
    Ok(p.final_x().to_vec())
}

/// States `(x, y)` at each checkpoint (non-decreasing times from 0), continuing one stream.
pub fn simulate_checkpoints(model: &ModelSpec, scheme: &dyn Scheme, x0: &[f64], y0: &[f64], checkpoints: &[f64], dt: f64, rng: &mut PathRng) -> Result<Vec<(Vec<f64>, Vec<f64>)>, CouplingError> {
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut last = 0.0;
    let mut out = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        if t < last {
            return Err(CouplingError::InvalidParameter(format!("checkpoints must be sorted ({t} after {last})")));
        }
        if t > last {
            let opts = SimOptions { t_end: t - last, dt, record_every: usize::MAX, log_jumps: false };
            let p = run(model, scheme, &x, &y, &opts, rng, None)?;
            x = p.final_x().to_vec();
            y = p.final_y().to_vec();
            last = t;
        }
        out.push((x.clone(), y.clone()));
    }
    Ok(out)
}

/// Runs `f` on a rayon pool of `workers` threads (0 means the rayon default).
pub fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// `n` coupled paths, path `i` on stream `(seed, Coupled, i)`; output order is path order.
pub fn run_ensemble<F>(model: &ModelSpec, scheme: &dyn Scheme, init: F, opts: &SimOptions, n: usize, seed: u64, workers: usize) -> Result<Vec<CoupledPath>, CouplingError>
where
    F: Fn(usize) -> (Vec<f64>, Vec<f64>) + Sync,
{
    in_pool(workers, || {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let (x0, y0) = init(i);
                simulate_coupled(model, scheme, &x0, &y0, opts, &mut stream(seed, Purpose::Coupled, i as u64))
            })
            .collect()
    })
}

/// Independent burn-in pairs: both members start at `x0` and run for `burn` on streams `2i`, `2i + 1`.
pub fn burn_in_pairs(model: &ModelSpec, x0: &[f64], burn: f64, dt: f64, n: usize, seed: u64, workers: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>, CouplingError> {
    in_pool(workers, || {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let a = simulate_marginal(model, x0, burn, dt, &mut stream(seed, Purpose::BurnIn, 2 * i as u64))?;
                let b = simulate_marginal(model, x0, burn, dt, &mut stream(seed, Purpose::BurnIn, 2 * i as u64 + 1))?;
                Ok((a, b))
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantCurvature, DiffusionSpec, LinearDrift};

    fn ou(k: f64) -> ModelSpec {
        ModelSpec::new(1, Arc::new(LinearDrift { rate: k }), Arc::new(ConstantCurvature { value: k }), DiffusionSpec::scalar(1, 1.0))
    }

    #[test]
    fn reflection_1d_negates() {
        let s1 = Sigma1 { dim: 1, matrix: vec![1.0], inverse: vec![1.0] };
        let (mut a, mut b) = ([0.0], [0.0]);
        step_reflection(&[0.7], &s1, &[0.3], &mut a, &mut b);
        assert_eq!(a, [0.3]);
        assert_eq!(b, [-0.3]);
    }

    #[test]
    fn mixing_regimes() {
        assert_eq!(mixing_weights(0.04, 0.1), (0.0, 1.0));
        assert_eq!(mixing_weights(0.2, 0.1), (1.0, 0.0));
        let (l, p) = mixing_weights(0.075, 0.1);
        assert!((l * l + p * p - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_start_is_glued() {
        let m = ou(1.0);
        let p = simulate_coupled(&m, &Reflection::default(), &[0.5], &[0.5], &SimOptions::new(1.0, 1e-2), &mut stream(1, Purpose::Coupled, 0)).unwrap();
        assert_eq!(p.coupling_time, 0.0);
        assert_eq!(p.x, p.y);
    }

    #[test]
    fn reflection_needs_sigma1() {
        let m = ModelSpec::new(1, Arc::new(LinearDrift { rate: 1.0 }), Arc::new(ConstantCurvature { value: 1.0 }), DiffusionSpec::none());
        let e = simulate_coupled(&m, &Reflection::default(), &[0.0], &[1.0], &SimOptions::new(1.0, 1e-2), &mut stream(1, Purpose::Coupled, 0));
        assert!(matches!(e, Err(CouplingError::SchemeIncompatible { .. })));
    }

    #[test]
    fn registry_builds_all() {
        let r = SchemeRegistry::default();
        let mut p = SchemeParams::new();
        p.insert("delta".into(), 0.1);
        for n in r.names() {
            assert_eq!(r.build(n, &p).unwrap().name(), n);
        }
        assert!(r.build("mixed", &SchemeParams::new()).is_err());
    }
}

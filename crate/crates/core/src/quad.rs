//! One-dimensional quadrature and scalar search.

use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct QuadConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: u32,
    pub max_evals: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_depth: 60,
            max_evals: 2_000_000,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("integrand is not finite at x = {at}")]
    NonFinite { at: f64 },
    #[error("evaluation budget exhausted on [{a}, {b}]")]
    BudgetExhausted { a: f64, b: f64 },
    #[error("shell sums did not settle after {shells} dyadic shells (last shell {last})")]
    Divergent { shells: usize, last: f64 },
}

struct Simpson<'a, F: FnMut(f64) -> f64> {
    f: &'a mut F,
    evals: usize,
    cfg: QuadConfig,
}

impl<F: FnMut(f64) -> f64> Simpson<'_, F> {
    fn eval(&mut self, x: f64) -> Result<f64, QuadError> {
        self.evals += 1;
        if self.evals > self.cfg.max_evals {
            return Err(QuadError::BudgetExhausted { a: x, b: x });
        }
        let v = (self.f)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(QuadError::NonFinite { at: x })
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        &mut self,
        a: f64,
        fa: f64,
        m: f64,
        fm: f64,
        b: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64, QuadError> {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = self.eval(lm)?;
        let frm = self.eval(rm)?;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth >= self.cfg.max_depth || delta.abs() <= 15.0 * tol || (m - a) <= f64::EPSILON * m.abs() {
            return Ok(left + right + delta / 15.0);
        }
        Ok(self.recurse(a, fa, lm, flm, m, fm, left, 0.5 * tol, depth + 1)?
            + self.recurse(m, fm, rm, frm, b, fb, right, 0.5 * tol, depth + 1)?)
    }
}

/// Adaptive Simpson on `[a, b]`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, cfg: QuadConfig) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return integrate(f, b, a, cfg).map(|v| -v);
    }
    let mut s = Simpson { f: &mut f, evals: 0, cfg };
    // a coarse 8-panel pass sets the relative scale
    let n = 8;
    let h = (b - a) / n as f64;
    let mut xs = Vec::with_capacity(2 * n + 1);
    for i in 0..=2 * n {
        xs.push(a + 0.5 * h * i as f64);
    }
    xs[2 * n] = b;
    let mut fx = Vec::with_capacity(xs.len());
    for &x in &xs {
        fx.push(s.eval(x)?);
    }
    let mut panels = Vec::with_capacity(n);
    let mut coarse = 0.0;
    for i in 0..n {
        let p = h / 6.0 * (fx[2 * i] + 4.0 * fx[2 * i + 1] + fx[2 * i + 2]);
        coarse += p.abs();
        panels.push(p);
    }
    let tol = cfg.abs_tol.max(cfg.rel_tol * coarse) / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        total += s.recurse(
            xs[2 * i],
            fx[2 * i],
            xs[2 * i + 1],
            fx[2 * i + 1],
            xs[2 * i + 2],
            fx[2 * i + 2],
            panels[i],
            tol,
            0,
        )?;
    }
    Ok(total)
}

const MAX_SHELLS: usize = 200;

/// Integral over `[a, inf)` summed over dyadic shells `[a 2^k, a 2^(k+1)]`.
///
/// Stops once the geometric remainder estimate drops below the relative
/// tolerance; `Divergent` if that never happens within the shell cap.
pub fn integrate_to_inf<F: FnMut(f64) -> f64>(mut f: F, a: f64, cfg: QuadConfig) -> Result<f64, QuadError> {
    assert!(a > 0.0, "tail integration needs a positive left end");
    shells(&mut f, a, 2.0, cfg)
}

/// Integral over `(0, b]` summed over shells `[b 2^-(k+1), b 2^-k]`.
pub fn integrate_from_zero<F: FnMut(f64) -> f64>(mut f: F, b: f64, cfg: QuadConfig) -> Result<f64, QuadError> {
    assert!(b > 0.0, "integration from zero needs a positive right end");
    shells(&mut f, b, 0.5, cfg)
}

fn shells<F: FnMut(f64) -> f64>(f: &mut F, start: f64, ratio: f64, cfg: QuadConfig) -> Result<f64, QuadError> {
    let mut total = 0.0;
    let mut lo = start;
    let mut prev = f64::NAN;
    let mut quiet = 0;
    for k in 0..MAX_SHELLS {
        let hi = lo * ratio;
        let shell = integrate(&mut *f, lo.min(hi), lo.max(hi), cfg)?;
        total += shell;
        let mag = shell.abs();
        let scale = cfg.abs_tol.max(cfg.rel_tol * total.abs());
        if mag == 0.0 {
            quiet += 1;
            if quiet >= 8 {
                return Ok(total);
            }
        } else {
            quiet = 0;
            let rho = mag / prev;
            if rho.is_finite() && rho < 0.95 {
                let remainder = mag * rho / (1.0 - rho);
                if remainder <= scale {
                    return Ok(total);
                }
            }
        }
        if !hi.is_finite() || hi == 0.0 {
            return Err(QuadError::Divergent { shells: k + 1, last: shell });
        }
        prev = mag;
        lo = hi;
    }
    Err(QuadError::Divergent { shells: MAX_SHELLS, last: prev })
}

/// Golden-section search for the maximum of a unimodal function on `[a, b]`.
/// Returns `(argmax, max)`, also comparing against the endpoint values.
pub fn golden_max<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, x_tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut iters = 0;
    while (hi - lo) > x_tol * (1.0 + lo.abs().max(hi.abs())) && iters < 400 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
        iters += 1;
    }
    let mut best = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    for x in [a, b] {
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

/// Bisection on a predicate that holds at `good` and fails at `bad`;
/// returns the last point where it held.
pub fn bisect<F: FnMut(f64) -> bool>(mut pred: F, mut good: f64, mut bad: f64, tol: f64) -> f64 {
    let mut iters = 0;
    while (good - bad).abs() > tol * (1.0 + good.abs()) && iters < 200 {
        let mid = 0.5 * (good + bad);
        if pred(mid) {
            good = mid;
        } else {
            bad = mid;
        }
        iters += 1;
    }
    good
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let v = integrate(|x| x * x * x - 2.0 * x, 0.0, 2.0, QuadConfig::default()).unwrap();
        assert!((v - 0.0).abs() < 1e-12);
        let v = integrate(|x| x * x, -1.0, 2.0, QuadConfig::default()).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let a = integrate(f64::exp, 0.0, 1.0, QuadConfig::default()).unwrap();
        let b = integrate(f64::exp, 1.0, 0.0, QuadConfig::default()).unwrap();
        assert_eq!(a, -b);
        assert!((a - (1f64.exp() - 1.0)).abs() < 1e-11);
    }

    #[test]
    fn power_tail() {
        let v = integrate_to_inf(|r| r.powf(-1.5), 1.0, QuadConfig::default()).unwrap();
        assert!((v - 2.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn log_tail_diverges() {
        let e = integrate_to_inf(|r| 1.0 / r, 1.0, QuadConfig::default()).unwrap_err();
        assert!(matches!(e, QuadError::Divergent { .. }));
    }

    #[test]
    fn singular_origin() {
        let v = integrate_from_zero(|y| y.powf(-0.5), 1.0, QuadConfig::default()).unwrap();
        assert!((v - 2.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn nan_reported() {
        let e = integrate(|x| if x > 0.5 { f64::NAN } else { x }, 0.0, 1.0, QuadConfig::default()).unwrap_err();
        assert!(matches!(e, QuadError::NonFinite { .. }));
    }

    #[test]
    fn golden_finds_parabola_peak() {
        let (x, v) = golden_max(|x| -(x - 0.3) * (x - 0.3) + 2.0, 0.0, 1.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-6);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn golden_prefers_endpoint() {
        let (x, _) = golden_max(|x| x, 0.0, 1.0, 1e-12);
        assert_eq!(x, 1.0);
    }

    #[test]
    fn bisect_root() {
        let r = bisect(|x| x * x < 2.0, 0.0, 2.0, 1e-14);
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
    }
}

//! Piecewise cubic interpolation on sorted abscissae.

/// Index `i` with `xs[i] <= x < xs[i+1]`, clamped to the valid segment range.
pub fn segment(xs: &[f64], x: f64) -> usize {
    debug_assert!(xs.len() >= 2);
    let n = xs.len();
    if x <= xs[0] {
        return 0;
    }
    if x >= xs[n - 1] {
        return n - 2;
    }
    match xs.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i - 1,
    }
}

/// Cubic Hermite value on `[x0, x1]` from end values and end slopes.
#[inline]
pub fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}

/// Monotone piecewise cubic (Fritsch–Carlson slopes).
#[derive(Debug, Clone)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl Pchip {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert_eq!(xs.len(), ys.len());
        assert!(xs.len() >= 2, "need at least two nodes");
        assert!(xs.windows(2).all(|w| w[1] > w[0]), "abscissae must increase");
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut ds = vec![0.0; n];
        if n == 2 {
            ds[0] = delta[0];
            ds[1] = delta[0];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] <= 0.0 {
                    ds[i] = 0.0;
                } else {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    ds[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            ds[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            ds[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { xs, ys, ds }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = segment(&self.xs, x);
        hermite(self.xs[i], self.xs[i + 1], self.ys[i], self.ys[i + 1], self.ds[i], self.ds[i + 1], x)
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reproduces_nodes_and_lines() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.7).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        let p = Pchip::new(xs.clone(), ys.clone());
        for (x, y) in xs.iter().zip(&ys) {
            assert!((p.eval(*x) - y).abs() < 1e-14);
        }
        assert!((p.eval(2.45) - (3.0 * 2.45 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn hermite_exact_for_cubics() {
        let f = |x: f64| x * x * x - x;
        let df = |x: f64| 3.0 * x * x - 1.0;
        let v = hermite(0.5, 1.5, f(0.5), f(1.5), df(0.5), df(1.5), 1.1);
        assert!((v - f(1.1)).abs() < 1e-14);
    }

    #[test]
    fn segment_clamps() {
        let xs = [0.0, 1.0, 2.0];
        assert_eq!(segment(&xs, -1.0), 0);
        assert_eq!(segment(&xs, 1.0), 1);
        assert_eq!(segment(&xs, 5.0), 1);
        assert_eq!(segment(&xs, 0.5), 0);
    }

    proptest! {
        #[test]
        fn monotone_data_gives_monotone_curve(steps in proptest::collection::vec(0.0f64..3.0, 3..20)) {
            let xs: Vec<f64> = (0..=steps.len()).map(|i| i as f64).collect();
            let mut ys = vec![0.0];
            for s in &steps { let last = *ys.last().unwrap(); ys.push(last + s); }
            let p = Pchip::new(xs.clone(), ys);
            let mut prev = p.eval(0.0);
            for k in 1..=400 {
                let x = k as f64 * (xs.len() - 1) as f64 / 400.0;
                let v = p.eval(x);
                prop_assert!(v >= prev - 1e-12);
                prev = v;
            }
        }
    }
}

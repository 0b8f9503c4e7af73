//! Order-stable reductions and small statistical tests.

use serde::Serialize;

/// Pairwise (cascade) summation; result depends only on the slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, f64::NAN);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Streaming mean/variance with an associative merge.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        let mean = self.mean + d * other.count as f64 / n as f64;
        let m2 = self.m2 + other.m2 + d * d * self.count as f64 * other.count as f64 / n as f64;
        Moments { count: n, mean, m2 }
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

pub const DEFAULT_BATCHES: usize = 16;

/// Splits `xs` into `batches` contiguous blocks, applies `stat` to each and
/// returns (stat on the full sample, batch-means standard error).
pub fn batch_means<F: Fn(&[f64]) -> f64>(xs: &[f64], batches: usize, stat: F) -> (f64, f64) {
    let full = stat(xs);
    let b = batches.min(xs.len()).max(2);
    let per: Vec<f64> = (0..b)
        .map(|k| {
            let lo = k * xs.len() / b;
            let hi = (k + 1) * xs.len() / b;
            stat(&xs[lo..hi])
        })
        .collect();
    let (_, se) = mean_se(&per);
    (full, se)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub critical: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Two-sample Kolmogorov–Smirnov test at level `level`.
pub fn ks_two_sample(a: &[f64], b: &[f64], level: f64) -> KsResult {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (n, m) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let scale = ((n + m) / (n * m)).sqrt();
    let critical = (-(level / 2.0).ln() / 2.0).sqrt() * scale;
    let p_value = kolmogorov_survival(d / scale);
    KsResult { statistic: d, critical, p_value, reject: d > critical }
}

/// P(K > x) for the Kolmogorov distribution.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Ordinary least squares of `ys` on `xs`; returns (slope, intercept).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let sxx: Vec<f64> = xs.iter().map(|x| (x - mx) * (x - mx)).collect();
    let slope = pairwise_sum(&sxy) / pairwise_sum(&sxx);
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normals, stream, Purpose};
    use proptest::prelude::*;

    #[test]
    fn ks_critical_value() {
        let a: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        let r = ks_two_sample(&a, &a, 1e-3);
        assert_eq!(r.statistic, 0.0);
        assert!((r.critical - 0.02760).abs() < 5e-5, "{}", r.critical);
        assert!(!r.reject);
    }

    #[test]
    fn ks_detects_shift() {
        let mut rng = stream(11, Purpose::Validation, 0);
        let mut a = vec![0.0; 5000];
        let mut b = vec![0.0; 5000];
        fill_normals(&mut rng, &mut a, 1.0);
        fill_normals(&mut rng, &mut b, 1.0);
        assert!(!ks_two_sample(&a, &b, 1e-3).reject);
        let shifted: Vec<f64> = b.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&a, &shifted, 1e-3).reject);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // standard table: P(K > 1.3581) = 0.05
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn wilson_contains_proportion() {
        let (lo, hi) = wilson(30, 100, 1.96);
        assert!(lo < 0.3 && 0.3 < hi);
        assert!((lo - 0.2189).abs() < 1e-3 && (hi - 0.3958).abs() < 1e-3);
        assert_eq!(wilson(0, 0, 3.0), (0.0, 1.0));
    }

    #[test]
    fn fit_recovers_line() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -2.0 * x + 0.5).collect();
        let (s, c) = linear_fit(&xs, &ys);
        assert!((s + 2.0).abs() < 1e-12 && (c - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn merge_matches_sequential(xs in proptest::collection::vec(-1e3f64..1e3, 2..200), cut in 0usize..200) {
            let cut = cut.min(xs.len());
            let mut all = Moments::default();
            xs.iter().for_each(|x| all.push(*x));
            let mut left = Moments::default();
            let mut right = Moments::default();
            xs[..cut].iter().for_each(|x| left.push(*x));
            xs[cut..].iter().for_each(|x| right.push(*x));
            let merged = left.merge(&right);
            prop_assert_eq!(merged.count, all.count);
            prop_assert!((merged.mean - all.mean).abs() < 1e-9 * (1.0 + all.mean.abs()));
            prop_assert!((merged.m2 - all.m2).abs() < 1e-7 * (1.0 + all.m2));
        }

        #[test]
        fn pairwise_sum_close_to_naive(xs in proptest::collection::vec(-1e6f64..1e6, 0..500)) {
            let naive: f64 = xs.iter().sum();
            let scale: f64 = xs.iter().map(|x| x.abs()).sum::<f64>() + 1.0;
            prop_assert!((pairwise_sum(&xs) - naive).abs() < 1e-12 * scale);
        }
    }
}

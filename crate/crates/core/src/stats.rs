//! Empirical distribution comparisons used by validation and tests.

use statrs::distribution::{ContinuousCDF, Normal};

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// One-sample KS statistic of `a` against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(a: &[f64], cdf: F) -> f64 {
    let s = sorted(a);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

pub fn normal_cdf(mean: f64, std: f64) -> impl Fn(f64) -> f64 {
    let n = Normal::new(mean, std).expect("positive std");
    move |x| n.cdf(x)
}

/// Empirical Wasserstein-1 distance. Equal sizes use the sorted-sample mean
/// absolute difference; unequal sizes integrate `|F_a - F_b|` exactly.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let (a, b) = (sorted(a), sorted(b));
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let mut pts: Vec<f64> = a.iter().chain(&b).copied().collect();
    pts.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    for w in pts.windows(2) {
        while i < a.len() && a[i] <= w[0] {
            i += 1;
        }
        while j < b.len() && b[j] <= w[0] {
            j += 1;
        }
        total += (i as f64 / na - j as f64 / nb).abs() * (w[1] - w[0]);
    }
    total
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample standard deviation (zero for fewer than two values).
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let s = sorted(v);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Normalized density of each bin.
    pub fn density(&self) -> Vec<f64> {
        let n: u64 = self.counts.iter().sum();
        self.counts
            .iter()
            .zip(self.edges.windows(2))
            .map(|(&c, e)| c as f64 / (n as f64 * (e[1] - e[0])))
            .collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }
}

/// Histogram with Freedman-Diaconis bin width `2 IQR n^(-1/3)`, capped at
/// `max_bins`. Degenerate samples get a single unit-width bin.
pub fn histogram_fd(v: &[f64], max_bins: usize) -> Histogram {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let iqr = quantile(v, 0.75) - quantile(v, 0.25);
    let width = 2.0 * iqr / (v.len() as f64).cbrt();
    let bins = if hi > lo && width > 0.0 {
        (((hi - lo) / width).ceil() as usize).clamp(1, max_bins.max(1))
    } else {
        1
    };
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let step = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * step).collect();
    histogram_on(edges, v)
}

/// Counts of `v` on fixed, equally spaced `edges`; values outside the range
/// land in the nearest end bin.
pub fn histogram_on(edges: Vec<f64>, v: &[f64]) -> Histogram {
    let bins = edges.len() - 1;
    let (lo, step) = (edges[0], (edges[bins] - edges[0]) / bins as f64);
    let mut counts = vec![0u64; bins];
    for &x in v {
        let k = ((x - lo) / step).max(0.0) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    Histogram { edges, counts }
}

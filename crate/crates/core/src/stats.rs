//! Small numeric helpers shared by several modules.

/// `ln Σ exp(x_i)` with the usual max shift. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator). `NaN` when `n < 2`.
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Percentile of an ascending-sorted slice under the Hazen convention:
/// 1-based position `h = n p / 100 + 1/2`, clamped to `[1, n]`, linearly
/// interpolated between neighbouring order statistics.
///
/// Panics on an empty slice.
pub fn hazen_percentile(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let n = sorted.len();
    let h = (n as f64 * pct / 100.0 + 0.5).clamp(1.0, n as f64);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo >= n {
        return sorted[n - 1];
    }
    let a = sorted[lo - 1];
    let b = sorted[lo];
    if frac == 0.0 {
        a
    } else {
        a + frac * (b - a)
    }
}

/// Sorts a copy (NaNs last) and evaluates [`hazen_percentile`].
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    hazen_percentile(&v, pct)
}

//! Small statistics toolkit: moment estimators, batch means, weighted
//! regression and the two-sample Kolmogorov-Smirnov test.

use serde::{Deserialize, Serialize};

/// Sample mean and its standard error.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `(mean |v|^m)^{1/m}` for nonnegative samples, with a delta-method standard error.
pub fn lm_norm(values: &[f64], m: f64) -> (f64, f64) {
    if m == 1.0 {
        return mean_stderr(values);
    }
    let powered: Vec<f64> = values.iter().map(|v| v.abs().powf(m)).collect();
    let (mean, se) = mean_stderr(&powered);
    let value = mean.powf(1.0 / m);
    let deriv = if mean > 0.0 { value / (m * mean) } else { 0.0 };
    (value, deriv * se)
}

/// Standard error of a time average estimated from non-overlapping batch means.
pub fn batch_means(series: &[f64], n_batches: usize) -> (f64, f64) {
    let n_batches = n_batches.max(2).min(series.len().max(2));
    let len = series.len() / n_batches;
    if len == 0 {
        return mean_stderr(series);
    }
    let means: Vec<f64> = (0..n_batches)
        .map(|b| series[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let (_, se) = mean_stderr(&means);
    let mean = series[..n_batches * len].iter().sum::<f64>() / (n_batches * len) as f64;
    (mean, se)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope, inflated by the reduced chi-square when the
    /// residuals exceed the stated point errors.
    pub slope_stderr: f64,
    pub r2: f64,
}

/// Weighted least squares `y = intercept + slope * x`.
///
/// `weights` are inverse variances; pass all ones for an ordinary fit.
pub fn weighted_fit(xs: &[f64], ys: &[f64], weights: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n || weights.len() != n {
        return None;
    }
    let sw: f64 = weights.iter().sum();
    if !(sw > 0.0) {
        return None;
    }
    let xm = xs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / sw;
    let ym = ys.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(weights).map(|(x, w)| w * (x - xm) * (x - xm)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .zip(weights)
        .map(|((x, y), w)| w * (x - xm) * (y - ym))
        .sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = xs
        .iter()
        .zip(ys)
        .zip(weights)
        .map(|((x, y), w)| {
            let r = y - intercept - slope * x;
            w * r * r
        })
        .sum();
    let syy: f64 = ys.iter().zip(weights).map(|(y, w)| w * (y - ym) * (y - ym)).sum();
    let r2 = if syy > 0.0 { 1.0 - chi2 / syy } else { 1.0 };
    let dof = n.saturating_sub(2).max(1) as f64;
    let inflate = (chi2 / dof).max(1.0);
    Some(LinearFit {
        slope,
        intercept,
        slope_stderr: (inflate / sxx).sqrt(),
        r2,
    })
}

/// Slope of `log(error)` against `log(param)`, weighted by inverse squared
/// relative errors. Points with zero stderr get the largest finite weight seen.
pub fn loglog_fit(params: &[f64], errors: &[f64], stderrs: &[f64]) -> Option<LinearFit> {
    let xs: Vec<f64> = params.iter().map(|p| p.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let rel: Vec<f64> = errors.iter().zip(stderrs).map(|(e, s)| s / e).collect();
    let finite_max = rel
        .iter()
        .filter(|r| r.is_finite() && **r > 0.0)
        .map(|r| 1.0 / (r * r))
        .fold(0.0f64, f64::max);
    let weights: Vec<f64> = rel
        .iter()
        .map(|r| {
            if r.is_finite() && *r > 0.0 {
                1.0 / (r * r)
            } else if finite_max > 0.0 {
                finite_max
            } else {
                1.0
            }
        })
        .collect();
    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return None;
    }
    weighted_fit(&xs, &ys, &weights)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value
/// (Stephens' small-sample correction).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let sq = ne.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_survival((sq + 0.12 + 0.11 / sq) * d),
    }
}

/// Empirical survival `P(|S| > x)` at each threshold.
pub fn tail_survival(samples: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let mut abs: Vec<f64> = samples.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len() as f64;
    thresholds
        .iter()
        .map(|&x| {
            let below = abs.partition_point(|v| *v <= x);
            (abs.len() - below) as f64 / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exact_line_is_recovered() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 + 2.0 * x).collect();
        let fit = weighted_fit(&xs, &ys, &[1.0; 4]).unwrap();
        assert_abs_diff_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let ps = [0.5, 0.25, 0.125, 0.0625];
        let es: Vec<f64> = ps.iter().map(|p: &f64| 3.0 * p.powf(0.25)).collect();
        let se: Vec<f64> = es.iter().map(|e| 0.01 * e).collect();
        let fit = loglog_fit(&ps, &es, &se).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // Q(1.36) ~ 0.049, Q(1.95) ~ 0.001
        assert_abs_diff_eq!(kolmogorov_survival(1.36), 0.0494, epsilon = 5e-4);
        assert_abs_diff_eq!(kolmogorov_survival(1.949), 0.0010, epsilon = 1e-4);
    }

    #[test]
    fn ks_identical_and_shifted() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let r = ks_two_sample(&a, &a);
        assert_eq!(r.statistic, 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        let r = ks_two_sample(&a, &b);
        assert_abs_diff_eq!(r.statistic, 0.5, epsilon = 2e-3);
        assert!(r.p_value < 1e-10);
    }

    #[test]
    fn batch_means_of_constant_series() {
        let (m, se) = batch_means(&[2.0; 640], 32);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn lm_norm_matches_definition() {
        let v = [1.0, 2.0, 3.0];
        let (val, _) = lm_norm(&v, 1.2);
        let expect = ((1.0f64 + 2f64.powf(1.2) + 3f64.powf(1.2)) / 3.0).powf(1.0 / 1.2);
        assert_abs_diff_eq!(val, expect, epsilon = 1e-14);
    }
}

//! Small numeric helpers shared across the crate: stabilized reductions,
//! running moments, and a least-squares slope for log-log fits.

/// Log of a sum of exponentials, shifted by the maximum term.
///
/// Returns `f64::NEG_INFINITY` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Sums a slice with pairwise (tree) reduction.
///
/// The reduction order depends only on the slice layout, so parallel callers
/// that collect partial results into a fixed-order buffer get identical sums
/// regardless of worker count.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Arithmetic mean via pairwise summation. Empty input yields 0.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

/// Online mean/variance accumulator (Welford).
#[derive(Clone, Debug, Default)]
pub struct RunningMoments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance (n-1 denominator); 0 for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn standard_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Least-squares slope of y against x. Returns `None` for fewer than two
/// points or degenerate x.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = pairwise_sum(xs) / n;
    let my = pairwise_sum(ys) / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Piecewise-linear interpolation of `ys` at `x` over sorted, deduplicated
/// `xs`. Returns `None` when `x` lies outside the sampled range.
pub fn interpolate_at(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return None;
    }
    if x < xs[0] || x > xs[xs.len() - 1] {
        return None;
    }
    match xs.binary_search_by(|v| v.partial_cmp(&x).expect("finite kl values")) {
        Ok(i) => Some(ys[i]),
        Err(i) => {
            let (x0, x1) = (xs[i - 1], xs[i]);
            let (y0, y1) = (ys[i - 1], ys[i]);
            let t = (x - x0) / (x1 - x0);
            Some(y0 + t * (y1 - y0))
        }
    }
}

/// Inverse standard-normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9). Used for multiple-comparison z thresholds.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must be in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -inverse_normal_cdf(1.0 - p)
    }
}

/// Formats a float the way every CSV in this crate does: shortest
/// representation that round-trips, `inf` for infinities.
pub fn format_float(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_naive_on_moderate_inputs() {
        let vals = [-1.5f64, 0.25, 2.0, -3.0];
        let naive: f64 = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&vals) - naive).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let vals = [1000.0, 999.0];
        let got = log_sum_exp(&vals);
        assert!(got.is_finite());
        assert!((got - (1000.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_sequential() {
        let vals: Vec<f64> = (0..101).map(|i| (i as f64) * 0.013 - 0.5).collect();
        let seq: f64 = vals.iter().sum();
        assert!((pairwise_sum(&vals) - seq).abs() < 1e-12);
    }

    #[test]
    fn slope_of_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| -2.0 * x + 0.7).collect();
        let slope = least_squares_slope(&xs, &ys).unwrap();
        assert!((slope + 2.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_hits_endpoints_and_midpoints() {
        let xs = [0.0, 1.0, 3.0];
        let ys = [1.0, 3.0, 7.0];
        assert_eq!(interpolate_at(&xs, &ys, 0.0), Some(1.0));
        assert_eq!(interpolate_at(&xs, &ys, 2.0), Some(5.0));
        assert_eq!(interpolate_at(&xs, &ys, 3.5), None);
    }

    #[test]
    fn inverse_normal_cdf_matches_known_quantiles() {
        assert!(inverse_normal_cdf(0.5).abs() < 1e-9);
        assert!((inverse_normal_cdf(0.975) - 1.959964).abs() < 1e-5);
        assert!((inverse_normal_cdf(0.0013499) + 3.0).abs() < 1e-4);
    }
}

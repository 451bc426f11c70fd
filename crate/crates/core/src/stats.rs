//! Order statistics and trend tests shared across the crate.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("series of length {got} is too short; need at least {need}")]
    TooShort { need: usize, got: usize },
    #[error("non-finite value in series")]
    NonFinite,
}

/// Median of a slice (mean of the two central order statistics for even
/// lengths). Returns 0.0 for an empty slice.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median absolute deviation from the median, without a consistency factor.
pub fn mad(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// Nearest-rank quantile: the smallest element with cumulative rank at least
/// `q * n`. `q` is clamped to (0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty slice");
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let q = q.clamp(f64::MIN_POSITIVE, 1.0);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Outcome of a monotone-trend test on a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    /// Test statistic: the standardized S for Mann-Kendall, the t statistic
    /// for the least-squares slope test.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Sign of the fitted/ranked trend: +1 rising, -1 falling, 0 none.
    pub direction: i8,
}

impl TrendTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Minimum series length accepted by the trend tests. Below this the normal
/// approximation (and the slope test's residual estimate) is unreliable.
pub const TREND_MIN_LEN: usize = 8;

/// Mann-Kendall test for a monotone trend, using the tie-corrected variance
/// and a continuity correction before the normal approximation.
pub fn mann_kendall(xs: &[f64]) -> Result<TrendTest, StatsError> {
    if xs.len() < TREND_MIN_LEN {
        return Err(StatsError::TooShort {
            need: TREND_MIN_LEN,
            got: xs.len(),
        });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = xs.len();
    let mut s: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            s += match xs[j].partial_cmp(&xs[i]).unwrap() {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => -1,
                std::cmp::Ordering::Equal => 0,
            };
        }
    }
    // Tie correction: subtract t(t-1)(2t+5) for each group of t tied values.
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        if t > 1.0 {
            tie_term += t * (t - 1.0) * (2.0 * t + 5.0);
        }
        i = j;
    }
    let nf = n as f64;
    let var = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - tie_term) / 18.0;
    if var <= 0.0 {
        // All values tied: no evidence of trend.
        return Ok(TrendTest {
            statistic: 0.0,
            p_value: 1.0,
            direction: 0,
        });
    }
    let z = if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else if s < 0 {
        (s as f64 + 1.0) / var.sqrt()
    } else {
        0.0
    };
    let p = 2.0 * (1.0 - normal_cdf(z.abs()));
    Ok(TrendTest {
        statistic: z,
        p_value: p.clamp(0.0, 1.0),
        direction: s.signum() as i8,
    })
}

/// Least-squares slope test against index: t statistic for the hypothesis
/// that the slope of `x` on `0..n` is zero, with a Student-t p-value on
/// `n - 2` degrees of freedom.
pub fn slope_test(xs: &[f64]) -> Result<TrendTest, StatsError> {
    if xs.len() < TREND_MIN_LEN {
        return Err(StatsError::TooShort {
            need: TREND_MIN_LEN,
            got: xs.len(),
        });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = xs.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let x_mean = xs.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxx += dt * dt;
        sxy += dt * (x - x_mean);
    }
    let slope = sxy / sxx;
    let mut ss_res = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let fit = x_mean + slope * (i as f64 - t_mean);
        ss_res += (x - fit) * (x - fit);
    }
    let df = n - 2.0;
    let se2 = ss_res / df / sxx;
    if se2 <= 0.0 {
        // A perfect line: significant iff the slope is nonzero.
        return Ok(TrendTest {
            statistic: if slope == 0.0 { 0.0 } else { f64::INFINITY * slope.signum() },
            p_value: if slope == 0.0 { 1.0 } else { 0.0 },
            direction: if slope == 0.0 { 0 } else { slope.signum() as i8 },
        });
    }
    let t_stat = slope / se2.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid Student-t parameters");
    let p = 2.0 * (1.0 - dist.cdf(t_stat.abs()));
    Ok(TrendTest {
        statistic: t_stat,
        p_value: p.clamp(0.0, 1.0),
        direction: if slope > 0.0 {
            1
        } else if slope < 0.0 {
            -1
        } else {
            0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn median_and_mad_basics() {
        assert_relative_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_relative_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_relative_eq!(mad(&[1.0, 1.0, 1.0]), 0.0);
        assert_relative_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 5.0]), 1.0);
    }

    #[test]
    fn nearest_rank_quantile() {
        let xs = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_relative_eq!(quantile(&xs, 0.5), 3.0);
        assert_relative_eq!(quantile(&xs, 0.95), 5.0);
        assert_relative_eq!(quantile(&xs, 1.0), 5.0);
        assert_relative_eq!(quantile(&xs, 0.2), 1.0);
        assert_relative_eq!(quantile(&xs, 0.21), 2.0);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert_relative_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-9);
        assert_relative_eq!(normal_cdf(-1.959963984540054), 0.025, epsilon = 1e-9);
    }

    #[test]
    fn mann_kendall_detects_monotone_ramp() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let t = mann_kendall(&xs).unwrap();
        assert_eq!(t.direction, 1);
        assert!(t.significant(0.05));
        let down: Vec<f64> = xs.iter().rev().copied().collect();
        let t = mann_kendall(&down).unwrap();
        assert_eq!(t.direction, -1);
        assert!(t.significant(0.05));
    }

    #[test]
    fn mann_kendall_flat_series_not_significant() {
        let xs = vec![2.0; 12];
        let t = mann_kendall(&xs).unwrap();
        assert_eq!(t.direction, 0);
        assert_relative_eq!(t.p_value, 1.0);
    }

    #[test]
    fn mann_kendall_alternating_not_significant() {
        let xs: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { 2.0 }).collect();
        let t = mann_kendall(&xs).unwrap();
        assert!(!t.significant(0.05));
    }

    #[test]
    fn mann_kendall_rejects_short_series() {
        assert!(matches!(
            mann_kendall(&[1.0, 2.0, 3.0]),
            Err(StatsError::TooShort { .. })
        ));
    }

    #[test]
    fn mann_kendall_known_small_case() {
        // n = 10 strictly increasing: S = 45, var = 10*9*25/18 = 125,
        // z = 44 / sqrt(125).
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let t = mann_kendall(&xs).unwrap();
        assert_relative_eq!(t.statistic, 44.0 / 125.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn slope_test_matches_direction() {
        let xs: Vec<f64> = (0..20).map(|i| 0.3 * i as f64 + if i % 2 == 0 { 0.05 } else { -0.05 }).collect();
        let t = slope_test(&xs).unwrap();
        assert_eq!(t.direction, 1);
        assert!(t.significant(0.05));
        let flat = vec![1.0; 10];
        let t = slope_test(&flat).unwrap();
        assert!(!t.significant(0.05));
    }
}

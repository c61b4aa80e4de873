//! Paired t-test over per-fold scores.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean_difference: f64,
    pub t_statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    /// 95% confidence interval of the mean difference.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Differences had zero variance; `p` is 1 or 0 by convention.
    pub degenerate: bool,
}

/// Two-sided paired t-test of `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("{} scores paired with {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract("paired t-test needs at least two folds".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let se = (var / nf).sqrt();

    if se == 0.0 || !se.is_finite() {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTestResult {
            n,
            mean_difference: mean,
            t_statistic: t,
            p_value: p,
            ci_low: mean,
            ci_high: mean,
            degenerate: true,
        });
    }
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::Contract(e.to_string()))?;
    let t = mean / se;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    let q = dist.inverse_cdf(0.975);
    Ok(TTestResult {
        n,
        mean_difference: mean,
        t_statistic: t,
        p_value: p,
        ci_low: mean - q * se,
        ci_high: mean + q * se,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lists() {
        let a = [0.8, 0.82, 0.79, 0.81];
        let r = paired_ttest(&a, &a).unwrap();
        assert_eq!(r.mean_difference, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(r.degenerate);
    }

    #[test]
    fn constant_shift_is_degenerate_and_significant() {
        let a = [0.83, 0.85, 0.84];
        let b: Vec<f64> = a.iter().map(|x| x - 0.25).collect();
        let r = paired_ttest(&a, &b).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(paired_ttest(&[1.0], &[1.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[1.0]).is_err());
    }
}

//! Variance estimation and confidence intervals: the influence-curve
//! variance `sigma^2 = (1/m) Var[ic_j]`, Wald intervals, and a clustered
//! nonparametric bootstrap that resamples whole clusters.

mod bootstrap;
mod normal;

pub use bootstrap::{cluster_bootstrap, BootstrapConfig, BootstrapOutcome, OnDegenerate};
pub(crate) use bootstrap::{
    resample_indices as bootstrap_resample_indices, sample_sd as bootstrap_sample_sd,
};
pub use normal::normal_quantile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a standard error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeSource {
    InfluenceCurve,
    Bootstrap,
}

/// A two-sided confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
    pub se_source: SeSource,
}

/// The influence-curve variance estimate: the sample variance of the curve
/// (denominator `m - 1`) divided by `m`.
pub fn ic_variance(influence_curve: &[f64]) -> Result<f64> {
    let m = influence_curve.len();
    if m < 2 {
        return Err(Error::Estimation(format!(
            "influence-curve variance needs at least 2 clusters, got {m}"
        )));
    }
    let mean = influence_curve.iter().sum::<f64>() / m as f64;
    let ss: f64 = influence_curve
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum();
    let sample_var = ss / (m as f64 - 1.0);
    Ok(sample_var / m as f64)
}

/// `sqrt` of [`ic_variance`].
pub fn ic_standard_error(influence_curve: &[f64]) -> Result<f64> {
    ic_variance(influence_curve).map(f64::sqrt)
}

/// The Wald interval `point ± z_{1-alpha/2} * se`.
pub fn wald_interval(point: f64, se: f64, level: f64) -> Result<IntervalEstimate> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if se.is_nan() || se < 0.0 {
        return Err(Error::Config(format!(
            "standard error must be >= 0, got {se}"
        )));
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0)?;
    Ok(IntervalEstimate {
        level,
        lo: point - z * se,
        hi: point + z * se,
        se_source: SeSource::InfluenceCurve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ic_variance_examples() {
        assert_eq!(ic_variance(&[0.3, 0.3, 0.3]).unwrap(), 0.0);
        // Curve [-1, 1]: sample variance 2, divided by m=2.
        assert_eq!(ic_variance(&[-1.0, 1.0]).unwrap(), 1.0);
        assert!(ic_variance(&[1.0]).is_err());
    }

    #[test]
    fn ic_variance_matches_two_pass_oracle() {
        let curve = [0.3, -1.2, 0.8, 2.1, -0.4, 0.0, 1.7, -2.2, 0.9, -0.6];
        // Independent two-pass computation.
        let m = curve.len() as f64;
        let mean: f64 = curve.iter().sum::<f64>() / m;
        let mut ss = 0.0;
        for v in curve {
            ss += (v - mean).powi(2);
        }
        let oracle = ss / (m - 1.0) / m;
        assert!((ic_variance(&curve).unwrap() - oracle).abs() < 1e-12);
    }

    proptest! {
        // Repeating every entry k times divides the estimate by k (exactly,
        // after adjusting for the m-1 vs km-1 sample-variance denominators).
        #[test]
        fn ic_variance_scales_inversely_with_duplication(
            curve in proptest::collection::vec(-5.0f64..5.0, 2..12),
            k in 2usize..5,
        ) {
            let m = curve.len() as f64;
            let mut dup = Vec::new();
            for v in &curve {
                dup.extend(std::iter::repeat_n(*v, k));
            }
            let base = ic_variance(&curve).unwrap();
            let scaled = ic_variance(&dup).unwrap();
            let km = m * k as f64;
            // var_dup = ss*k/(km-1)/km while base = ss/(m-1)/m.
            let expected = base * (m - 1.0) * m * (k as f64) / ((km - 1.0) * km);
            prop_assert!((scaled - expected).abs() <= 1e-12 * expected.abs().max(1e-12));
        }
    }

    #[test]
    fn wald_interval_examples() {
        let ci = wald_interval(0.0, 1.0, 0.95).unwrap();
        assert!((ci.lo + 1.959964).abs() < 1e-6);
        assert!((ci.hi - 1.959964).abs() < 1e-6);

        let ci = wald_interval(2.0, 0.5, 0.90).unwrap();
        assert!((ci.lo - (2.0 - 1.644854 * 0.5)).abs() < 1e-6);
        assert!((ci.hi - (2.0 + 1.644854 * 0.5)).abs() < 1e-6);

        let ci = wald_interval(0.7, 0.0, 0.95).unwrap();
        assert_eq!((ci.lo, ci.hi), (0.7, 0.7));

        assert!(wald_interval(0.0, 1.0, 1.0).is_err());
        assert!(wald_interval(0.0, 1.0, 0.0).is_err());
        assert!(wald_interval(0.0, -1.0, 0.5).is_err());
    }
}

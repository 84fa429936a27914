//! Model fitting primitives: ordinary least squares and Bernoulli logistic
//! regression by iteratively reweighted least squares.

use serde::{Deserialize, Serialize};

use super::linalg::{dot, least_squares, weighted_least_squares, Matrix};
use crate::error::{Error, Result};

/// Stopping and safeguard parameters for IRLS.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitControl {
    pub max_iter: usize,
    /// Convergence threshold on the sup-norm of the coefficient change.
    pub tol: f64,
    /// Maximum step halvings per iteration when the deviance increases.
    pub max_step_halvings: usize,
    /// A coefficient beyond this magnitude at convergence is treated as
    /// evidence of separation.
    pub separation_bound: f64,
}

impl Default for FitControl {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            max_step_halvings: 10,
            separation_bound: 30.0,
        }
    }
}

/// A fitted generalized linear model.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub deviance: f64,
    /// Deviance after each accepted IRLS step (starting value first).
    pub deviance_trace: Vec<f64>,
}

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(eta))`, stable for large |eta|.
fn log1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn bernoulli_deviance(x: &Matrix, y: &[f64], beta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (i, yi) in y.iter().enumerate() {
        let eta = dot(x.row(i), beta);
        ll += yi * eta - log1p_exp(eta);
    }
    -2.0 * ll
}

/// Maximizes the Bernoulli log-likelihood of `labels` (0/1) on the design
/// `features` by IRLS with step halving. The deviance is non-increasing
/// across accepted iterations.
#[allow(clippy::needless_range_loop)] // parallel per-row arrays
pub fn fit_logistic(features: &Matrix, labels: &[f64], control: &FitControl) -> Result<GlmFit> {
    let n = features.rows();
    assert_eq!(n, labels.len(), "label length mismatch");
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Config("logistic labels must be coded 0/1".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == n {
        return Err(Error::PerfectSeparation(format!(
            "all {n} labels are {}; the likelihood has no maximizer",
            if positives == 0 { 0 } else { 1 }
        )));
    }

    let p = features.cols();
    let mut beta = vec![0.0; p];
    let mut deviance = bernoulli_deviance(features, labels, &beta);
    let mut trace = vec![deviance];
    let mut z = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut last_change = f64::INFINITY;

    for iter in 1..=control.max_iter {
        for i in 0..n {
            let eta = dot(features.row(i), &beta);
            let mu = expit(eta);
            let w = (mu * (1.0 - mu)).max(1e-10);
            weights[i] = w;
            z[i] = eta + (labels[i] - mu) / w;
        }
        let mut proposal = weighted_least_squares(features, &z, &weights)?;
        let mut new_deviance = bernoulli_deviance(features, labels, &proposal);
        let mut halvings = 0;
        while (!new_deviance.is_finite() || new_deviance > deviance + 1e-10)
            && halvings < control.max_step_halvings
        {
            for (b, old) in proposal.iter_mut().zip(&beta) {
                *b = 0.5 * (*b + old);
            }
            new_deviance = bernoulli_deviance(features, labels, &proposal);
            halvings += 1;
        }
        last_change = proposal
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        beta = proposal;
        deviance = new_deviance;
        trace.push(deviance);

        if beta.iter().any(|b| b.abs() > control.separation_bound) {
            return Err(Error::PerfectSeparation(format!(
                "a coefficient exceeded {} in magnitude (iteration {iter})",
                control.separation_bound
            )));
        }
        if last_change < control.tol {
            return Ok(GlmFit {
                coefficients: beta,
                iterations: iter,
                deviance,
                deviance_trace: trace,
            });
        }
    }
    // Fitted probabilities indistinguishable from the labels mean the
    // likelihood is maximized along a divergent direction, not that the
    // optimizer is slow.
    let max_gap = (0..n)
        .map(|i| (labels[i] - expit(dot(features.row(i), &beta))).abs())
        .fold(0.0f64, f64::max);
    if max_gap < 1e-6 {
        return Err(Error::PerfectSeparation(format!(
            "fitted probabilities match the labels to within {max_gap:e} without converging"
        )));
    }
    Err(Error::NotConverged {
        iterations: control.max_iter,
        last_change,
    })
}

/// Ordinary least squares of `targets` on `features` via Householder QR.
pub fn fit_linear(features: &Matrix, targets: &[f64]) -> Result<Vec<f64>> {
    least_squares(features, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn intercept_only(n: usize) -> Matrix {
        Matrix::from_rows(vec![vec![1.0]; n])
    }

    #[test]
    fn intercept_only_recovers_logit_of_mean() {
        let y = vec![1.0, 0.0, 0.0, 0.0];
        let fit = fit_logistic(&intercept_only(4), &y, &FitControl::default()).unwrap();
        let expected = (0.25f64 / 0.75).ln(); // -1.0986...
        assert!((fit.coefficients[0] - expected).abs() < 1e-8);
    }

    #[test]
    fn all_zero_labels_is_separation() {
        let y = vec![0.0; 6];
        let err = fit_logistic(&intercept_only(6), &y, &FitControl::default()).unwrap_err();
        assert!(matches!(err, Error::PerfectSeparation(_)), "{err}");
    }

    #[test]
    fn separated_feature_is_detected() {
        // Feature sign perfectly predicts the label.
        let x = Matrix::from_rows(
            (0..8)
                .map(|i| vec![1.0, if i < 4 { -1.0 } else { 1.0 }])
                .collect(),
        );
        let y: Vec<f64> = (0..8).map(|i| f64::from(i >= 4)).collect();
        let err = fit_logistic(&x, &y, &FitControl::default()).unwrap_err();
        assert!(matches!(err, Error::PerfectSeparation(_)), "{err}");
    }

    /// Brute-force likelihood maximizer over a shrinking 2-d grid; the
    /// independent oracle for the IRLS path.
    fn grid_search_mle(x: &Matrix, y: &[f64]) -> Vec<f64> {
        let mut center = vec![0.0, 0.0];
        let mut half_width = 8.0;
        for _ in 0..24 {
            let mut best = (f64::INFINITY, center.clone());
            let steps = 8;
            for i in -steps..=steps {
                for j in -steps..=steps {
                    let cand = vec![
                        center[0] + half_width * i as f64 / steps as f64,
                        center[1] + half_width * j as f64 / steps as f64,
                    ];
                    let dev = bernoulli_deviance(x, y, &cand);
                    if dev < best.0 {
                        best = (dev, cand);
                    }
                }
            }
            center = best.1;
            half_width /= 2.0;
        }
        center
    }

    #[test]
    fn matches_grid_search_oracle() {
        let x = Matrix::from_rows(vec![
            vec![1.0, -1.2],
            vec![1.0, -0.8],
            vec![1.0, -0.3],
            vec![1.0, 0.1],
            vec![1.0, 0.4],
            vec![1.0, 0.9],
            vec![1.0, 1.3],
            vec![1.0, 1.7],
        ]);
        let y = vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let oracle = grid_search_mle(&x, &y);
        let fit = fit_logistic(&x, &y, &FitControl::default()).unwrap();
        assert!(
            (fit.coefficients[0] - oracle[0]).abs() < 1e-4
                && (fit.coefficients[1] - oracle[1]).abs() < 1e-4,
            "IRLS {:?} vs grid {:?}",
            fit.coefficients,
            oracle
        );
    }

    #[test]
    fn deviance_is_non_increasing() {
        let mut rng = crate::rng::stream(5, crate::rng::StreamLabel::Fixture, 0);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![1.0, rng.random::<f64>() * 4.0 - 2.0])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| f64::from(rng.random_bool(expit(0.3 + 0.8 * r[1]))))
            .collect();
        let x = Matrix::from_rows(rows);
        let fit = fit_logistic(&x, &y, &FitControl::default()).unwrap();
        for pair in fit.deviance_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "deviance increased: {pair:?}");
        }
    }

    #[test]
    fn linear_fit_examples() {
        // Exact interpolation of y = 2x + 1.
        let x = Matrix::from_rows(vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]]);
        let beta = fit_linear(&x, &[1.0, 3.0, 5.0]).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-12 && (beta[1] - 2.0).abs() < 1e-12);

        // Constant targets give intercept c, slope 0.
        let beta = fit_linear(&x, &[7.5, 7.5, 7.5]).unwrap();
        assert!((beta[0] - 7.5).abs() < 1e-12 && beta[1].abs() < 1e-12);
    }

    proptest! {
        // Residuals of an OLS fit are orthogonal to every design column.
        #[test]
        fn ols_residuals_orthogonal(seed in 0u64..100) {
            let mut rng = crate::rng::stream(seed, crate::rng::StreamLabel::Fixture, 1);
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|_| vec![1.0, rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0])
                .collect();
            let y: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let x = Matrix::from_rows(rows);
            let beta = fit_linear(&x, &y).unwrap();
            let residuals: Vec<f64> = (0..x.rows())
                .map(|i| y[i] - dot(x.row(i), &beta))
                .collect();
            for j in 0..x.cols() {
                let ip: f64 = (0..x.rows()).map(|i| x.row(i)[j] * residuals[i]).sum();
                prop_assert!(ip.abs() < 1e-10, "column {} inner product {}", j, ip);
            }
        }
    }
}

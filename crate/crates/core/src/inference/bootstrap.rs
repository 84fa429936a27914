//! Clustered nonparametric bootstrap: resample `m` whole clusters with
//! replacement (within-cluster data intact), refit every estimated nuisance
//! model on the replicate, recompute the estimator; the standard error is
//! the sample standard deviation of the replicate points.
//!
//! Replicate `r` draws from a stream derived from `(seed, r)` alone and the
//! aggregation reads replicates in index order, so results are
//! bit-reproducible across runs and thread counts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::ClusterDataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimandTarget, EstimatorKind};
use crate::nuisance::{fit_nuisance, NuisanceConfig};
use crate::rng::{stream, StreamLabel};

/// What to do with a replicate on which the estimator is undefined (no
/// trial clusters in the arm, no s=0 clusters, unfittable nuisance model).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnDegenerate {
    #[default]
    Skip,
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub on_degenerate: OnDegenerate,
}

impl BootstrapConfig {
    pub fn new(n_replicates: usize, seed: u64) -> Self {
        Self {
            n_replicates,
            seed,
            on_degenerate: OnDegenerate::Skip,
        }
    }
}

/// Replicate values and the standard error derived from them.
#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    /// Points from completed replicates, in replicate order.
    pub replicates: Vec<f64>,
    /// Number of degenerate replicates that were skipped.
    pub skipped: usize,
    /// Sample standard deviation of the completed replicates; `None` with
    /// fewer than two.
    pub se: Option<f64>,
}

pub(crate) fn resample_indices(rng: &mut ChaCha8Rng, m: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..m)).collect()
}

pub(crate) fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((ss / (n - 1.0)).sqrt())
}

/// Runs the clustered bootstrap for one `(estimator, target)` pair.
///
/// `nuisance_config` is refit on every replicate (known probabilities pass
/// through with the resampled clusters); it may be `None` only for the
/// trial-only estimator.
pub fn cluster_bootstrap(
    dataset: &ClusterDataset,
    kind: EstimatorKind,
    target: EstimandTarget,
    nuisance_config: Option<&NuisanceConfig>,
    config: &BootstrapConfig,
) -> Result<BootstrapOutcome> {
    if config.n_replicates == 0 {
        return Err(Error::Config("bootstrap needs at least 1 replicate".into()));
    }
    if nuisance_config.is_none() && kind != EstimatorKind::TrialOnly {
        return Err(Error::Config(format!(
            "estimator {kind} needs a nuisance configuration to bootstrap"
        )));
    }
    let m = dataset.m();
    let results: Vec<Result<f64>> = (0..config.n_replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(config.seed, StreamLabel::Bootstrap, r as u64);
            let indices = resample_indices(&mut rng, m);
            let replicate = dataset.resample(&indices);
            let fitted = match nuisance_config {
                Some(nc) => Some(fit_nuisance(&replicate, nc)?),
                None => None,
            };
            estimate(&replicate, kind, target, fitted.as_ref()).map(|e| e.point)
        })
        .collect();

    let mut replicates = Vec::with_capacity(config.n_replicates);
    let mut skipped = 0usize;
    for r in results {
        match r {
            Ok(point) => replicates.push(point),
            Err(err) => match config.on_degenerate {
                OnDegenerate::Skip => skipped += 1,
                OnDegenerate::Error => return Err(err),
            },
        }
    }
    let se = sample_sd(&replicates);
    Ok(BootstrapOutcome {
        replicates,
        skipped,
        se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Arm, ClusterRecord, KnownDesign};
    use crate::estimators::Population;
    use crate::nuisance::{OutcomeMode, ProbabilityMode};

    fn identical_trial_dataset() -> ClusterDataset {
        let records = (0..6)
            .map(|j| {
                ClusterRecord::new(
                    format!("c{j}"),
                    vec![0.0],
                    vec![0.0, 0.0],
                    1,
                    true,
                    Some(Arm(1)),
                    Some(vec![0.4, 0.8]),
                )
                .unwrap()
            })
            .collect();
        ClusterDataset::new(records, Some([Arm(0), Arm(1)].into()))
            .unwrap()
            .with_known_design(KnownDesign {
                sampling: vec![0.5; 6],
                treatment: [(Arm(0), 0.5), (Arm(1), 0.5)].into(),
            })
            .unwrap()
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let ds = identical_trial_dataset();
        let nc = NuisanceConfig::new(
            ProbabilityMode::Known,
            ProbabilityMode::Known,
            OutcomeMode::None,
        );
        let target = EstimandTarget::arm(Population::Entire, Arm(1));
        let bc = BootstrapConfig::new(1, 99);
        let one = cluster_bootstrap(&ds, EstimatorKind::Ipw, target, Some(&nc), &bc).unwrap();
        let two = cluster_bootstrap(&ds, EstimatorKind::Ipw, target, Some(&nc), &bc).unwrap();
        assert_eq!(one.replicates, two.replicates);
    }

    #[test]
    fn identical_clusters_give_zero_se() {
        let ds = identical_trial_dataset();
        let nc = NuisanceConfig::new(
            ProbabilityMode::Known,
            ProbabilityMode::Known,
            OutcomeMode::None,
        );
        let target = EstimandTarget::arm(Population::Entire, Arm(1));
        let bc = BootstrapConfig::new(40, 7);
        let out = cluster_bootstrap(&ds, EstimatorKind::Ipw, target, Some(&nc), &bc).unwrap();
        assert_eq!(out.skipped, 0);
        // Every replicate evaluates the same arithmetic; only summation
        // round-off can keep the sd from an exact zero.
        assert!(out.se.unwrap() < 1e-12, "se {:?}", out.se);
    }

    #[test]
    fn degenerate_replicates_are_counted_or_fatal() {
        // One trial cluster in arm 1 among six: some replicates miss it.
        let mut records: Vec<ClusterRecord> = (0..5)
            .map(|j| {
                ClusterRecord::new(
                    format!("s0_{j}"),
                    vec![0.0],
                    vec![0.0],
                    1,
                    false,
                    None,
                    None,
                )
                .unwrap()
            })
            .collect();
        records.push(
            ClusterRecord::new(
                "t",
                vec![0.0],
                vec![0.0],
                1,
                true,
                Some(Arm(1)),
                Some(vec![1.0]),
            )
            .unwrap(),
        );
        let ds = ClusterDataset::new(records, Some([Arm(0), Arm(1)].into()))
            .unwrap()
            .with_known_design(KnownDesign {
                sampling: vec![0.2; 6],
                treatment: [(Arm(0), 0.5), (Arm(1), 0.5)].into(),
            })
            .unwrap();
        let nc = NuisanceConfig::new(
            ProbabilityMode::Known,
            ProbabilityMode::Known,
            OutcomeMode::None,
        );
        let target = EstimandTarget::arm(Population::Entire, Arm(1));
        let bc = BootstrapConfig::new(64, 3);
        let out = cluster_bootstrap(&ds, EstimatorKind::Ipw, target, Some(&nc), &bc).unwrap();
        assert!(
            out.skipped > 0,
            "expected some replicates without the trial cluster"
        );
        assert_eq!(out.replicates.len() + out.skipped, 64);

        let fatal = BootstrapConfig {
            on_degenerate: OnDegenerate::Error,
            ..bc
        };
        assert!(cluster_bootstrap(&ds, EstimatorKind::Ipw, target, Some(&nc), &fatal).is_err());
    }
}

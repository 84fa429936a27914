//! Monte-Carlo study harness: generates cohorts from the built-in
//! data-generating process, runs a grid of estimator configurations on each,
//! and aggregates scaled bias, standard deviation, average standard errors,
//! and confidence-interval coverage against a numerically computed truth.

mod dgp;
mod study;

pub use dgp::{
    assemble_dataset, compute_sampling_probabilities, generate_outcomes, generate_population,
    generate_potential_outcomes, linear_predictor, sample_trial_and_assign, PotentialOutcomes,
    SamplingDesign, SimCluster, SimPopulation, TrialAssignment,
};
pub use study::{
    aggregate_runs, paper_grid, run_study, simulate_run, study_targets, CellRunResult, CellSummary,
    GridCell, MetricsRow, RunResult, SimulationReport, TargetRunResult,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{ArmOrContrast, Population};
use crate::rng::{stream, StreamLabel};

/// Parameters of the simulation study. Defaults reproduce the built-in
/// design at its published scale (5000 clusters, 1000 runs, 250 bootstrap
/// replicates).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    /// Number of clusters in the target-population cohort.
    pub m: usize,
    /// Poisson mean of the cluster sizes.
    pub mean_cluster_size: f64,
    /// Marginal probability of the binary cluster covariate.
    pub pr_x1: f64,
    /// Expected number of clusters selected into the trial.
    pub trial_size: f64,
    /// Desired share of `x = 1` clusters among those selected.
    pub trial_x_share: f64,
    /// Randomization probability `Pr[A = 1 | S = 1]`.
    pub treatment_prob: f64,
    /// Number of simulation runs.
    pub n_runs: usize,
    /// First run index; lets a study be split across invocations while
    /// keeping per-run streams identical.
    pub run_offset: usize,
    /// Bootstrap replicates per run, for grid cells that request them.
    pub bootstrap_replicates: usize,
    /// Fresh populations used to compute the true estimand values.
    pub n_oracle_runs: usize,
    pub seed: u64,
    /// Confidence level for coverage.
    pub ci_level: f64,
    /// Estimator configurations to evaluate on every run.
    pub grid: Vec<GridCell>,
    /// A cell whose failure rate exceeds this fails the whole study.
    pub max_failure_rate: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            m: 5000,
            mean_cluster_size: 100.0,
            pr_x1: 0.05,
            trial_size: 250.0,
            trial_x_share: 0.5,
            treatment_prob: 0.5,
            n_runs: 1000,
            run_offset: 0,
            bootstrap_replicates: 250,
            n_oracle_runs: 200,
            seed: 0,
            ci_level: 0.95,
            grid: paper_grid(),
            max_failure_rate: 0.01,
        }
    }
}

impl SimulationConfig {
    pub fn paper_defaults() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if 0.0 < v && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        if self.m < 2 {
            return Err(Error::Config(format!(
                "m must be at least 2, got {}",
                self.m
            )));
        }
        if self.mean_cluster_size.is_nan() || self.mean_cluster_size <= 0.0 {
            return Err(Error::Config("mean_cluster_size must be positive".into()));
        }
        prob("pr_x1", self.pr_x1)?;
        prob("trial_x_share", self.trial_x_share)?;
        prob("treatment_prob", self.treatment_prob)?;
        prob("ci_level", self.ci_level)?;
        if !(self.trial_size > 0.0 && self.trial_size < self.m as f64) {
            return Err(Error::Config(format!(
                "trial_size must lie in (0, m), got {}",
                self.trial_size
            )));
        }
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if self.n_oracle_runs == 0 {
            return Err(Error::Config("n_oracle_runs must be at least 1".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("the estimator grid is empty".into()));
        }
        if self.grid.iter().any(|c| c.bootstrap) && self.bootstrap_replicates == 0 {
            return Err(Error::Config(
                "a grid cell requests the bootstrap but bootstrap_replicates is 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::Config("max_failure_rate must lie in [0, 1]".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for cell in &self.grid {
            let label = cell.display_label();
            if label.contains(',') {
                return Err(Error::Config(format!(
                    "grid label {label:?} must not contain commas (it names a CSV field)"
                )));
            }
            if !labels.insert(label) {
                return Err(Error::Config(format!(
                    "duplicate grid label {:?}; set explicit labels to disambiguate",
                    cell.display_label()
                )));
            }
        }
        Ok(())
    }
}

/// One true estimand value with its Monte-Carlo uncertainty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruthValue {
    pub value: f64,
    pub mc_se: f64,
    pub n_runs: usize,
}

/// True values of all six estimands under a configuration's design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthTable {
    pub psi1: TruthValue,
    pub psi0: TruthValue,
    pub psi_ate: TruthValue,
    pub phi1: TruthValue,
    pub phi0: TruthValue,
    pub phi_ate: TruthValue,
}

impl TruthTable {
    pub fn lookup(&self, population: Population, target: ArmOrContrast) -> Option<&TruthValue> {
        use crate::data_model::Arm;
        match (population, target) {
            (Population::Entire, ArmOrContrast::Arm(Arm(1))) => Some(&self.psi1),
            (Population::Entire, ArmOrContrast::Arm(Arm(0))) => Some(&self.psi0),
            (Population::Entire, ArmOrContrast::Contrast(Arm(1), Arm(0))) => Some(&self.psi_ate),
            (Population::NonRandomized, ArmOrContrast::Arm(Arm(1))) => Some(&self.phi1),
            (Population::NonRandomized, ArmOrContrast::Arm(Arm(0))) => Some(&self.phi0),
            (Population::NonRandomized, ArmOrContrast::Contrast(Arm(1), Arm(0))) => {
                Some(&self.phi_ate)
            }
            _ => None,
        }
    }
}

fn mean_and_se(values: &[f64]) -> TruthValue {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mc_se = if n >= 2 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n as f64 - 1.0) / n as f64).sqrt()
    } else {
        f64::NAN
    };
    TruthValue {
        value: mean,
        mc_se,
        n_runs: n,
    }
}

/// Estimates the true estimand values by Monte Carlo: fresh cohorts with
/// both potential outcomes generated for every individual, averaged over all
/// clusters for the entire-population estimands and over the non-selected
/// clusters for the non-randomized-subset estimands.
pub fn true_estimand_oracle(config: &SimulationConfig, n_oracle_runs: usize) -> Result<TruthTable> {
    if n_oracle_runs == 0 {
        return Err(Error::Config("n_oracle_runs must be at least 1".into()));
    }
    let per_run: Vec<Result<[f64; 6]>> = (0..n_oracle_runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(config.seed, StreamLabel::Oracle, r as u64);
            let population = generate_population(config, &mut rng);
            let design = compute_sampling_probabilities(
                &population,
                config.trial_size,
                config.trial_x_share,
            )?;
            let assignment =
                sample_trial_and_assign(&population, &design, config.treatment_prob, &mut rng);
            let potentials = generate_potential_outcomes(&population, &mut rng);

            let m = population.m() as f64;
            let mut psi1 = 0.0;
            let mut psi0 = 0.0;
            let mut phi1 = 0.0;
            let mut phi0 = 0.0;
            let mut n0 = 0usize;
            for (j, po) in potentials.iter().enumerate() {
                psi1 += po.mean1;
                psi0 += po.mean0;
                if !assignment.s[j] {
                    phi1 += po.mean1;
                    phi0 += po.mean0;
                    n0 += 1;
                }
            }
            psi1 /= m;
            psi0 /= m;
            let (phi1, phi0) = if n0 > 0 {
                (phi1 / n0 as f64, phi0 / n0 as f64)
            } else {
                (f64::NAN, f64::NAN)
            };
            Ok([psi1, psi0, psi1 - psi0, phi1, phi0, phi1 - phi0])
        })
        .collect();

    let mut columns: [Vec<f64>; 6] = Default::default();
    for run in per_run {
        let vals = run?;
        for (k, v) in vals.into_iter().enumerate() {
            if v.is_finite() {
                columns[k].push(v);
            }
        }
    }
    if columns[3].is_empty() {
        return Err(Error::Simulation(
            "no oracle run produced a non-randomized subset; cannot compute phi truths".into(),
        ));
    }
    Ok(TruthTable {
        psi1: mean_and_se(&columns[0]),
        psi0: mean_and_se(&columns[1]),
        psi_ate: mean_and_se(&columns[2]),
        phi1: mean_and_se(&columns[3]),
        phi0: mean_and_se(&columns[4]),
        phi_ate: mean_and_se(&columns[5]),
    })
}

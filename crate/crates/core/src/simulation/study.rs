//! Study execution: per-run estimation over a grid of estimator
//! configurations, nested clustered bootstrap, and aggregation into the
//! scaled bias / SD / average-SE / coverage report.
//!
//! Every run draws from streams derived from `(seed, run_index)` and the
//! aggregation reads runs in index order, so a study is reproducible
//! bit-for-bit for a fixed config regardless of thread count, and runs can
//! be split across invocations via `run_offset` and merged.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{
    assemble_dataset, compute_sampling_probabilities, generate_outcomes, generate_population,
    sample_trial_and_assign,
};
use super::{SimulationConfig, TruthTable};
use crate::data_model::{Arm, ClusterDataset};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimandTarget, EstimatorKind, Population};
use crate::inference::normal_quantile;
use crate::nuisance::{
    fit_outcome_model, fit_sampling_model, fit_treatment_model, FeatureSpec, FittedNuisance,
    NuisanceConfig, OutcomeMode, ProbabilityMode,
};
use crate::rng::{derive_seed, stream, StreamLabel};

/// One estimator configuration evaluated on every simulated run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub estimator: EstimatorKind,
    pub sampling: ProbabilityMode,
    pub treatment: ProbabilityMode,
    pub outcome: OutcomeMode,
    #[serde(default)]
    pub feature_spec: FeatureSpec,
    #[serde(default)]
    pub bootstrap: bool,
    /// Report label; derived from the estimator and outcome mode when unset.
    #[serde(default)]
    pub label: Option<String>,
}

impl GridCell {
    /// A cell with the paper's pairing of sampling and treatment modes.
    pub fn new(estimator: EstimatorKind, mode: ProbabilityMode, outcome: OutcomeMode) -> Self {
        Self {
            estimator,
            sampling: mode,
            treatment: mode,
            outcome,
            feature_spec: FeatureSpec::default(),
            bootstrap: false,
            label: None,
        }
    }

    pub fn with_bootstrap(mut self) -> Self {
        self.bootstrap = true;
        self
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn display_label(&self) -> String {
        if let Some(label) = &self.label {
            return label.clone();
        }
        let base = match (self.estimator, self.outcome) {
            (EstimatorKind::Aipw, OutcomeMode::Cluster) => "aipw1",
            (EstimatorKind::Aipw, OutcomeMode::Individual) => "aipw2",
            (EstimatorKind::Aiow, OutcomeMode::Cluster) => "aiow1",
            (EstimatorKind::Aiow, OutcomeMode::Individual) => "aiow2",
            _ => self.estimator.name(),
        };
        match self.estimator {
            EstimatorKind::TrialOnly => base.to_string(),
            _ => format!("{base}_{}", mode_suffix(self.sampling)),
        }
    }

    fn nuisance_config(&self) -> Option<NuisanceConfig> {
        if self.estimator == EstimatorKind::TrialOnly {
            return None;
        }
        let mut config = NuisanceConfig::new(self.sampling, self.treatment, self.outcome);
        config.feature_spec = self.feature_spec.clone();
        Some(config)
    }
}

fn mode_suffix(mode: ProbabilityMode) -> &'static str {
    match mode {
        ProbabilityMode::Known => "true",
        ProbabilityMode::Simple => "simple",
        ProbabilityMode::Complex => "complex",
    }
}

/// The published estimator grid: the trial-only benchmark, plus the
/// weighting estimators under known, simple, and complex probability models,
/// with cluster- and individual-level outcome models for the augmented ones
/// (bootstrap on), and the indicator-weighted comparator under known
/// probabilities.
pub fn paper_grid() -> Vec<GridCell> {
    let mut grid = vec![GridCell::new(
        EstimatorKind::TrialOnly,
        ProbabilityMode::Known,
        OutcomeMode::None,
    )];
    for mode in [
        ProbabilityMode::Known,
        ProbabilityMode::Simple,
        ProbabilityMode::Complex,
    ] {
        grid.push(GridCell::new(EstimatorKind::Ipw, mode, OutcomeMode::None));
        grid.push(GridCell::new(EstimatorKind::Aipw, mode, OutcomeMode::Cluster).with_bootstrap());
        grid.push(
            GridCell::new(EstimatorKind::Aipw, mode, OutcomeMode::Individual).with_bootstrap(),
        );
        grid.push(GridCell::new(EstimatorKind::Iow, mode, OutcomeMode::None));
        grid.push(GridCell::new(EstimatorKind::Aiow, mode, OutcomeMode::Cluster).with_bootstrap());
        grid.push(
            GridCell::new(EstimatorKind::Aiow, mode, OutcomeMode::Individual).with_bootstrap(),
        );
    }
    grid.push(GridCell::new(
        EstimatorKind::AiowIndicator,
        ProbabilityMode::Known,
        OutcomeMode::Cluster,
    ));
    grid
}

/// Point and standard errors for one target in one run.
#[derive(Debug, Clone, Serialize)]
pub struct TargetRunResult {
    pub point: f64,
    pub se_ic: Option<f64>,
    pub se_boot: Option<f64>,
}

/// One grid cell's outcome on one run.
#[derive(Debug, Clone, Serialize)]
pub struct CellRunResult {
    /// Set when the cell could not be evaluated on this run.
    pub error: Option<String>,
    /// Indexed like [`study_targets`]: arm 1, arm 0, contrast. Empty when
    /// `error` is set.
    pub targets: Vec<TargetRunResult>,
    pub boot_skipped: usize,
}

/// All cell outcomes for one simulated run.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub run_index: usize,
    pub cells: Vec<CellRunResult>,
}

/// The targets evaluated for every cell: both arm means and their contrast.
pub fn study_targets(population: Population) -> [EstimandTarget; 3] {
    [
        EstimandTarget::arm(population, Arm(1)),
        EstimandTarget::arm(population, Arm(0)),
        EstimandTarget::contrast(population, Arm(1), Arm(0)),
    ]
}

/// Assembles per-cell nuisance values over one dataset, sharing fitted
/// models between cells that agree on a mode or feature specification.
struct NuisanceAssembler<'a> {
    dataset: &'a ClusterDataset,
    sampling: BTreeMap<String, std::result::Result<Vec<f64>, String>>,
    treatment: BTreeMap<String, std::result::Result<BTreeMap<Arm, Vec<f64>>, String>>,
    outcome: BTreeMap<String, std::result::Result<BTreeMap<Arm, Vec<f64>>, String>>,
}

fn cache_key(mode: ProbabilityMode, spec: &FeatureSpec) -> String {
    match mode {
        ProbabilityMode::Known => "known".into(),
        ProbabilityMode::Simple => format!("simple:{:?}", spec.x_columns),
        ProbabilityMode::Complex => format!("complex:{:?}:{:?}", spec.x_columns, spec.w_columns),
    }
}

impl<'a> NuisanceAssembler<'a> {
    fn new(dataset: &'a ClusterDataset) -> Self {
        Self {
            dataset,
            sampling: BTreeMap::new(),
            treatment: BTreeMap::new(),
            outcome: BTreeMap::new(),
        }
    }

    fn nuisance_for(&mut self, cell: &GridCell) -> std::result::Result<FittedNuisance, String> {
        let config = cell
            .nuisance_config()
            .expect("trial_only cells never reach the assembler");
        let ds = self.dataset;

        let p = self
            .sampling
            .entry(cache_key(cell.sampling, &cell.feature_spec))
            .or_insert_with(|| {
                fit_sampling_model(ds, &config)
                    .and_then(|model| model.probabilities(ds))
                    .map_err(|e| e.to_string())
            })
            .clone()?;

        let e = self
            .treatment
            .entry(cache_key(cell.treatment, &cell.feature_spec))
            .or_insert_with(|| {
                fit_treatment_model(ds, &config)
                    .and_then(|model| {
                        let mut by_arm = BTreeMap::new();
                        for &arm in ds.treatment_levels() {
                            by_arm.insert(arm, model.probabilities(ds, arm)?);
                        }
                        Ok(by_arm)
                    })
                    .map_err(|e| e.to_string())
            })
            .clone()?;

        let g = match cell.outcome {
            OutcomeMode::None => None,
            mode => Some(
                self.outcome
                    .entry(format!(
                        "{mode:?}:{:?}:{:?}",
                        cell.feature_spec.x_columns, cell.feature_spec.w_columns
                    ))
                    .or_insert_with(|| {
                        let mut by_arm = BTreeMap::new();
                        for &arm in ds.treatment_levels() {
                            match fit_outcome_model(ds, arm, &config) {
                                Ok(model) => {
                                    by_arm.insert(arm, model.predictions(ds));
                                }
                                Err(e) => return Err(e.to_string()),
                            }
                        }
                        Ok(by_arm)
                    })
                    .clone()?,
            ),
        };

        FittedNuisance::from_values(ds, p, e, g).map_err(|e| e.to_string())
    }
}

fn estimate_cell_targets(
    dataset: &ClusterDataset,
    cell: &GridCell,
    nuisance: Option<&FittedNuisance>,
) -> std::result::Result<Vec<crate::estimators::EstimateResult>, String> {
    study_targets(cell.estimator.population())
        .into_iter()
        .map(|target| {
            estimate(dataset, cell.estimator, target, nuisance).map_err(|e| e.to_string())
        })
        .collect()
}

/// Executes one simulated run: fresh cohort, selection, assignment,
/// outcomes, then every grid cell with its influence-curve standard errors
/// and (where requested) the nested clustered bootstrap.
pub fn simulate_run(config: &SimulationConfig, run_index: usize) -> RunResult {
    let idx = run_index as u64;
    let mut rng_pop = stream(config.seed, StreamLabel::Population, idx);
    let population = generate_population(config, &mut rng_pop);

    let fail_all = |message: String| RunResult {
        run_index,
        cells: config
            .grid
            .iter()
            .map(|_| CellRunResult {
                error: Some(message.clone()),
                targets: Vec::new(),
                boot_skipped: 0,
            })
            .collect(),
    };

    let design = match compute_sampling_probabilities(
        &population,
        config.trial_size,
        config.trial_x_share,
    ) {
        Ok(d) => d,
        Err(e) => return fail_all(e.to_string()),
    };
    let mut rng_trial = stream(config.seed, StreamLabel::TrialSelection, idx);
    let assignment =
        sample_trial_and_assign(&population, &design, config.treatment_prob, &mut rng_trial);
    let mut rng_out = stream(config.seed, StreamLabel::Outcomes, idx);
    let outcomes = generate_outcomes(&population, &assignment, &mut rng_out);
    let dataset = match assemble_dataset(
        &population,
        &assignment,
        outcomes,
        &design,
        config.treatment_prob,
    ) {
        Ok(d) => d,
        Err(e) => return fail_all(e.to_string()),
    };
    drop(population);

    // Point estimates and influence-curve standard errors.
    let mut assembler = NuisanceAssembler::new(&dataset);
    let mut cells: Vec<CellRunResult> = Vec::with_capacity(config.grid.len());
    for cell in &config.grid {
        let nuisance = if cell.estimator == EstimatorKind::TrialOnly {
            Ok(None)
        } else {
            assembler.nuisance_for(cell).map(Some)
        };
        let outcome = nuisance.and_then(|n| estimate_cell_targets(&dataset, cell, n.as_ref()));
        match outcome {
            Ok(results) => cells.push(CellRunResult {
                error: None,
                targets: results
                    .iter()
                    .map(|r| TargetRunResult {
                        point: r.point,
                        se_ic: r.se_ic,
                        se_boot: None,
                    })
                    .collect(),
                boot_skipped: 0,
            }),
            Err(message) => cells.push(CellRunResult {
                error: Some(message),
                targets: Vec::new(),
                boot_skipped: 0,
            }),
        }
    }

    // Clustered bootstrap, shared resamples across cells: one index draw per
    // replicate, every bootstrap cell refit on the same replicate.
    let boot_cells: Vec<usize> = (0..config.grid.len())
        .filter(|&c| config.grid[c].bootstrap && cells[c].error.is_none())
        .collect();
    if !boot_cells.is_empty() && config.bootstrap_replicates > 0 {
        let m = dataset.m();
        let run_boot_seed = derive_seed(config.seed, StreamLabel::Bootstrap, idx);
        let mut replicate_points: Vec<[Vec<f64>; 3]> =
            boot_cells.iter().map(|_| Default::default()).collect();
        let mut skipped: Vec<usize> = vec![0; boot_cells.len()];

        for rep in 0..config.bootstrap_replicates {
            let mut rng = stream(run_boot_seed, StreamLabel::Bootstrap, rep as u64);
            let indices = crate::inference::bootstrap_resample_indices(&mut rng, m);
            let replicate = dataset.resample(&indices);
            let mut rep_assembler = NuisanceAssembler::new(&replicate);
            for (slot, &c) in boot_cells.iter().enumerate() {
                let cell = &config.grid[c];
                let outcome = rep_assembler
                    .nuisance_for(cell)
                    .and_then(|nuisance| estimate_cell_targets(&replicate, cell, Some(&nuisance)));
                match outcome {
                    Ok(results) => {
                        for (acc, r) in replicate_points[slot].iter_mut().zip(&results) {
                            acc.push(r.point);
                        }
                    }
                    Err(_) => skipped[slot] += 1,
                }
            }
        }

        for (slot, &c) in boot_cells.iter().enumerate() {
            cells[c].boot_skipped = skipped[slot];
            for (target, points) in cells[c].targets.iter_mut().zip(&replicate_points[slot]) {
                target.se_boot = crate::inference::bootstrap_sample_sd(points);
            }
        }
    }

    RunResult { run_index, cells }
}

/// Aggregated metrics for one cell and target, scaled by `sqrt(m)`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub population: Population,
    pub estimand: String,
    pub truth: f64,
    pub truth_mc_se: f64,
    pub runs_used: usize,
    pub scaled_bias: f64,
    pub scaled_sd: Option<f64>,
    pub scaled_ase_ic: Option<f64>,
    pub scaled_ase_bootstrap: Option<f64>,
    pub coverage_ic: Option<f64>,
    pub coverage_bootstrap: Option<f64>,
}

/// Aggregated results for one grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub estimator: EstimatorKind,
    pub sampling: ProbabilityMode,
    pub treatment: ProbabilityMode,
    pub outcome: OutcomeMode,
    pub runs_failed: usize,
    pub boot_skipped_total: usize,
    pub rows: Vec<MetricsRow>,
}

/// The study output: truths, per-cell metric rows, and run bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub version: String,
    pub config: SimulationConfig,
    pub truth: TruthTable,
    pub cells: Vec<CellSummary>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates per-run results into the scaled report. Runs may come from
/// several [`simulate_run`] batches; order and grouping do not matter beyond
/// the metric definitions themselves (means, sample SDs, coverage rates).
pub fn aggregate_runs(
    config: &SimulationConfig,
    truth: &TruthTable,
    runs: &[RunResult],
) -> Result<SimulationReport> {
    let scale = (config.m as f64).sqrt();
    let z = normal_quantile(1.0 - (1.0 - config.ci_level) / 2.0)?;
    let mut cells = Vec::with_capacity(config.grid.len());
    for (c, cell) in config.grid.iter().enumerate() {
        let population = cell.estimator.population();
        let failed: usize = runs.iter().filter(|r| r.cells[c].error.is_some()).count();
        let failure_rate = failed as f64 / runs.len().max(1) as f64;
        if failure_rate > config.max_failure_rate {
            let example = runs
                .iter()
                .find_map(|r| r.cells[c].error.clone())
                .unwrap_or_default();
            return Err(Error::Simulation(format!(
                "cell {} failed on {failed} of {} runs (limit {:.1}%): {example}",
                cell.display_label(),
                runs.len(),
                100.0 * config.max_failure_rate
            )));
        }
        let boot_skipped_total: usize = runs.iter().map(|r| r.cells[c].boot_skipped).sum();

        let mut rows = Vec::with_capacity(3);
        for (t, target) in study_targets(population).into_iter().enumerate() {
            let truth_value = truth
                .lookup(population, target.arm_or_contrast)
                .ok_or_else(|| Error::Simulation(format!("no oracle truth for target {target}")))?;
            let ok_runs: Vec<&TargetRunResult> = runs
                .iter()
                .filter(|r| r.cells[c].error.is_none())
                .map(|r| &r.cells[c].targets[t])
                .collect();
            let n_used = ok_runs.len();
            let points: Vec<f64> = ok_runs.iter().map(|r| r.point).collect();
            let mean_point = mean_of(points.iter().copied()).unwrap_or(f64::NAN);
            let sd = crate::inference::bootstrap_sample_sd(&points);
            let coverage = |se_of: &dyn Fn(&TargetRunResult) -> Option<f64>| -> Option<f64> {
                let mut covered = 0usize;
                let mut with_se = 0usize;
                for r in &ok_runs {
                    if let Some(se) = se_of(r) {
                        with_se += 1;
                        if (r.point - truth_value.value).abs() <= z * se {
                            covered += 1;
                        }
                    }
                }
                (with_se > 0).then(|| covered as f64 / with_se as f64)
            };
            rows.push(MetricsRow {
                population,
                estimand: target.arm_or_contrast.to_string(),
                truth: truth_value.value,
                truth_mc_se: truth_value.mc_se,
                runs_used: n_used,
                scaled_bias: (mean_point - truth_value.value) * scale,
                scaled_sd: sd.map(|v| v * scale),
                scaled_ase_ic: mean_of(ok_runs.iter().filter_map(|r| r.se_ic)).map(|v| v * scale),
                scaled_ase_bootstrap: mean_of(ok_runs.iter().filter_map(|r| r.se_boot))
                    .map(|v| v * scale),
                coverage_ic: coverage(&|r| r.se_ic),
                coverage_bootstrap: coverage(&|r| r.se_boot),
            });
        }
        cells.push(CellSummary {
            label: cell.display_label(),
            estimator: cell.estimator,
            sampling: cell.sampling,
            treatment: cell.treatment,
            outcome: cell.outcome,
            runs_failed: failed,
            boot_skipped_total,
            rows,
        });
    }
    Ok(SimulationReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        truth: truth.clone(),
        cells,
    })
}

/// Runs the full study: oracle truths, `n_runs` parallel simulation runs,
/// aggregation. Deterministic for a fixed `(config, seed)` across thread
/// counts.
pub fn run_study(config: &SimulationConfig) -> Result<SimulationReport> {
    config.validate()?;
    let truth = super::true_estimand_oracle(config, config.n_oracle_runs)?;
    let runs: Vec<RunResult> = (config.run_offset..config.run_offset + config.n_runs)
        .into_par_iter()
        .map(|r| simulate_run(config, r))
        .collect();
    aggregate_runs(config, &truth, &runs)
}

impl SimulationReport {
    /// One CSV row per cell and target, metric columns matching the report.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "population,estimand,estimator,label,sampling_mode,treatment_mode,outcome_mode,\
             trial_size,runs_used,runs_failed,truth,truth_mc_se,scaled_bias,scaled_sd,\
             scaled_ase_ic,scaled_ase_bootstrap,coverage_ic,coverage_bootstrap,boot_skipped\n",
        );
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for cell in &self.cells {
            for row in &cell.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    row.population,
                    row.estimand,
                    cell.estimator.name(),
                    cell.label,
                    mode_suffix(cell.sampling),
                    mode_suffix(cell.treatment),
                    outcome_suffix(cell.outcome),
                    self.config.trial_size,
                    row.runs_used,
                    cell.runs_failed,
                    row.truth,
                    row.truth_mc_se,
                    row.scaled_bias,
                    fmt_opt(row.scaled_sd),
                    fmt_opt(row.scaled_ase_ic),
                    fmt_opt(row.scaled_ase_bootstrap),
                    fmt_opt(row.coverage_ic),
                    fmt_opt(row.coverage_bootstrap),
                    cell.boot_skipped_total,
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// A terminal-friendly summary table.
    pub fn to_summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}\n",
            "estimator",
            "estimand",
            "population",
            "bias",
            "sd",
            "ase_ic",
            "ase_bs",
            "cov_ic",
            "cov_bs"
        ));
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        for cell in &self.cells {
            for row in &cell.rows {
                out.push_str(&format!(
                    "{:<22} {:>12} {:>12} {:>10.3} {:>10} {:>10} {:>10} {:>8} {:>8}\n",
                    cell.label,
                    row.estimand,
                    row.population.to_string(),
                    row.scaled_bias,
                    fmt(row.scaled_sd),
                    fmt(row.scaled_ase_ic),
                    fmt(row.scaled_ase_bootstrap),
                    fmt(row.coverage_ic),
                    fmt(row.coverage_bootstrap),
                ));
            }
        }
        out.push_str("scaled by sqrt(m); cov = CI coverage of the oracle truth\n");
        out
    }
}

fn outcome_suffix(mode: OutcomeMode) -> &'static str {
    match mode {
        OutcomeMode::None => "none",
        OutcomeMode::Cluster => "cluster",
        OutcomeMode::Individual => "individual",
    }
}

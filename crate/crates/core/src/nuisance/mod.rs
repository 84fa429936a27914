//! The three nuisance functions behind the weighting estimators: the
//! trial-sampling probability `p(x, w)`, the treatment probability
//! `e_a(x, w)`, and the outcome regression `g_a(x, w)`.
//!
//! Each probability comes in three flavors: passed through from a
//! known-by-design attachment, estimated by a cluster-level logistic model on
//! the cluster covariates alone ("simple"), or estimated on the cluster
//! covariates plus per-cluster means of the individual covariates
//! ("complex"). The outcome regression is fit separately per treatment arm,
//! either at the cluster level (linear model for the cluster mean outcome)
//! or at the individual level (logistic for binary outcomes, linear
//! otherwise, averaged within cluster afterwards).

mod glm;
mod linalg;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use glm::{expit, fit_logistic, FitControl, GlmFit};
pub use linalg::Matrix;

use crate::data_model::{Arm, ClusterDataset, ClusterRecord};
use crate::error::{Error, Result};
use linalg::dot;

/// Estimated and known probabilities are kept inside
/// `[PROBABILITY_FLOOR, 1 - PROBABILITY_FLOOR]` when used as weights; each
/// excursion is counted in the diagnostics.
pub const PROBABILITY_FLOOR: f64 = 1e-6;

/// Ordinary least squares of `targets` on `features`.
pub fn fit_linear(features: &Matrix, targets: &[f64]) -> Result<Vec<f64>> {
    glm::fit_linear(features, targets)
}

/// How a probability model obtains its values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbabilityMode {
    /// Pass through the known-by-design probabilities attached to the dataset.
    Known,
    /// Cluster-level logistic model on the cluster covariates only.
    Simple,
    /// Cluster-level logistic model on the cluster covariates and the
    /// per-cluster means of the individual covariates.
    Complex,
}

/// How the outcome regression is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeMode {
    /// No outcome model; legal only for non-augmented estimators.
    None,
    /// Linear model for the cluster mean outcome on cluster covariates and
    /// means of individual covariates.
    Cluster,
    /// Individual-level regression, predictions averaged within cluster.
    Individual,
}

/// Restricts which covariate columns enter the fitted models. `None` means
/// all columns. Applies to the cluster covariates (`x`) and to the
/// individual covariates (`w`: their per-cluster means at the cluster level,
/// their raw values at the individual level).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    #[serde(default)]
    pub x_columns: Option<Vec<usize>>,
    #[serde(default)]
    pub w_columns: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub sampling: ProbabilityMode,
    pub treatment: ProbabilityMode,
    pub outcome: OutcomeMode,
    #[serde(default)]
    pub feature_spec: FeatureSpec,
    #[serde(default)]
    pub fit_control: FitControl,
    /// When set, a clipped probability attached to an active indicator is an
    /// error instead of a counted warning.
    #[serde(default)]
    pub strict_positivity: bool,
}

impl NuisanceConfig {
    pub fn new(
        sampling: ProbabilityMode,
        treatment: ProbabilityMode,
        outcome: OutcomeMode,
    ) -> Self {
        Self {
            sampling,
            treatment,
            outcome,
            feature_spec: FeatureSpec::default(),
            fit_control: FitControl::default(),
            strict_positivity: false,
        }
    }
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self::new(
            ProbabilityMode::Simple,
            ProbabilityMode::Simple,
            OutcomeMode::Cluster,
        )
    }
}

/// Convergence summary for one fitted model.
#[derive(Debug, Clone, Serialize)]
pub struct ModelDiagnostics {
    pub label: String,
    pub iterations: usize,
    pub deviance: f64,
}

/// Convergence info for every fitted model plus the positivity-guard
/// counter.
#[derive(Debug, Clone, Default, Serialize)]
pub struct NuisanceDiagnostics {
    pub models: Vec<ModelDiagnostics>,
    pub probability_clips: u64,
}

// ---------------------------------------------------------------------------
// Feature resolution and design-matrix assembly.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
struct ResolvedFeatures {
    x_cols: Vec<usize>,
    w_cols: Vec<usize>,
}

fn resolve_features(
    spec: &FeatureSpec,
    x_dim: usize,
    w_dim: usize,
    include_w: bool,
) -> Result<ResolvedFeatures> {
    let x_cols = match &spec.x_columns {
        Some(cols) => {
            if let Some(&bad) = cols.iter().find(|&&c| c >= x_dim) {
                return Err(Error::Config(format!(
                    "feature_spec selects x column {bad} but the dataset has {x_dim}"
                )));
            }
            cols.clone()
        }
        None => (0..x_dim).collect(),
    };
    let w_cols = if include_w {
        match &spec.w_columns {
            Some(cols) => {
                if let Some(&bad) = cols.iter().find(|&&c| c >= w_dim) {
                    return Err(Error::Config(format!(
                        "feature_spec selects w column {bad} but the dataset has {w_dim}"
                    )));
                }
                cols.clone()
            }
            None => (0..w_dim).collect(),
        }
    } else {
        Vec::new()
    };
    Ok(ResolvedFeatures { x_cols, w_cols })
}

impl ResolvedFeatures {
    fn width(&self) -> usize {
        1 + self.x_cols.len() + self.w_cols.len()
    }

    /// Intercept, selected cluster covariates, selected w means.
    fn cluster_row(&self, r: &ClusterRecord, out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        out.extend(self.x_cols.iter().map(|&k| r.x[k]));
        out.extend(self.w_cols.iter().map(|&k| r.w_means()[k]));
    }

    /// Intercept, selected cluster covariates, individual `i`'s selected w.
    fn individual_row(&self, r: &ClusterRecord, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        out.extend(self.x_cols.iter().map(|&k| r.x[k]));
        let row = r.w_row(i);
        out.extend(self.w_cols.iter().map(|&k| row[k]));
    }
}

fn cluster_design<'a>(
    clusters: impl Iterator<Item = &'a ClusterRecord>,
    features: &ResolvedFeatures,
) -> Matrix {
    let mut m = Matrix::with_capacity(0, features.width());
    let mut row = Vec::with_capacity(features.width());
    for r in clusters {
        features.cluster_row(r, &mut row);
        m.push_row(&row);
    }
    m
}

// ---------------------------------------------------------------------------
// Sampling model.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum ProbModelKind {
    Known,
    Fitted {
        features: ResolvedFeatures,
        coefficients: Vec<f64>,
    },
}

/// A fitted (or pass-through) model for `Pr[S = 1 | x, w]`.
#[derive(Debug, Clone)]
pub struct SamplingModel {
    kind: ProbModelKind,
    diagnostics: Option<ModelDiagnostics>,
}

impl SamplingModel {
    /// Raw (unclipped) sampling probabilities for every cluster.
    pub fn probabilities(&self, dataset: &ClusterDataset) -> Result<Vec<f64>> {
        match &self.kind {
            ProbModelKind::Known => {
                let design = dataset.known_design().ok_or_else(|| {
                    Error::Config(
                        "sampling mode is known but the dataset carries no design probabilities"
                            .into(),
                    )
                })?;
                Ok(design.sampling.clone())
            }
            ProbModelKind::Fitted {
                features,
                coefficients,
            } => {
                let mut row = Vec::with_capacity(features.width());
                Ok(dataset
                    .clusters()
                    .map(|r| {
                        features.cluster_row(r, &mut row);
                        expit(dot(&row, coefficients))
                    })
                    .collect())
            }
        }
    }
}

/// Fits the trial-sampling probability model on all clusters.
pub fn fit_sampling_model(
    dataset: &ClusterDataset,
    config: &NuisanceConfig,
) -> Result<SamplingModel> {
    match config.sampling {
        ProbabilityMode::Known => {
            if dataset.known_design().is_none() {
                return Err(Error::Config(
                    "sampling mode is known but the dataset carries no design probabilities".into(),
                ));
            }
            Ok(SamplingModel {
                kind: ProbModelKind::Known,
                diagnostics: None,
            })
        }
        mode => {
            let features = resolve_features(
                &config.feature_spec,
                dataset.x_dim(),
                dataset.w_dim(),
                mode == ProbabilityMode::Complex,
            )?;
            let design = cluster_design(dataset.clusters(), &features);
            let labels: Vec<f64> = dataset.clusters().map(|r| f64::from(r.s)).collect();
            let fit = fit_logistic(&design, &labels, &config.fit_control)?;
            Ok(SamplingModel {
                kind: ProbModelKind::Fitted {
                    features,
                    coefficients: fit.coefficients,
                },
                diagnostics: Some(ModelDiagnostics {
                    label: "sampling".into(),
                    iterations: fit.iterations,
                    deviance: fit.deviance,
                }),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Treatment model.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum TreatModelKind {
    Known,
    /// Binary treatment: one logistic model for the larger label.
    Binary {
        high: Arm,
        features: ResolvedFeatures,
        coefficients: Vec<f64>,
    },
    /// More than two arms: independent one-vs-rest models. Probabilities are
    /// not normalized across arms in this case.
    OneVsRest {
        features: ResolvedFeatures,
        models: BTreeMap<Arm, Vec<f64>>,
    },
}

/// A fitted (or pass-through) model for `Pr[A = a | x, w, S = 1]`.
#[derive(Debug, Clone)]
pub struct TreatmentModel {
    kind: TreatModelKind,
    diagnostics: Vec<ModelDiagnostics>,
}

impl TreatmentModel {
    /// Raw probabilities of assignment to `arm`, one value per cluster
    /// (evaluated for every cluster; only trial clusters ever weight by it).
    pub fn probabilities(&self, dataset: &ClusterDataset, arm: Arm) -> Result<Vec<f64>> {
        if !dataset.treatment_levels().contains(&arm) {
            return Err(Error::Config(format!(
                "arm {arm} is not in the dataset's treatment set"
            )));
        }
        match &self.kind {
            TreatModelKind::Known => {
                let design = dataset.known_design().ok_or_else(|| {
                    Error::Config(
                        "treatment mode is known but the dataset carries no design probabilities"
                            .into(),
                    )
                })?;
                let p = *design.treatment.get(&arm).ok_or_else(|| {
                    Error::Config(format!("known design lacks a probability for arm {arm}"))
                })?;
                Ok(vec![p; dataset.m()])
            }
            TreatModelKind::Binary {
                high,
                features,
                coefficients,
            } => {
                let mut row = Vec::with_capacity(features.width());
                Ok(dataset
                    .clusters()
                    .map(|r| {
                        features.cluster_row(r, &mut row);
                        let p_high = expit(dot(&row, coefficients));
                        if arm == *high {
                            p_high
                        } else {
                            1.0 - p_high
                        }
                    })
                    .collect())
            }
            TreatModelKind::OneVsRest { features, models } => {
                let coefficients = models.get(&arm).ok_or_else(|| {
                    Error::Config(format!("no treatment model fitted for arm {arm}"))
                })?;
                let mut row = Vec::with_capacity(features.width());
                Ok(dataset
                    .clusters()
                    .map(|r| {
                        features.cluster_row(r, &mut row);
                        expit(dot(&row, coefficients))
                    })
                    .collect())
            }
        }
    }
}

/// Fits the treatment-probability model on the randomized clusters only.
pub fn fit_treatment_model(
    dataset: &ClusterDataset,
    config: &NuisanceConfig,
) -> Result<TreatmentModel> {
    if let ProbabilityMode::Known = config.treatment {
        if dataset.known_design().is_none() {
            return Err(Error::Config(
                "treatment mode is known but the dataset carries no design probabilities".into(),
            ));
        }
        return Ok(TreatmentModel {
            kind: TreatModelKind::Known,
            diagnostics: Vec::new(),
        });
    }

    let trial: Vec<&ClusterRecord> = dataset.clusters().filter(|r| r.s).collect();
    let observed: std::collections::BTreeSet<Arm> = trial.iter().filter_map(|r| r.a).collect();
    if observed.len() < 2 {
        return Err(Error::Estimation(format!(
            "cannot fit a treatment model: {} distinct treatment value(s) among randomized \
             clusters",
            observed.len()
        )));
    }
    let features = resolve_features(
        &config.feature_spec,
        dataset.x_dim(),
        dataset.w_dim(),
        config.treatment == ProbabilityMode::Complex,
    )?;
    let design = cluster_design(trial.iter().copied(), &features);

    if observed.len() == 2 {
        let high = *observed.iter().max().unwrap();
        let labels: Vec<f64> = trial.iter().map(|r| f64::from(r.a == Some(high))).collect();
        let fit = fit_logistic(&design, &labels, &config.fit_control)?;
        Ok(TreatmentModel {
            kind: TreatModelKind::Binary {
                high,
                features,
                coefficients: fit.coefficients,
            },
            diagnostics: vec![ModelDiagnostics {
                label: "treatment".into(),
                iterations: fit.iterations,
                deviance: fit.deviance,
            }],
        })
    } else {
        let mut models = BTreeMap::new();
        let mut diagnostics = Vec::new();
        for arm in observed {
            let labels: Vec<f64> = trial.iter().map(|r| f64::from(r.a == Some(arm))).collect();
            let fit = fit_logistic(&design, &labels, &config.fit_control)?;
            diagnostics.push(ModelDiagnostics {
                label: format!("treatment[{arm}]"),
                iterations: fit.iterations,
                deviance: fit.deviance,
            });
            models.insert(arm, fit.coefficients);
        }
        Ok(TreatmentModel {
            kind: TreatModelKind::OneVsRest { features, models },
            diagnostics,
        })
    }
}

// ---------------------------------------------------------------------------
// Outcome model.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum OutcomeKind {
    Cluster,
    IndividualLogistic,
    IndividualLinear,
}

/// The outcome regression for one arm. Predictions depend only on covariates
/// (never on `s`, `a`, or `y`), so the model is evaluated on every cluster.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    arm: Arm,
    kind: OutcomeKind,
    features: ResolvedFeatures,
    coefficients: Vec<f64>,
    diagnostics: ModelDiagnostics,
}

impl OutcomeModel {
    pub fn arm(&self) -> Arm {
        self.arm
    }

    /// The individual-level prediction `h_a(x, w_i)`; for cluster-level
    /// models this equals the cluster prediction for every individual.
    pub fn predict_individual(&self, record: &ClusterRecord, i: usize) -> f64 {
        let mut row = Vec::with_capacity(self.features.width());
        match self.kind {
            OutcomeKind::Cluster => {
                self.features.cluster_row(record, &mut row);
                dot(&row, &self.coefficients)
            }
            OutcomeKind::IndividualLogistic => {
                self.features.individual_row(record, i, &mut row);
                expit(dot(&row, &self.coefficients))
            }
            OutcomeKind::IndividualLinear => {
                self.features.individual_row(record, i, &mut row);
                dot(&row, &self.coefficients)
            }
        }
    }

    /// The cluster-level prediction `g_a(x, w)`: the model value for
    /// cluster-level fits, the within-cluster mean of individual predictions
    /// otherwise.
    pub fn predict_cluster(&self, record: &ClusterRecord) -> f64 {
        match self.kind {
            OutcomeKind::Cluster => {
                let mut row = Vec::with_capacity(self.features.width());
                self.features.cluster_row(record, &mut row);
                dot(&row, &self.coefficients)
            }
            _ => {
                let n = record.n_individuals;
                let mut sum = 0.0;
                for i in 0..n {
                    sum += self.predict_individual(record, i);
                }
                sum / n as f64
            }
        }
    }

    pub fn predictions(&self, dataset: &ClusterDataset) -> Vec<f64> {
        dataset
            .clusters()
            .map(|r| self.predict_cluster(r))
            .collect()
    }

    pub fn diagnostics(&self) -> &ModelDiagnostics {
        &self.diagnostics
    }
}

/// Fits the outcome regression for one arm on the clusters with
/// `s = 1, a = arm`.
pub fn fit_outcome_model(
    dataset: &ClusterDataset,
    arm: Arm,
    config: &NuisanceConfig,
) -> Result<OutcomeModel> {
    let fit_set: Vec<&ClusterRecord> = dataset
        .clusters()
        .filter(|r| r.s && r.a == Some(arm))
        .collect();
    if fit_set.is_empty() {
        return Err(Error::EmptyArm {
            arm: arm.to_string(),
        });
    }
    let features = resolve_features(&config.feature_spec, dataset.x_dim(), dataset.w_dim(), true)?;

    match config.outcome {
        OutcomeMode::None => Err(Error::Config(
            "outcome mode is none; no outcome model can be fit".into(),
        )),
        OutcomeMode::Cluster => {
            let design = cluster_design(fit_set.iter().copied(), &features);
            let targets: Vec<f64> = fit_set.iter().map(|r| r.y_mean().unwrap()).collect();
            let coefficients = fit_linear(&design, &targets)?;
            let rss: f64 = (0..design.rows())
                .map(|i| {
                    let resid = targets[i] - dot(design.row(i), &coefficients);
                    resid * resid
                })
                .sum();
            Ok(OutcomeModel {
                arm,
                kind: OutcomeKind::Cluster,
                features,
                coefficients,
                diagnostics: ModelDiagnostics {
                    label: format!("outcome[{arm}]"),
                    iterations: 0,
                    deviance: rss,
                },
            })
        }
        OutcomeMode::Individual => {
            let mut design = Matrix::with_capacity(0, features.width());
            let mut targets = Vec::new();
            let mut row = Vec::with_capacity(features.width());
            for r in &fit_set {
                for (i, yi) in r.y().unwrap().iter().enumerate() {
                    features.individual_row(r, i, &mut row);
                    design.push_row(&row);
                    targets.push(*yi);
                }
            }
            let binary = targets.iter().all(|&y| y == 0.0 || y == 1.0);
            if binary {
                let fit = fit_logistic(&design, &targets, &config.fit_control)?;
                Ok(OutcomeModel {
                    arm,
                    kind: OutcomeKind::IndividualLogistic,
                    features,
                    coefficients: fit.coefficients,
                    diagnostics: ModelDiagnostics {
                        label: format!("outcome[{arm}]"),
                        iterations: fit.iterations,
                        deviance: fit.deviance,
                    },
                })
            } else {
                let coefficients = fit_linear(&design, &targets)?;
                let rss: f64 = (0..design.rows())
                    .map(|i| {
                        let resid = targets[i] - dot(design.row(i), &coefficients);
                        resid * resid
                    })
                    .sum();
                Ok(OutcomeModel {
                    arm,
                    kind: OutcomeKind::IndividualLinear,
                    features,
                    coefficients,
                    diagnostics: ModelDiagnostics {
                        label: format!("outcome[{arm}]"),
                        iterations: 0,
                        deviance: rss,
                    },
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Assembled nuisance values.
// ---------------------------------------------------------------------------

/// Per-cluster nuisance values for one dataset, ready for the estimators:
/// clipped and raw sampling probabilities, per-arm treatment probabilities,
/// and (optionally) per-arm outcome predictions, all aligned with the
/// dataset's cluster order.
#[derive(Debug, Clone)]
pub struct FittedNuisance {
    m: usize,
    p_raw: Vec<f64>,
    p: Vec<f64>,
    e_raw: BTreeMap<Arm, Vec<f64>>,
    e: BTreeMap<Arm, Vec<f64>>,
    g: Option<BTreeMap<Arm, Vec<f64>>>,
    strict_positivity: bool,
    pub diagnostics: NuisanceDiagnostics,
}

fn clip_probabilities(raw: &[f64], clips: &mut u64) -> Vec<f64> {
    raw.iter()
        .map(|&v| {
            let clipped = v.clamp(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR);
            if clipped != v {
                *clips += 1;
            }
            clipped
        })
        .collect()
}

impl FittedNuisance {
    /// Assembles nuisance values directly from per-cluster vectors, applying
    /// the positivity guard. Useful when probabilities or predictions come
    /// from outside the built-in fitters.
    pub fn from_values(
        dataset: &ClusterDataset,
        sampling: Vec<f64>,
        treatment: BTreeMap<Arm, Vec<f64>>,
        outcome: Option<BTreeMap<Arm, Vec<f64>>>,
    ) -> Result<Self> {
        let m = dataset.m();
        let check_len = |len: usize, what: &str| {
            if len == m {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{what} has {len} values for {m} clusters"
                )))
            }
        };
        check_len(sampling.len(), "sampling vector")?;
        for (arm, v) in &treatment {
            check_len(v.len(), &format!("treatment vector for arm {arm}"))?;
        }
        if let Some(g) = &outcome {
            for (arm, v) in g {
                check_len(v.len(), &format!("outcome vector for arm {arm}"))?;
            }
        }
        let mut clips = 0;
        let p = clip_probabilities(&sampling, &mut clips);
        let e = treatment
            .iter()
            .map(|(arm, v)| (*arm, clip_probabilities(v, &mut clips)))
            .collect();
        Ok(Self {
            m,
            p_raw: sampling,
            p,
            e_raw: treatment,
            e,
            g: outcome,
            strict_positivity: false,
            diagnostics: NuisanceDiagnostics {
                models: Vec::new(),
                probability_clips: clips,
            },
        })
    }

    /// Turns clipped-probability warnings into hard errors wherever an
    /// estimator divides by the probability.
    pub fn with_strict_positivity(mut self, strict: bool) -> Self {
        self.strict_positivity = strict;
        self
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Clipped sampling probabilities.
    pub fn sampling(&self) -> &[f64] {
        &self.p
    }

    /// Sampling probabilities before the positivity guard.
    pub fn sampling_raw(&self) -> &[f64] {
        &self.p_raw
    }

    /// Clipped treatment probabilities for `arm`.
    pub fn treatment(&self, arm: Arm) -> Result<&[f64]> {
        self.e
            .get(&arm)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no treatment probabilities for arm {arm}")))
    }

    pub fn treatment_raw(&self, arm: Arm) -> Result<&[f64]> {
        self.e_raw
            .get(&arm)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no treatment probabilities for arm {arm}")))
    }

    pub fn has_outcome(&self) -> bool {
        self.g.is_some()
    }

    /// Outcome predictions for `arm`; errors when no outcome model was fit.
    pub fn outcome(&self, arm: Arm) -> Result<&[f64]> {
        self.g
            .as_ref()
            .and_then(|g| g.get(&arm))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Estimation(format!(
                    "the estimator needs an outcome model for arm {arm}, but none was fit \
                     (outcome mode none)"
                ))
            })
    }

    pub fn strict_positivity(&self) -> bool {
        self.strict_positivity
    }
}

/// Fits every nuisance component requested by `config` on `dataset` and
/// evaluates them on each cluster.
pub fn fit_nuisance(dataset: &ClusterDataset, config: &NuisanceConfig) -> Result<FittedNuisance> {
    let sampling_model = fit_sampling_model(dataset, config)?;
    let treatment_model = fit_treatment_model(dataset, config)?;

    let mut diagnostics = NuisanceDiagnostics::default();
    if let Some(d) = sampling_model.diagnostics.clone() {
        diagnostics.models.push(d);
    }
    diagnostics
        .models
        .extend(treatment_model.diagnostics.iter().cloned());

    let p_raw = sampling_model.probabilities(dataset)?;
    let mut e_raw = BTreeMap::new();
    for &arm in dataset.treatment_levels() {
        e_raw.insert(arm, treatment_model.probabilities(dataset, arm)?);
    }

    let g = match config.outcome {
        OutcomeMode::None => None,
        _ => {
            let mut by_arm = BTreeMap::new();
            for &arm in dataset.treatment_levels() {
                let model = fit_outcome_model(dataset, arm, config)?;
                diagnostics.models.push(model.diagnostics().clone());
                by_arm.insert(arm, model.predictions(dataset));
            }
            Some(by_arm)
        }
    };

    let mut clips = 0;
    let p = clip_probabilities(&p_raw, &mut clips);
    let e: BTreeMap<Arm, Vec<f64>> = e_raw
        .iter()
        .map(|(arm, v)| (*arm, clip_probabilities(v, &mut clips)))
        .collect();
    diagnostics.probability_clips = clips;

    Ok(FittedNuisance {
        m: dataset.m(),
        p_raw,
        p,
        e_raw,
        e,
        g,
        strict_positivity: config.strict_positivity,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{ClusterRecord, KnownDesign};

    fn record(
        id: &str,
        x: f64,
        w: Vec<f64>,
        s: bool,
        a: Option<u32>,
        y: Option<Vec<f64>>,
    ) -> ClusterRecord {
        ClusterRecord::new(id, vec![x], w, 1, s, a.map(Arm), y).unwrap()
    }

    /// 4 clusters with x=1 (2 selected), 4 with x=0 (1 selected).
    fn stratified_dataset() -> ClusterDataset {
        let mut records = Vec::new();
        for (j, (x, s)) in [
            (1.0, true),
            (1.0, true),
            (1.0, false),
            (1.0, false),
            (0.0, true),
            (0.0, false),
            (0.0, false),
            (0.0, false),
        ]
        .into_iter()
        .enumerate()
        {
            let a = s.then_some((j % 2) as u32);
            let y = s.then(|| vec![f64::from(j % 2 == 0), 1.0]);
            records.push(record(
                &format!("c{j}"),
                x,
                vec![0.1 * j as f64, 0.2],
                s,
                a,
                y,
            ));
        }
        ClusterDataset::new(records, None).unwrap()
    }

    #[test]
    fn known_sampling_passes_through_exactly() {
        let ds = stratified_dataset();
        let sampling: Vec<f64> = ds
            .clusters()
            .map(|r| if r.x[0] == 1.0 { 0.1 } else { 0.005 })
            .collect();
        let design = KnownDesign {
            sampling: sampling.clone(),
            treatment: [(Arm(0), 0.5), (Arm(1), 0.5)].into(),
        };
        let ds = ds.with_known_design(design).unwrap();
        let config = NuisanceConfig::new(
            ProbabilityMode::Known,
            ProbabilityMode::Known,
            OutcomeMode::None,
        );
        let model = fit_sampling_model(&ds, &config).unwrap();
        assert_eq!(model.probabilities(&ds).unwrap(), sampling);

        let tm = fit_treatment_model(&ds, &config).unwrap();
        let e1 = tm.probabilities(&ds, Arm(1)).unwrap();
        assert!(e1.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn known_mode_without_design_errors() {
        let ds = stratified_dataset();
        let config = NuisanceConfig::new(
            ProbabilityMode::Known,
            ProbabilityMode::Known,
            OutcomeMode::None,
        );
        assert!(fit_sampling_model(&ds, &config).is_err());
        assert!(fit_treatment_model(&ds, &config).is_err());
    }

    #[test]
    fn saturated_simple_model_reproduces_stratum_frequencies() {
        let ds = stratified_dataset();
        let config = NuisanceConfig::default();
        let model = fit_sampling_model(&ds, &config).unwrap();
        let probs = model.probabilities(&ds).unwrap();
        for (r, p) in ds.clusters().zip(&probs) {
            let expected = if r.x[0] == 1.0 { 0.5 } else { 0.25 };
            assert!(
                (p - expected).abs() < 1e-6,
                "x={} p={} expected {}",
                r.x[0],
                p,
                expected
            );
        }
    }

    #[test]
    fn empirical_arm_share_recovered() {
        // Saturated model on x: stratum x=1 has 20 trial clusters with 11 in
        // arm 1, stratum x=0 has 10 with 4.
        let mut records = Vec::new();
        for j in 0..20 {
            let a = u32::from(j < 11);
            records.push(record(
                &format!("t{j}"),
                1.0,
                vec![0.0, 0.0],
                true,
                Some(a),
                Some(vec![1.0, 0.0]),
            ));
        }
        for j in 0..10 {
            let a = u32::from(j < 4);
            records.push(record(
                &format!("u{j}"),
                0.0,
                vec![0.0, 0.0],
                true,
                Some(a),
                Some(vec![1.0, 0.0]),
            ));
        }
        records.push(record("pop", 0.0, vec![0.0, 0.0], false, None, None));
        let ds = ClusterDataset::new(records, None).unwrap();
        let config = NuisanceConfig::default();
        let tm = fit_treatment_model(&ds, &config).unwrap();
        let e1 = tm.probabilities(&ds, Arm(1)).unwrap();
        assert!((e1[0] - 0.55).abs() < 1e-6, "e1(x=1)={}", e1[0]);
        assert!((e1[20] - 0.40).abs() < 1e-6, "e1(x=0)={}", e1[20]);
        let e0 = tm.probabilities(&ds, Arm(0)).unwrap();
        for (a, b) in e1.iter().zip(&e0) {
            assert!((a + b - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn single_arm_treatment_fit_errors() {
        let mut records = Vec::new();
        for j in 0..4 {
            records.push(record(
                &format!("t{j}"),
                0.0,
                vec![0.0],
                true,
                Some(1),
                Some(vec![1.0]),
            ));
        }
        records.push(record("p0", 0.0, vec![0.0], false, None, None));
        let ds = ClusterDataset::new(records, None).unwrap();
        let err = fit_treatment_model(&ds, &NuisanceConfig::default()).unwrap_err();
        assert!(err.to_string().contains("distinct treatment"), "{err}");
    }

    /// Brute-force 3-d deviance minimizer used as an independent check on
    /// the complex sampling fit.
    fn grid_mle_3(design: &Matrix, labels: &[f64]) -> Vec<f64> {
        let deviance = |beta: &[f64]| -> f64 {
            let mut ll = 0.0;
            for (i, label) in labels.iter().enumerate() {
                let eta = dot(design.row(i), beta);
                let log1p = if eta > 0.0 {
                    eta + (-eta).exp().ln_1p()
                } else {
                    eta.exp().ln_1p()
                };
                ll += label * eta - log1p;
            }
            -2.0 * ll
        };
        let mut center = vec![0.0; 3];
        let mut width = 8.0;
        for _ in 0..26 {
            let mut best = (f64::INFINITY, center.clone());
            let steps = 6;
            for i in -steps..=steps {
                for j in -steps..=steps {
                    for k in -steps..=steps {
                        let cand = vec![
                            center[0] + width * i as f64 / steps as f64,
                            center[1] + width * j as f64 / steps as f64,
                            center[2] + width * k as f64 / steps as f64,
                        ];
                        let d = deviance(&cand);
                        if d < best.0 {
                            best = (d, cand);
                        }
                    }
                }
            }
            center = best.1;
            width /= 2.0;
        }
        center
    }

    #[test]
    fn complex_sampling_fit_matches_grid_oracle() {
        // 12 clusters, one x column, one w column; selection loosely tied to
        // both but with thoroughly overlapping supports (no separation).
        let xs = [0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let wbars = [
            -0.9, -0.4, 0.3, 0.8, -0.2, 0.5, 0.1, -0.6, 0.9, -0.1, 0.2, 0.4,
        ];
        let ss = [
            true, false, true, false, false, true, false, true, false, true, false, true,
        ];
        let mut records = Vec::new();
        for j in 0..12 {
            let a = ss[j].then_some((j % 2) as u32);
            let y = ss[j].then(|| vec![1.0, 0.0]);
            records.push(
                ClusterRecord::new(
                    format!("c{j}"),
                    vec![xs[j]],
                    vec![wbars[j], wbars[j]],
                    1,
                    ss[j],
                    a.map(Arm),
                    y,
                )
                .unwrap(),
            );
        }
        let ds = ClusterDataset::new(records, None).unwrap();
        let config = NuisanceConfig {
            sampling: ProbabilityMode::Complex,
            ..NuisanceConfig::default()
        };
        let model = fit_sampling_model(&ds, &config).unwrap();
        let ProbModelKind::Fitted { coefficients, .. } = &model.kind else {
            panic!("expected a fitted model");
        };

        let features = resolve_features(&FeatureSpec::default(), 1, 1, true).unwrap();
        let design = cluster_design(ds.clusters(), &features);
        let labels: Vec<f64> = ds.clusters().map(|r| f64::from(r.s)).collect();
        let oracle = grid_mle_3(&design, &labels);
        for (a, b) in coefficients.iter().zip(&oracle) {
            assert!(
                (a - b).abs() < 1e-4,
                "IRLS {coefficients:?} vs grid {oracle:?}"
            );
        }
    }

    #[test]
    fn complex_treatment_fit_matches_grid_oracle() {
        // Trial clusters only; assignment loosely tied to x and wbar with
        // overlapping supports.
        let xs = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let wbars = [
            -0.7, -0.3, 0.4, 0.9, -0.1, 0.6, 0.2, -0.5, 0.8, 0.0, 0.3, -0.8,
        ];
        let arms = [1u32, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0];
        let mut records = Vec::new();
        for j in 0..12 {
            records.push(
                ClusterRecord::new(
                    format!("t{j}"),
                    vec![xs[j]],
                    vec![wbars[j], wbars[j]],
                    1,
                    true,
                    Some(Arm(arms[j])),
                    Some(vec![1.0, 0.0]),
                )
                .unwrap(),
            );
        }
        records.push(record("pop", 0.0, vec![0.1, 0.1], false, None, None));
        let ds = ClusterDataset::new(records, None).unwrap();
        let config = NuisanceConfig {
            treatment: ProbabilityMode::Complex,
            ..NuisanceConfig::default()
        };
        let tm = fit_treatment_model(&ds, &config).unwrap();
        let TreatModelKind::Binary { coefficients, .. } = &tm.kind else {
            panic!("expected a binary fitted model");
        };

        let features = resolve_features(&FeatureSpec::default(), 1, 1, true).unwrap();
        let trial: Vec<&ClusterRecord> = ds.clusters().filter(|r| r.s).collect();
        let design = cluster_design(trial.iter().copied(), &features);
        let labels: Vec<f64> = trial
            .iter()
            .map(|r| f64::from(r.a == Some(Arm(1))))
            .collect();
        let oracle = grid_mle_3(&design, &labels);
        for (a, b) in coefficients.iter().zip(&oracle) {
            assert!(
                (a - b).abs() < 1e-4,
                "IRLS {coefficients:?} vs grid {oracle:?}"
            );
        }
    }

    #[test]
    fn cluster_outcome_model_interpolates_linear_truth() {
        // ybar exactly linear in (x, wbar): ybar = 0.2 + 0.3x + 0.5*wbar.
        let mut records = Vec::new();
        for j in 0..6 {
            let x = f64::from(j % 2);
            let wbar = -0.5 + 0.2 * j as f64;
            let ybar = 0.2 + 0.3 * x + 0.5 * wbar;
            records.push(
                ClusterRecord::new(
                    format!("c{j}"),
                    vec![x],
                    vec![wbar, wbar],
                    1,
                    true,
                    Some(Arm(1)),
                    Some(vec![ybar, ybar]),
                )
                .unwrap(),
            );
        }
        records.push(record("pop", 0.0, vec![0.7, 0.7], false, None, None));
        let ds = ClusterDataset::new(records, None).unwrap();
        let config = NuisanceConfig::new(
            ProbabilityMode::Simple,
            ProbabilityMode::Simple,
            OutcomeMode::Cluster,
        );
        let model = fit_outcome_model(&ds, Arm(1), &config).unwrap();
        for r in ds.clusters().filter(|r| r.s) {
            let g = model.predict_cluster(r);
            assert!((g - r.y_mean().unwrap()).abs() < 1e-10);
        }
        // And the s=0 cluster gets the extrapolated linear value.
        let g0 = model.predict_cluster(ds.cluster(6));
        assert!((g0 - (0.2 + 0.5 * 0.7)).abs() < 1e-10);
    }

    #[test]
    fn individual_outcome_model_averages_expit_predictions() {
        // 6 clusters in the arm, 3 individuals each, binary outcomes.
        let mut records = Vec::new();
        let w_sets: [[f64; 3]; 6] = [
            [-1.0, 0.2, 0.9],
            [-0.4, 0.1, 0.5],
            [0.3, -0.8, 0.6],
            [0.7, 0.0, -0.2],
            [-0.6, 0.4, 0.8],
            [0.2, -0.3, -0.9],
        ];
        let y_sets: [[f64; 3]; 6] = [
            [0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 1.0],
            [1.0, 0.0, 0.0],
        ];
        for j in 0..6 {
            records.push(
                ClusterRecord::new(
                    format!("c{j}"),
                    vec![(j % 2) as f64],
                    w_sets[j].to_vec(),
                    1,
                    true,
                    Some(Arm(1)),
                    Some(y_sets[j].to_vec()),
                )
                .unwrap(),
            );
        }
        records.push(record("pop", 1.0, vec![0.5], false, None, None));
        let ds = ClusterDataset::new(records, None).unwrap();
        let config = NuisanceConfig::new(
            ProbabilityMode::Simple,
            ProbabilityMode::Simple,
            OutcomeMode::Individual,
        );
        let model = fit_outcome_model(&ds, Arm(1), &config).unwrap();
        let beta = model.coefficients.clone();
        for r in ds.clusters() {
            // Independent re-computation of mean_i expit(beta . [1, x, w_i]).
            let mut expected = 0.0;
            for i in 0..r.n_individuals {
                let eta = beta[0] + beta[1] * r.x[0] + beta[2] * r.w_row(i)[0];
                expected += 1.0 / (1.0 + (-eta).exp());
            }
            expected /= r.n_individuals as f64;
            assert!((model.predict_cluster(r) - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn individual_outcome_all_ones_surfaces_separation() {
        let mut records = Vec::new();
        for j in 0..4 {
            records.push(record(
                &format!("c{j}"),
                0.0,
                vec![0.1 * j as f64, 0.2],
                true,
                Some(1),
                Some(vec![1.0, 1.0]),
            ));
        }
        records.push(record(
            "z",
            0.0,
            vec![0.0, 0.0],
            true,
            Some(0),
            Some(vec![0.0, 1.0]),
        ));
        records.push(record("p", 0.0, vec![0.0, 0.0], false, None, None));
        let ds = ClusterDataset::new(records, None).unwrap();
        let config = NuisanceConfig::new(
            ProbabilityMode::Simple,
            ProbabilityMode::Simple,
            OutcomeMode::Individual,
        );
        let err = fit_outcome_model(&ds, Arm(1), &config).unwrap_err();
        assert!(matches!(err, Error::PerfectSeparation(_)), "{err}");
    }

    /// 8 trial clusters (4 per arm) with varied covariates and mixed binary
    /// outcomes, plus 2 non-randomized clusters.
    fn mixed_outcome_dataset() -> ClusterDataset {
        let mut records = Vec::new();
        let w_sets: [[f64; 3]; 8] = [
            [-1.0, 0.2, 0.9],
            [-0.4, 0.1, 0.5],
            [0.3, -0.8, 0.6],
            [0.7, 0.0, -0.2],
            [-0.6, 0.4, 0.8],
            [0.2, -0.3, -0.9],
            [0.5, 0.9, -0.5],
            [-0.8, -0.1, 0.3],
        ];
        let y_sets: [[f64; 3]; 8] = [
            [0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 1.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        for j in 0..8 {
            records.push(
                ClusterRecord::new(
                    format!("t{j}"),
                    vec![(j % 2) as f64],
                    w_sets[j].to_vec(),
                    1,
                    true,
                    Some(Arm(u32::from(j < 4))),
                    Some(y_sets[j].to_vec()),
                )
                .unwrap(),
            );
        }
        records.push(record("p0", 1.0, vec![0.5, -0.2, 0.1], false, None, None));
        records.push(record("p1", 0.0, vec![-0.3, 0.6, 0.2], false, None, None));
        ClusterDataset::new(records, None).unwrap()
    }

    #[test]
    fn cluster_prediction_stays_in_hull_of_individual_predictions() {
        let ds = mixed_outcome_dataset();
        let config = NuisanceConfig::new(
            ProbabilityMode::Simple,
            ProbabilityMode::Simple,
            OutcomeMode::Individual,
        );
        for &arm in ds.treatment_levels() {
            let model = fit_outcome_model(&ds, arm, &config).unwrap();
            for r in ds.clusters() {
                let preds: Vec<f64> = (0..r.n_individuals)
                    .map(|i| model.predict_individual(r, i))
                    .collect();
                let lo = preds.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = preds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let g = model.predict_cluster(r);
                assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn outcome_predictions_ignore_selection_and_outcomes() {
        let ds = mixed_outcome_dataset();
        let config = NuisanceConfig::default();
        let model = fit_outcome_model(&ds, Arm(1), &config).unwrap();
        // Same covariates, different s/a/y.
        let selected = ClusterRecord::new(
            "probe",
            vec![1.0],
            vec![0.4, 0.6],
            1,
            true,
            Some(Arm(0)),
            Some(vec![1.0, 1.0]),
        )
        .unwrap();
        let unselected =
            ClusterRecord::new("probe", vec![1.0], vec![0.4, 0.6], 1, false, None, None).unwrap();
        assert_eq!(
            model.predict_cluster(&selected),
            model.predict_cluster(&unselected)
        );
    }

    #[test]
    fn fit_nuisance_counts_clips() {
        let ds = stratified_dataset();
        let sampling = vec![0.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let design = KnownDesign {
            sampling,
            treatment: [(Arm(0), 0.5), (Arm(1), 0.5)].into(),
        };
        let ds = ds.with_known_design(design).unwrap();
        let config = NuisanceConfig::new(
            ProbabilityMode::Known,
            ProbabilityMode::Known,
            OutcomeMode::None,
        );
        let fitted = fit_nuisance(&ds, &config).unwrap();
        assert_eq!(fitted.diagnostics.probability_clips, 2);
        assert_eq!(fitted.sampling_raw()[0], 0.0);
        assert_eq!(fitted.sampling()[0], PROBABILITY_FLOOR);
    }
}

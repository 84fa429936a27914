//! Point estimators for the expectation of the cluster-average potential
//! outcome, in the entire target population of clusters and in its
//! non-randomized subset, together with their influence curves.
//!
//! For the entire population the augmented estimator is
//!
//! ```text
//! psi_hat(a) = (1/m) sum_j { I(S_j=1, A_j=a) / (p_j e_j) * (ybar_j - g_j) + g_j }
//! ```
//!
//! and the non-augmented (inverse probability weighting) estimator is its
//! special case with the outcome term `g` fixed at zero — both run through
//! the same kernel, so the reduction is exact to the last bit. For the
//! non-randomized subset the augmented inverse odds weighting estimator is
//!
//! ```text
//! phi_hat(a) = n0^-1 sum_j I(S_j=1, A_j=a) (1-p_j) / (p_j e_j) * (ybar_j - g_j)
//!            + n0^-1 sum_j (1-p_j) g_j ,          n0 = sum_j I(S_j=0),
//! ```
//!
//! again with the inverse odds weighting estimator as its `g = 0` special
//! case. A comparator replaces the `(1-p_j)` weight in the second sum with
//! the indicator `I(S_j=0)`; with known sampling probabilities it is
//! asymptotically no more efficient than `phi_hat`.
//!
//! Influence curves are stored recentered to exact zero sample mean; sample
//! variances, and hence the standard errors built from them, are unaffected
//! by the centering constant.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data_model::{Arm, ClusterDataset};
use crate::error::{Error, Result};
use crate::inference::{ic_standard_error, IntervalEstimate};
use crate::nuisance::{FittedNuisance, NuisanceDiagnostics};

/// Which population an estimand refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    Entire,
    NonRandomized,
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Population::Entire => write!(f, "entire"),
            Population::NonRandomized => write!(f, "non_randomized"),
        }
    }
}

/// A single arm mean or a treatment-effect contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ArmOrContrast {
    Arm(Arm),
    /// Ordered pair `(a, a')`; the estimand is the `a` mean minus the `a'` mean.
    Contrast(Arm, Arm),
}

impl fmt::Display for ArmOrContrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArmOrContrast::Arm(a) => write!(f, "po_mean[{a}]"),
            ArmOrContrast::Contrast(a, b) => write!(f, "ate[{a}-{b}]"),
        }
    }
}

/// What is being estimated: a population and an arm or contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "TargetRepr", into = "TargetRepr")]
pub struct EstimandTarget {
    pub population: Population,
    pub arm_or_contrast: ArmOrContrast,
}

impl EstimandTarget {
    pub fn arm(population: Population, arm: Arm) -> Self {
        Self {
            population,
            arm_or_contrast: ArmOrContrast::Arm(arm),
        }
    }

    pub fn contrast(population: Population, a: Arm, a_prime: Arm) -> Self {
        Self {
            population,
            arm_or_contrast: ArmOrContrast::Contrast(a, a_prime),
        }
    }
}

impl fmt::Display for EstimandTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in {}", self.arm_or_contrast, self.population)
    }
}

#[derive(Serialize, Deserialize)]
struct TargetRepr {
    population: Population,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arm: Option<Arm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contrast: Option<(Arm, Arm)>,
}

impl TryFrom<TargetRepr> for EstimandTarget {
    type Error = String;
    fn try_from(repr: TargetRepr) -> std::result::Result<Self, String> {
        match (repr.arm, repr.contrast) {
            (Some(a), None) => Ok(EstimandTarget::arm(repr.population, a)),
            (None, Some((a, b))) => Ok(EstimandTarget::contrast(repr.population, a, b)),
            _ => Err("a target needs exactly one of `arm` or `contrast`".into()),
        }
    }
}

impl From<EstimandTarget> for TargetRepr {
    fn from(t: EstimandTarget) -> Self {
        match t.arm_or_contrast {
            ArmOrContrast::Arm(a) => TargetRepr {
                population: t.population,
                arm: Some(a),
                contrast: None,
            },
            ArmOrContrast::Contrast(a, b) => TargetRepr {
                population: t.population,
                arm: None,
                contrast: Some((a, b)),
            },
        }
    }
}

/// The estimator families exposed through configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    TrialOnly,
    Ipw,
    Aipw,
    Iow,
    Aiow,
    AiowIndicator,
    /// The plain outcome-model plug-in `(1/m) sum_j g_a(x_j, w_j)`; mainly a
    /// comparator for robustness experiments.
    OutcomeOnly,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::TrialOnly => "trial_only",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Aipw => "aipw",
            EstimatorKind::Iow => "iow",
            EstimatorKind::Aiow => "aiow",
            EstimatorKind::AiowIndicator => "aiow_indicator",
            EstimatorKind::OutcomeOnly => "outcome_only",
        }
    }

    /// The population the estimator targets.
    pub fn population(self) -> Population {
        match self {
            EstimatorKind::Iow | EstimatorKind::Aiow | EstimatorKind::AiowIndicator => {
                Population::NonRandomized
            }
            _ => Population::Entire,
        }
    }

    pub fn needs_outcome_model(self) -> bool {
        matches!(
            self,
            EstimatorKind::Aipw
                | EstimatorKind::Aiow
                | EstimatorKind::AiowIndicator
                | EstimatorKind::OutcomeOnly
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "trial_only" => EstimatorKind::TrialOnly,
            "ipw" => EstimatorKind::Ipw,
            "aipw" => EstimatorKind::Aipw,
            "iow" => EstimatorKind::Iow,
            "aiow" => EstimatorKind::Aiow,
            "aiow_indicator" => EstimatorKind::AiowIndicator,
            "outcome_only" => EstimatorKind::OutcomeOnly,
            other => return Err(Error::Config(format!("unknown estimator kind {other:?}"))),
        })
    }
}

/// A point estimate with its influence curve and standard errors.
#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub target: EstimandTarget,
    pub estimator_name: String,
    pub point: f64,
    /// Per-cluster influence-curve values (length `m`, sample mean zero);
    /// absent for the trial-only estimator.
    pub influence_curve: Option<Vec<f64>>,
    pub se_ic: Option<f64>,
    pub se_bootstrap: Option<f64>,
    pub ci: Option<IntervalEstimate>,
    pub diagnostics: NuisanceDiagnostics,
}

// ---------------------------------------------------------------------------
// Kernels.
// ---------------------------------------------------------------------------

fn check_positivity(dataset: &ClusterDataset, nuisance: &FittedNuisance, arm: Arm) -> Result<()> {
    let p_raw = nuisance.sampling_raw();
    let p = nuisance.sampling();
    let e_raw = nuisance.treatment_raw(arm)?;
    let e = nuisance.treatment(arm)?;
    for (j, r) in dataset.clusters().enumerate() {
        if !(r.s && r.a == Some(arm)) {
            continue;
        }
        for (kind, raw, clipped) in [("sampling", p_raw[j], p[j]), ("treatment", e_raw[j], e[j])] {
            if raw == 0.0 || (nuisance.strict_positivity() && clipped != raw) {
                return Err(Error::PositivityViolation {
                    cluster_id: r.cluster_id.clone(),
                    kind,
                    value: raw,
                });
            }
        }
    }
    Ok(())
}

fn check_alignment(dataset: &ClusterDataset, nuisance: &FittedNuisance) -> Result<()> {
    if nuisance.m() != dataset.m() {
        return Err(Error::Config(format!(
            "nuisance values cover {} clusters but the dataset has {}",
            nuisance.m(),
            dataset.m()
        )));
    }
    Ok(())
}

fn recenter(mut values: Vec<f64>) -> Vec<f64> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    for v in &mut values {
        *v -= mean;
    }
    values
}

/// `(1/m) sum I/(p e) (ybar - g) + g`; the number of terms with an active
/// indicator is returned for error reporting.
fn psi_kernel(
    dataset: &ClusterDataset,
    arm: Arm,
    nuisance: &FittedNuisance,
    g: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_alignment(dataset, nuisance)?;
    check_positivity(dataset, nuisance, arm)?;
    let p = nuisance.sampling();
    let e = nuisance.treatment(arm)?;
    let m = dataset.m();
    let mut terms = Vec::with_capacity(m);
    let mut any_active = false;
    for (j, r) in dataset.clusters().enumerate() {
        let term = if r.s && r.a == Some(arm) {
            any_active = true;
            (r.y_mean().unwrap() - g[j]) / (p[j] * e[j]) + g[j]
        } else {
            g[j]
        };
        terms.push(term);
    }
    if !any_active {
        return Err(Error::EmptyArm {
            arm: arm.to_string(),
        });
    }
    let point = terms.iter().sum::<f64>() / m as f64;
    let curve = recenter(terms.iter().map(|t| t - point).collect());
    Ok((point, curve))
}

#[derive(Clone, Copy, PartialEq)]
enum SecondTermWeight {
    OneMinusP,
    Indicator,
}

/// The inverse odds kernel for the non-randomized subset. `second` selects
/// the weight on the outcome-model term of the second sum.
fn phi_kernel(
    dataset: &ClusterDataset,
    arm: Arm,
    nuisance: &FittedNuisance,
    g: &[f64],
    second: SecondTermWeight,
) -> Result<(f64, Vec<f64>)> {
    check_alignment(dataset, nuisance)?;
    check_positivity(dataset, nuisance, arm)?;
    let p = nuisance.sampling();
    let e = nuisance.treatment(arm)?;
    let m = dataset.m();
    let n0 = dataset.n_non_randomized();
    if n0 == 0 {
        return Err(Error::NoNonRandomizedClusters);
    }
    let pi_hat = n0 as f64 / m as f64;

    let mut weighted_residual = Vec::with_capacity(m);
    let mut second_weight = Vec::with_capacity(m);
    let mut any_active = false;
    for (j, r) in dataset.clusters().enumerate() {
        let first = if r.s && r.a == Some(arm) {
            any_active = true;
            (1.0 - p[j]) / (p[j] * e[j]) * (r.y_mean().unwrap() - g[j])
        } else {
            0.0
        };
        weighted_residual.push(first);
        second_weight.push(match second {
            SecondTermWeight::OneMinusP => 1.0 - p[j],
            SecondTermWeight::Indicator => f64::from(!r.s),
        });
    }
    if !any_active {
        return Err(Error::EmptyArm {
            arm: arm.to_string(),
        });
    }
    let total: f64 = (0..m)
        .map(|j| weighted_residual[j] + second_weight[j] * g[j])
        .sum();
    let point = total / n0 as f64;
    let curve = recenter(
        (0..m)
            .map(|j| (weighted_residual[j] + second_weight[j] * (g[j] - point)) / pi_hat)
            .collect(),
    );
    Ok((point, curve))
}

fn finish(
    dataset: &ClusterDataset,
    target: EstimandTarget,
    name: &str,
    point: f64,
    curve: Vec<f64>,
    nuisance: &FittedNuisance,
) -> EstimateResult {
    debug_assert_eq!(curve.len(), dataset.m());
    let se_ic = ic_standard_error(&curve).ok();
    EstimateResult {
        target,
        estimator_name: name.to_string(),
        point,
        influence_curve: Some(curve),
        se_ic,
        se_bootstrap: None,
        ci: None,
        diagnostics: nuisance.diagnostics.clone(),
    }
}

// ---------------------------------------------------------------------------
// Public estimators.
// ---------------------------------------------------------------------------

/// Unweighted mean of the cluster-average outcomes over the trial clusters
/// in `arm`. Biased for the target population whenever selection depends on
/// outcome-related covariates; provided as the naive benchmark.
pub fn trial_only(dataset: &ClusterDataset, arm: Arm) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in dataset.clusters() {
        if r.s && r.a == Some(arm) {
            sum += r.y_mean().unwrap();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyArm {
            arm: arm.to_string(),
        });
    }
    Ok(sum / count as f64)
}

fn trial_only_result(dataset: &ClusterDataset, target: EstimandTarget) -> Result<EstimateResult> {
    let point = match target.arm_or_contrast {
        ArmOrContrast::Arm(a) => trial_only(dataset, a)?,
        ArmOrContrast::Contrast(a, b) => {
            check_contrast_arms(a, b)?;
            trial_only(dataset, a)? - trial_only(dataset, b)?
        }
    };
    Ok(EstimateResult {
        target,
        estimator_name: "trial_only".into(),
        point,
        influence_curve: None,
        se_ic: None,
        se_bootstrap: None,
        ci: None,
        diagnostics: NuisanceDiagnostics::default(),
    })
}

/// Non-augmented inverse probability weighting estimator for the entire
/// population: the augmented kernel with the outcome term fixed at zero.
pub fn ipw_psi(
    dataset: &ClusterDataset,
    arm: Arm,
    nuisance: &FittedNuisance,
) -> Result<EstimateResult> {
    let zeros = vec![0.0; dataset.m()];
    let (point, curve) = psi_kernel(dataset, arm, nuisance, &zeros)?;
    Ok(finish(
        dataset,
        EstimandTarget::arm(Population::Entire, arm),
        "ipw",
        point,
        curve,
        nuisance,
    ))
}

/// Augmented inverse probability of selection weighting estimator for the
/// entire population.
pub fn aipw_psi(
    dataset: &ClusterDataset,
    arm: Arm,
    nuisance: &FittedNuisance,
) -> Result<EstimateResult> {
    let g = nuisance.outcome(arm)?;
    let (point, curve) = psi_kernel(dataset, arm, nuisance, g)?;
    Ok(finish(
        dataset,
        EstimandTarget::arm(Population::Entire, arm),
        "aipw",
        point,
        curve,
        nuisance,
    ))
}

/// Non-augmented inverse odds weighting estimator for the non-randomized
/// subset: the augmented kernel with the outcome term fixed at zero.
pub fn iow_phi(
    dataset: &ClusterDataset,
    arm: Arm,
    nuisance: &FittedNuisance,
) -> Result<EstimateResult> {
    let zeros = vec![0.0; dataset.m()];
    let (point, curve) = phi_kernel(dataset, arm, nuisance, &zeros, SecondTermWeight::OneMinusP)?;
    Ok(finish(
        dataset,
        EstimandTarget::arm(Population::NonRandomized, arm),
        "iow",
        point,
        curve,
        nuisance,
    ))
}

/// Augmented inverse odds of selection weighting estimator for the
/// non-randomized subset, with the `(1 - p)` weight on the outcome-model
/// term.
pub fn aiow_phi(
    dataset: &ClusterDataset,
    arm: Arm,
    nuisance: &FittedNuisance,
) -> Result<EstimateResult> {
    let g = nuisance.outcome(arm)?;
    let (point, curve) = phi_kernel(dataset, arm, nuisance, g, SecondTermWeight::OneMinusP)?;
    Ok(finish(
        dataset,
        EstimandTarget::arm(Population::NonRandomized, arm),
        "aiow",
        point,
        curve,
        nuisance,
    ))
}

/// Comparator for [`aiow_phi`] with the indicator `I(S=0)` in place of
/// `(1 - p)` in the second sum; the efficient choice when the sampling
/// probability must be estimated, but no better than [`aiow_phi`] when it is
/// known.
pub fn aiow_phi_indicator(
    dataset: &ClusterDataset,
    arm: Arm,
    nuisance: &FittedNuisance,
) -> Result<EstimateResult> {
    let g = nuisance.outcome(arm)?;
    let (point, curve) = phi_kernel(dataset, arm, nuisance, g, SecondTermWeight::Indicator)?;
    Ok(finish(
        dataset,
        EstimandTarget::arm(Population::NonRandomized, arm),
        "aiow_indicator",
        point,
        curve,
        nuisance,
    ))
}

/// Outcome-model plug-in `(1/m) sum_j g_a(x_j, w_j)`: consistent only when
/// the outcome model is, unlike the augmented estimators.
pub fn outcome_only_psi(
    dataset: &ClusterDataset,
    arm: Arm,
    nuisance: &FittedNuisance,
) -> Result<EstimateResult> {
    check_alignment(dataset, nuisance)?;
    let g = nuisance.outcome(arm)?;
    let point = g.iter().sum::<f64>() / dataset.m() as f64;
    let curve = recenter(g.iter().map(|v| v - point).collect());
    Ok(finish(
        dataset,
        EstimandTarget::arm(Population::Entire, arm),
        "outcome_only",
        point,
        curve,
        nuisance,
    ))
}

fn check_contrast_arms(a: Arm, b: Arm) -> Result<()> {
    if a == b {
        return Err(Error::Config(format!(
            "contrast arms must be distinct, got ({a}, {b})"
        )));
    }
    Ok(())
}

fn arm_estimate(
    dataset: &ClusterDataset,
    kind: EstimatorKind,
    arm: Arm,
    nuisance: Option<&FittedNuisance>,
) -> Result<EstimateResult> {
    if kind == EstimatorKind::TrialOnly {
        return trial_only_result(dataset, EstimandTarget::arm(Population::Entire, arm));
    }
    let nuisance = nuisance
        .ok_or_else(|| Error::Config(format!("estimator {kind} needs fitted nuisance values")))?;
    match kind {
        EstimatorKind::TrialOnly => unreachable!(),
        EstimatorKind::Ipw => ipw_psi(dataset, arm, nuisance),
        EstimatorKind::Aipw => aipw_psi(dataset, arm, nuisance),
        EstimatorKind::Iow => iow_phi(dataset, arm, nuisance),
        EstimatorKind::Aiow => aiow_phi(dataset, arm, nuisance),
        EstimatorKind::AiowIndicator => aiow_phi_indicator(dataset, arm, nuisance),
        EstimatorKind::OutcomeOnly => outcome_only_psi(dataset, arm, nuisance),
    }
}

/// Treatment-effect contrast `a - a'`: difference of the per-arm points,
/// with the differenced influence curve (the arms share clusters, so summing
/// per-arm variances would be wrong).
pub fn contrast(
    dataset: &ClusterDataset,
    pair: (Arm, Arm),
    kind: EstimatorKind,
    nuisance: &FittedNuisance,
) -> Result<EstimateResult> {
    let (a, b) = pair;
    check_contrast_arms(a, b)?;
    let left = arm_estimate(dataset, kind, a, Some(nuisance))?;
    let right = arm_estimate(dataset, kind, b, Some(nuisance))?;
    let target = EstimandTarget::contrast(kind.population(), a, b);
    let point = left.point - right.point;
    let influence_curve = match (left.influence_curve, right.influence_curve) {
        (Some(l), Some(r)) => Some(l.iter().zip(&r).map(|(x, y)| x - y).collect::<Vec<f64>>()),
        _ => None,
    };
    let se_ic = influence_curve
        .as_deref()
        .and_then(|c| ic_standard_error(c).ok());
    Ok(EstimateResult {
        target,
        estimator_name: left.estimator_name,
        point,
        influence_curve,
        se_ic,
        se_bootstrap: None,
        ci: None,
        diagnostics: left.diagnostics,
    })
}

/// Dispatches an estimator kind on a target, checking that the estimator's
/// population matches the target's. The trial-only estimator needs no
/// nuisance values; every other kind does.
pub fn estimate(
    dataset: &ClusterDataset,
    kind: EstimatorKind,
    target: EstimandTarget,
    nuisance: Option<&FittedNuisance>,
) -> Result<EstimateResult> {
    if kind.population() != target.population && kind != EstimatorKind::TrialOnly {
        return Err(Error::Config(format!(
            "estimator {} targets the {} population, not {}",
            kind,
            kind.population(),
            target.population
        )));
    }
    match target.arm_or_contrast {
        ArmOrContrast::Arm(a) => {
            let mut r = arm_estimate(dataset, kind, a, nuisance)?;
            r.target = EstimandTarget {
                population: target.population,
                ..r.target
            };
            Ok(r)
        }
        ArmOrContrast::Contrast(a, b) => {
            if kind == EstimatorKind::TrialOnly {
                let mut r =
                    trial_only_result(dataset, EstimandTarget::contrast(Population::Entire, a, b))?;
                r.target = target;
                return Ok(r);
            }
            let nuisance = nuisance.ok_or_else(|| {
                Error::Config(format!("estimator {kind} needs fitted nuisance values"))
            })?;
            contrast(dataset, (a, b), kind, nuisance)
        }
    }
}

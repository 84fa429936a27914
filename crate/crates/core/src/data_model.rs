//! Observed-data structures: one record per cluster, a dataset per cohort,
//! CSV ingestion, and structural/positivity validation.
//!
//! A cohort holds `m` clusters indexed `j = 1..m`. For every cluster we
//! observe cluster-level covariates `x`, an `N_j x p` matrix of
//! individual-level covariates `w`, and a selection indicator `s`. Treatment
//! `a` and the vector of individual outcomes `y` exist only for selected
//! (`s = 1`) clusters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A treatment label from the finite set of possible treatments.
///
/// Binary trials use `Arm(0)` / `Arm(1)`, but any finite set of unsigned
/// labels is accepted; all estimators are per-arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Arm(pub u32);

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One cluster: covariates, selection flag, and (for selected clusters)
/// treatment plus individual outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub cluster_id: String,
    /// Cluster-level covariates (binary covariates coded 0/1).
    pub x: Vec<f64>,
    /// Individual-level covariates, row-major `n_individuals x p`.
    w: Vec<f64>,
    /// Number of individual covariate columns `p`.
    w_cols: usize,
    pub n_individuals: usize,
    /// Selection into the trial.
    pub s: bool,
    /// Treatment assignment; present iff `s`.
    pub a: Option<Arm>,
    /// Individual outcomes, length `n_individuals`; present iff `s`.
    y: Option<Vec<f64>>,
    /// Column means of `w`, cached at construction.
    w_means: Vec<f64>,
    /// Mean of `y`, cached at construction.
    y_mean: Option<f64>,
}

impl ClusterRecord {
    /// Builds a record, enforcing the structural invariants:
    /// `w` has `n_individuals >= 1` rows, `s = 1` iff `a` and `y` are present,
    /// `y` (when present) has one entry per individual, and every value is
    /// finite.
    pub fn new(
        cluster_id: impl Into<String>,
        x: Vec<f64>,
        w: Vec<f64>,
        w_cols: usize,
        s: bool,
        a: Option<Arm>,
        y: Option<Vec<f64>>,
    ) -> Result<Self> {
        let cluster_id = cluster_id.into();
        let fail = |msg: String| Error::Validation(format!("cluster {cluster_id}: {msg}"));

        if w_cols == 0 && !w.is_empty() {
            return Err(fail("w has data but zero columns".into()));
        }
        let n_individuals = if w_cols == 0 {
            // With no individual covariates the individual count comes from y,
            // or defaults to 1 for non-selected clusters.
            y.as_ref().map_or(1, Vec::len)
        } else {
            if !w.len().is_multiple_of(w_cols) {
                return Err(fail(format!(
                    "w length {} is not a multiple of {} columns",
                    w.len(),
                    w_cols
                )));
            }
            w.len() / w_cols
        };
        if n_individuals == 0 {
            return Err(fail("cluster has no individuals".into()));
        }
        if s {
            if a.is_none() {
                return Err(fail("selected cluster (s=1) lacks a treatment".into()));
            }
            if y.is_none() {
                return Err(fail("selected cluster (s=1) lacks outcomes".into()));
            }
        } else {
            if a.is_some() {
                return Err(fail("treatment present for non-randomized cluster".into()));
            }
            if y.is_some() {
                return Err(fail("outcome present for non-randomized cluster".into()));
            }
        }
        if let Some(yv) = &y {
            if yv.len() != n_individuals {
                return Err(fail(format!(
                    "y has {} entries but the cluster has {} individuals",
                    yv.len(),
                    n_individuals
                )));
            }
        }
        for (name, vals) in [("x", &x), ("w", &w)] {
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("non-finite value in {name}")));
            }
        }
        if let Some(yv) = &y {
            if yv.iter().any(|v| !v.is_finite()) {
                return Err(fail("non-finite value in y".into()));
            }
        }

        let mut w_means = vec![0.0; w_cols];
        for row in 0..n_individuals {
            for (k, mean) in w_means.iter_mut().enumerate() {
                *mean += w[row * w_cols + k];
            }
        }
        for mean in &mut w_means {
            *mean /= n_individuals as f64;
        }
        let y_mean = y
            .as_ref()
            .map(|yv| yv.iter().sum::<f64>() / yv.len() as f64);

        Ok(Self {
            cluster_id,
            x,
            w,
            w_cols,
            n_individuals,
            s,
            a,
            y,
            w_means,
            y_mean,
        })
    }

    pub fn w_cols(&self) -> usize {
        self.w_cols
    }

    /// Row `i` of the individual covariate matrix.
    pub fn w_row(&self, i: usize) -> &[f64] {
        &self.w[i * self.w_cols..(i + 1) * self.w_cols]
    }

    /// Column means of the individual covariate matrix.
    pub fn w_means(&self) -> &[f64] {
        &self.w_means
    }

    pub fn y(&self) -> Option<&[f64]> {
        self.y.as_deref()
    }

    /// Mean observed outcome of the cluster, if selected.
    pub fn y_mean(&self) -> Option<f64> {
        self.y_mean
    }
}

/// The cluster-level average observed outcome, `mean(y)`.
///
/// Errors on non-selected clusters, which carry no outcomes.
pub fn cluster_average_outcome(record: &ClusterRecord) -> Result<f64> {
    record.y_mean().ok_or_else(|| {
        Error::Estimation(format!(
            "cluster {} is not in the trial (s=0); it has no observed outcomes",
            record.cluster_id
        ))
    })
}

/// Known-by-design probabilities attached to a dataset: the per-cluster
/// sampling probability and the constant per-arm treatment probabilities in
/// the trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownDesign {
    /// `Pr[S_j = 1 | covariates]`, aligned with the dataset's cluster order.
    pub sampling: Vec<f64>,
    /// `Pr[A = a | S = 1]` per arm.
    pub treatment: BTreeMap<Arm, f64>,
}

/// The cohort of trial-eligible clusters: the unit of analysis.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct ClusterDataset {
    clusters: Vec<Arc<ClusterRecord>>,
    treatment_levels: BTreeSet<Arm>,
    known_design: Option<KnownDesign>,
}

impl ClusterDataset {
    /// Builds a dataset, checking the cross-cluster invariants: at least two
    /// clusters, unique ids, a uniform individual-covariate dimension, at
    /// least one selected cluster, and every observed treatment in the
    /// declared set (inferred from the data when `treatment_levels` is
    /// `None`).
    pub fn new(
        records: Vec<ClusterRecord>,
        treatment_levels: Option<BTreeSet<Arm>>,
    ) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::Validation(format!(
                "dataset has {} cluster(s); at least 2 are required",
                records.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.cluster_id.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate cluster_id {}",
                    r.cluster_id
                )));
            }
        }
        let x_dim = records[0].x.len();
        let w_dim = records[0].w_cols;
        for r in &records {
            if r.x.len() != x_dim || r.w_cols != w_dim {
                return Err(Error::Validation(format!(
                    "cluster {}: covariate dimensions ({}, {}) differ from ({}, {}); \
                     ragged covariate sets are rejected",
                    r.cluster_id,
                    r.x.len(),
                    r.w_cols,
                    x_dim,
                    w_dim
                )));
            }
        }
        if !records.iter().any(|r| r.s) {
            return Err(Error::Validation(
                "dataset has no selected (s=1) clusters".into(),
            ));
        }
        let observed: BTreeSet<Arm> = records.iter().filter_map(|r| r.a).collect();
        let treatment_levels = match treatment_levels {
            Some(levels) => {
                if let Some(stray) = observed.difference(&levels).next() {
                    return Err(Error::Validation(format!(
                        "observed treatment {stray} is not in the declared treatment set"
                    )));
                }
                levels
            }
            None => observed,
        };
        Ok(Self {
            clusters: records.into_iter().map(Arc::new).collect(),
            treatment_levels,
            known_design: None,
        })
    }

    /// Attaches known-by-design probabilities. The sampling vector must be
    /// aligned with the cluster order and lie in [0, 1]; treatment
    /// probabilities must be positive for every declared arm.
    pub fn with_known_design(mut self, design: KnownDesign) -> Result<Self> {
        if design.sampling.len() != self.clusters.len() {
            return Err(Error::Validation(format!(
                "known design has {} sampling probabilities for {} clusters",
                design.sampling.len(),
                self.clusters.len()
            )));
        }
        if design.sampling.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(
                "known sampling probabilities must lie in [0, 1]".into(),
            ));
        }
        for arm in &self.treatment_levels {
            match design.treatment.get(arm) {
                Some(p) if (0.0..=1.0).contains(p) => {}
                Some(p) => {
                    return Err(Error::Validation(format!(
                        "known treatment probability {p} for arm {arm} is outside [0, 1]"
                    )))
                }
                None => {
                    return Err(Error::Validation(format!(
                        "known design lacks a treatment probability for arm {arm}"
                    )))
                }
            }
        }
        self.known_design = Some(design);
        Ok(self)
    }

    /// Resamples `m` whole clusters with replacement (the clustered-bootstrap
    /// unit), carrying any attached design probabilities along. The result
    /// intentionally bypasses the unique-id check: a replicate may contain
    /// the same cluster several times.
    pub(crate) fn resample(&self, indices: &[usize]) -> Self {
        let clusters = indices
            .iter()
            .map(|&j| Arc::clone(&self.clusters[j]))
            .collect();
        let known_design = self.known_design.as_ref().map(|d| KnownDesign {
            sampling: indices.iter().map(|&j| d.sampling[j]).collect(),
            treatment: d.treatment.clone(),
        });
        Self {
            clusters,
            treatment_levels: self.treatment_levels.clone(),
            known_design,
        }
    }

    /// Total number of clusters `m`.
    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    pub fn clusters(&self) -> impl ExactSizeIterator<Item = &ClusterRecord> {
        self.clusters.iter().map(Arc::as_ref)
    }

    pub fn cluster(&self, j: usize) -> &ClusterRecord {
        &self.clusters[j]
    }

    pub fn treatment_levels(&self) -> &BTreeSet<Arm> {
        &self.treatment_levels
    }

    pub fn known_design(&self) -> Option<&KnownDesign> {
        self.known_design.as_ref()
    }

    pub fn x_dim(&self) -> usize {
        self.clusters[0].x.len()
    }

    pub fn w_dim(&self) -> usize {
        self.clusters[0].w_cols
    }

    pub fn n_selected(&self) -> usize {
        self.clusters().filter(|r| r.s).count()
    }

    pub fn n_non_randomized(&self) -> usize {
        self.clusters().filter(|r| !r.s).count()
    }
}

/// One finding from [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub cluster_id: String,
    pub rule: String,
    pub message: String,
}

/// Validation output: structural violations are errors, empirical positivity
/// failures are warnings. An empty `errors` list means every downstream
/// operation accepts the dataset.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Finding>,
    pub warnings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks a dataset and reports, without mutating it.
///
/// Structural invariants are re-checked (they hold by construction for
/// datasets built through this module, but records can be assembled by hand).
/// Empirical positivity is checked on the discrete cluster-level covariates:
/// a covariate pattern present among non-randomized clusters but absent from
/// the trial leaves those clusters without randomized support and is flagged
/// as a warning, as is the absence of any s=0 cluster (estimands for the
/// non-randomized subset are then undefined).
pub fn validate(dataset: &ClusterDataset) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut seen = BTreeSet::new();
    for r in dataset.clusters() {
        if !seen.insert(r.cluster_id.clone()) {
            report.errors.push(Finding {
                cluster_id: r.cluster_id.clone(),
                rule: "unique_cluster_id".into(),
                message: format!("duplicate cluster_id {}", r.cluster_id),
            });
        }
        if r.s && (r.a.is_none() || r.y().is_none()) {
            report.errors.push(Finding {
                cluster_id: r.cluster_id.clone(),
                rule: "selected_complete".into(),
                message: "selected cluster lacks treatment or outcomes".into(),
            });
        }
        if !r.s && (r.a.is_some() || r.y().is_some()) {
            report.errors.push(Finding {
                cluster_id: r.cluster_id.clone(),
                rule: "non_randomized_clean".into(),
                message: "treatment or outcome present for non-randomized cluster".into(),
            });
        }
        if let Some(a) = r.a {
            if !dataset.treatment_levels().contains(&a) {
                report.errors.push(Finding {
                    cluster_id: r.cluster_id.clone(),
                    rule: "treatment_in_set".into(),
                    message: format!("treatment {a} is not in the declared set"),
                });
            }
        }
    }

    if dataset.n_non_randomized() == 0 {
        report.warnings.push(Finding {
            cluster_id: String::new(),
            rule: "no_non_randomized".into(),
            message: "no s=0 clusters; estimands for the non-randomized subset are undefined"
                .into(),
        });
    }

    // Empirical positivity on discrete cluster-level covariates: a column is
    // treated as discrete when every value is 0 or 1.
    let x_dim = dataset.x_dim();
    let discrete: Vec<usize> = (0..x_dim)
        .filter(|&k| dataset.clusters().all(|r| r.x[k] == 0.0 || r.x[k] == 1.0))
        .collect();
    if !discrete.is_empty() {
        let pattern =
            |r: &ClusterRecord| -> Vec<u8> { discrete.iter().map(|&k| r.x[k] as u8).collect() };
        let trial_patterns: BTreeSet<Vec<u8>> =
            dataset.clusters().filter(|r| r.s).map(pattern).collect();
        let mut flagged = BTreeSet::new();
        for r in dataset.clusters().filter(|r| !r.s) {
            let pat = pattern(r);
            if !trial_patterns.contains(&pat) && flagged.insert(pat.clone()) {
                let desc = discrete
                    .iter()
                    .zip(&pat)
                    .map(|(k, v)| format!("x_{}={}", k + 1, v))
                    .collect::<Vec<_>>()
                    .join(", ");
                report.warnings.push(Finding {
                    cluster_id: r.cluster_id.clone(),
                    rule: "positivity".into(),
                    message: format!("no randomized support for {desc}"),
                });
            }
        }
    }

    report
}

// ---------------------------------------------------------------------------
// CSV ingestion and serialization.
//
// Two files with headers:
//   clusters.csv     cluster_id, s, a, x_1..x_q [, p]
//   individuals.csv  cluster_id, w_1..w_p [, y]
// Empty strings in `a`/`y` encode absence; the optional `p` column attaches
// known-by-design sampling probabilities.
// ---------------------------------------------------------------------------

struct ClusterRow {
    id: String,
    s: bool,
    a: Option<Arm>,
    x: Vec<f64>,
    p: Option<f64>,
}

fn parse_f64(field: &str, what: &str, id: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Validation(format!("cluster {id}: non-numeric {what} value {field:?}")))
}

/// Loads a dataset from the two CSV sources, joining individuals to clusters
/// on `cluster_id`. Within each cluster, `w`/`y` keep the row order of the
/// individuals table.
pub fn load_dataset(clusters: impl Read, individuals: impl Read) -> Result<ClusterDataset> {
    let mut cluster_reader = csv::Reader::from_reader(clusters);
    let headers = cluster_reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("cluster_id")
        .ok_or_else(|| Error::Validation("clusters table lacks a cluster_id column".into()))?;
    let s_col =
        col("s").ok_or_else(|| Error::Validation("clusters table lacks an s column".into()))?;
    let a_col = col("a");
    let p_col = col("p");
    let x_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("x_"))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut rows: Vec<ClusterRow> = Vec::new();
    let mut order: BTreeMap<String, usize> = BTreeMap::new();
    for record in cluster_reader.records() {
        let record = record?;
        let id = record.get(id_col).unwrap_or_default().trim().to_string();
        if id.is_empty() {
            return Err(Error::Validation(
                "clusters table has an empty cluster_id".into(),
            ));
        }
        if order.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate cluster_id {id}")));
        }
        let s = match record.get(s_col).unwrap_or_default().trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Validation(format!(
                    "cluster {id}: s must be 0 or 1, got {other:?}"
                )))
            }
        };
        let a = match a_col.map(|c| record.get(c).unwrap_or_default().trim()) {
            None | Some("") => None,
            Some(field) => Some(Arm(field.parse::<u32>().map_err(|_| {
                Error::Validation(format!(
                    "cluster {id}: treatment label {field:?} is not an unsigned integer"
                ))
            })?)),
        };
        let mut x = Vec::with_capacity(x_cols.len());
        for (c, name) in &x_cols {
            let field = record.get(*c).unwrap_or_default();
            if field.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "cluster {id}: missing covariate cell in {name}"
                )));
            }
            x.push(parse_f64(field, name, &id)?);
        }
        let p = match p_col.map(|c| record.get(c).unwrap_or_default().trim()) {
            None | Some("") => None,
            Some(field) => Some(parse_f64(field, "p", &id)?),
        };
        order.insert(id.clone(), rows.len());
        rows.push(ClusterRow { id, s, a, x, p });
    }

    let mut individual_reader = csv::Reader::from_reader(individuals);
    let iheaders = individual_reader.headers()?.clone();
    let icol = |name: &str| iheaders.iter().position(|h| h == name);
    let iid_col = icol("cluster_id")
        .ok_or_else(|| Error::Validation("individuals table lacks a cluster_id column".into()))?;
    let y_col = icol("y");
    let w_cols: Vec<(usize, String)> = iheaders
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("w_"))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut w_by_cluster: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    let mut y_by_cluster: Vec<Vec<Option<f64>>> = vec![Vec::new(); rows.len()];
    for record in individual_reader.records() {
        let record = record?;
        let id = record.get(iid_col).unwrap_or_default().trim().to_string();
        let Some(&j) = order.get(&id) else {
            return Err(Error::Validation(format!(
                "orphan individual: cluster_id {id} does not appear in the clusters table"
            )));
        };
        for (c, name) in &w_cols {
            let field = record.get(*c).unwrap_or_default();
            if field.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "cluster {id}: missing covariate cell in {name}"
                )));
            }
            w_by_cluster[j].push(parse_f64(field, name, &id)?);
        }
        let y = match y_col.map(|c| record.get(c).unwrap_or_default().trim()) {
            None | Some("") => None,
            Some(field) => Some(parse_f64(field, "y", &id)?),
        };
        y_by_cluster[j].push(y);
    }

    let mut records = Vec::with_capacity(rows.len());
    let mut sampling = Vec::new();
    for ((row, w), ys) in rows.into_iter().zip(w_by_cluster).zip(y_by_cluster) {
        if ys.is_empty() {
            return Err(Error::Validation(format!(
                "cluster {}: no individuals found in the individuals table",
                row.id
            )));
        }
        if w_cols.is_empty() && ys.len() > 1 && ys.iter().all(Option::is_none) {
            return Err(Error::Validation(format!(
                "cluster {}: {} individuals but no w columns and no outcomes; the cluster \
                 size cannot be represented",
                row.id,
                ys.len()
            )));
        }
        let y_present = ys.iter().filter(|y| y.is_some()).count();
        let y = if y_present == 0 {
            None
        } else if y_present == ys.len() {
            Some(ys.into_iter().map(Option::unwrap).collect())
        } else {
            return Err(Error::Validation(format!(
                "cluster {}: outcomes present for {} of {} individuals; \
                 y must be all-present or all-absent within a cluster",
                row.id,
                y_present,
                ys.len()
            )));
        };
        if let Some(p) = row.p {
            sampling.push(p);
        }
        records.push(ClusterRecord::new(
            row.id,
            row.x,
            w,
            w_cols.len(),
            row.s,
            row.a,
            y,
        )?);
    }

    let has_sampling = !sampling.is_empty();
    if has_sampling && sampling.len() != records.len() {
        return Err(Error::Validation(
            "the p column must be filled for every cluster or for none".into(),
        ));
    }
    let dataset = ClusterDataset::new(records, None)?;
    if has_sampling {
        // Treatment probabilities cannot be carried by the file; default to
        // the uniform randomization over the observed arms and let callers
        // override via configuration.
        let arms = dataset.treatment_levels().clone();
        let uniform = 1.0 / arms.len().max(1) as f64;
        let treatment = arms.into_iter().map(|a| (a, uniform)).collect();
        return dataset.with_known_design(KnownDesign {
            sampling,
            treatment,
        });
    }
    Ok(dataset)
}

/// Loads a dataset from file paths.
pub fn load_dataset_from_paths(
    clusters: impl AsRef<Path>,
    individuals: impl AsRef<Path>,
) -> Result<ClusterDataset> {
    let c = std::fs::File::open(clusters.as_ref())?;
    let i = std::fs::File::open(individuals.as_ref())?;
    load_dataset(c, i)
}

/// Writes a dataset back to the two-file CSV form. Paired with
/// [`load_dataset`] this is the identity on accepted datasets.
pub fn write_dataset(
    dataset: &ClusterDataset,
    clusters: impl Write,
    individuals: impl Write,
) -> Result<()> {
    let mut cw = csv::Writer::from_writer(clusters);
    let mut header = vec!["cluster_id".to_string(), "s".into(), "a".into()];
    for k in 0..dataset.x_dim() {
        header.push(format!("x_{}", k + 1));
    }
    if dataset.known_design().is_some() {
        header.push("p".into());
    }
    cw.write_record(&header)?;
    for (j, r) in dataset.clusters().enumerate() {
        let mut row = vec![
            r.cluster_id.clone(),
            if r.s { "1" } else { "0" }.to_string(),
            r.a.map(|a| a.to_string()).unwrap_or_default(),
        ];
        for v in &r.x {
            row.push(format!("{v}"));
        }
        if let Some(d) = dataset.known_design() {
            row.push(format!("{}", d.sampling[j]));
        }
        cw.write_record(&row)?;
    }
    cw.flush()?;

    let mut iw = csv::Writer::from_writer(individuals);
    let mut header = vec!["cluster_id".to_string()];
    for k in 0..dataset.w_dim() {
        header.push(format!("w_{}", k + 1));
    }
    header.push("y".into());
    iw.write_record(&header)?;
    for r in dataset.clusters() {
        for i in 0..r.n_individuals {
            let mut row = vec![r.cluster_id.clone()];
            for v in r.w_row(i) {
                row.push(format!("{v}"));
            }
            row.push(r.y().map(|y| format!("{}", y[i])).unwrap_or_default());
            iw.write_record(&row)?;
        }
    }
    iw.flush()?;
    Ok(())
}

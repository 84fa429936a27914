//! The JSON run configuration: one document describing either an analysis of
//! user data or a simulation study. Command-line flags override the
//! top-level keys.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crtgen_core::inference::BootstrapConfig;
use crtgen_core::nuisance::NuisanceConfig;
use crtgen_core::simulation::SimulationConfig;
use crtgen_core::{EstimandTarget, EstimatorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

fn default_format() -> OutputFormat {
    OutputFormat::Both
}

fn default_output() -> PathBuf {
    PathBuf::from(".")
}

/// The top-level configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_format")]
    pub format: OutputFormat,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub analyze: Option<AnalyzeConfig>,
    #[serde(default)]
    pub simulate: Option<SimulationConfig>,
}

fn default_ci_level() -> f64 {
    0.95
}

/// Configuration for analyzing a dataset from the two-CSV format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    pub clusters: PathBuf,
    pub individuals: PathBuf,
    pub estimators: Vec<EstimatorKind>,
    pub targets: Vec<EstimandTarget>,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    /// Overrides the per-arm treatment probabilities of the known design
    /// (the CSV `p` column carries sampling probabilities only).
    #[serde(default)]
    pub known_treatment_probs: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
}

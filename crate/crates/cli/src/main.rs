//! `crtgen`: analyze a cluster-randomized-trial dataset against its target
//! population of clusters, or run the Monte-Carlo study harness.
//!
//! Exit codes: 0 success; 2 configuration or dataset-validation failure;
//! 3 estimation failure; 4 too many failed simulation runs; 1 I/O or other
//! errors. Diagnostics go to stderr, summaries to stdout.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{AnalyzeConfig, OutputFormat, RunConfig};
use crtgen_core::data_model::{load_dataset_from_paths, validate, Arm, KnownDesign};
use crtgen_core::estimators::estimate;
use crtgen_core::inference::{cluster_bootstrap, wald_interval, SeSource};
use crtgen_core::nuisance::fit_nuisance;
use crtgen_core::simulation::run_study;
use crtgen_core::{Error, EstimatorKind};

const THREADS_ENV: &str = "CRTGEN_THREADS";

#[derive(Parser)]
#[command(name = "crtgen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate target-population effects from a clusters/individuals CSV pair.
    Analyze(CommonArgs),
    /// Run the Monte-Carlo study described by the configuration.
    Simulate(SimulateArgs),
    /// Check a dataset against the structural and positivity rules.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap; defaults to the CRTGEN_THREADS variable, then to
    /// the number of cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory for the report files.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Which report files to write (default: both).
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Overrides the configured number of simulation runs.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    /// JSON run configuration holding the dataset paths under `analyze`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clusters CSV (alternative to --config).
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// Individuals CSV (alternative to --config).
    #[arg(long)]
    individuals: Option<PathBuf>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Validation(_) => 2,
        Error::Simulation(_) => 4,
        Error::Io(_) | Error::Csv(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, Error> {
    let from_env = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads.or(from_env) {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

fn write_if(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct AnalysisRow {
    population: String,
    estimand: String,
    estimator: String,
    point: f64,
    se_ic: Option<f64>,
    se_bootstrap: Option<f64>,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
    ci_level: f64,
    se_source: Option<SeSource>,
    boot_skipped: usize,
    probability_clips: u64,
}

fn cmd_analyze(args: CommonArgs) -> Result<ExitCode, Error> {
    let mut run = load_config(&args.config)?;
    if let Some(dir) = args.output {
        run.output = dir;
    }
    if let Some(format) = args.format {
        run.format = format;
    }
    if let Some(seed) = args.seed {
        run.seed = Some(seed);
    }
    let Some(analyze) = run.analyze.clone() else {
        return Err(Error::Config(
            "the configuration has no `analyze` block".into(),
        ));
    };
    let pool = thread_pool(args.threads.or(run.threads))?;
    let rows = pool.install(|| analyze_rows(&analyze, run.seed))?;

    let mut csv = String::from(
        "population,estimand,estimator,point,se_ic,se_bootstrap,ci_lo,ci_hi,ci_level,\
         se_source,boot_skipped,probability_clips\n",
    );
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut json_rows = Vec::new();
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.population,
            row.estimand,
            row.estimator,
            row.point,
            fmt_opt(row.se_ic),
            fmt_opt(row.se_bootstrap),
            fmt_opt(row.ci_lo),
            fmt_opt(row.ci_hi),
            row.ci_level,
            row.se_source
                .map(|s| format!("{s:?}").to_lowercase())
                .unwrap_or_default(),
            row.boot_skipped,
            row.probability_clips,
        ));
        json_rows.push(serde_json::json!({
            "population": row.population,
            "estimand": row.estimand,
            "estimator": row.estimator,
            "point": row.point,
            "se_ic": row.se_ic,
            "se_bootstrap": row.se_bootstrap,
            "ci_lo": row.ci_lo,
            "ci_hi": row.ci_hi,
            "ci_level": row.ci_level,
            "boot_skipped": row.boot_skipped,
            "probability_clips": row.probability_clips,
        }));
    }
    let envelope = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": { "seed": run.seed, "analyze": analyze },
        "results": json_rows,
    });
    let json = serde_json::to_string_pretty(&envelope).expect("report serialization");

    if matches!(run.format, OutputFormat::Csv | OutputFormat::Both) {
        write_if(&run.output.join("analysis.csv"), &csv)?;
    }
    if matches!(run.format, OutputFormat::Json | OutputFormat::Both) {
        write_if(&run.output.join("analysis.json"), &json)?;
    } else {
        // The CSV is plain tabular data; keep the provenance next to it.
        let meta = serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config": { "seed": run.seed, "analyze": analyze },
        });
        write_if(
            &run.output.join("analysis.meta.json"),
            &serde_json::to_string_pretty(&meta).expect("metadata serialization"),
        )?;
    }

    println!(
        "{:<16} {:>28} {:>12} {:>10} {:>10} {:>22}",
        "estimator", "estimand", "point", "se_ic", "se_boot", "ci"
    );
    for row in &rows {
        let ci = match (row.ci_lo, row.ci_hi) {
            (Some(lo), Some(hi)) => format!("[{lo:.4}, {hi:.4}]"),
            _ => "-".into(),
        };
        println!(
            "{:<16} {:>28} {:>12.5} {:>10} {:>10} {:>22}",
            row.estimator,
            format!("{} in {}", row.estimand, row.population),
            row.point,
            row.se_ic
                .map(|v| format!("{v:.5}"))
                .unwrap_or_else(|| "-".into()),
            row.se_bootstrap
                .map(|v| format!("{v:.5}"))
                .unwrap_or_else(|| "-".into()),
            ci,
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn analyze_rows(analyze: &AnalyzeConfig, seed: Option<u64>) -> Result<Vec<AnalysisRow>, Error> {
    let mut dataset = load_dataset_from_paths(&analyze.clusters, &analyze.individuals)?;
    let report = validate(&dataset);
    for warning in &report.warnings {
        eprintln!("warning: {} ({})", warning.message, warning.rule);
    }
    if !report.is_ok() {
        for error in &report.errors {
            eprintln!("validation error: {} ({})", error.message, error.rule);
        }
        return Err(Error::Validation(format!(
            "{} validation error(s)",
            report.errors.len()
        )));
    }

    if let Some(probs) = &analyze.known_treatment_probs {
        let Some(design) = dataset.known_design() else {
            return Err(Error::Config(
                "known_treatment_probs given but the clusters file has no p column to build a \
                 known design from"
                    .into(),
            ));
        };
        let mut treatment = BTreeMap::new();
        for (arm, p) in probs {
            let arm: u32 = arm
                .parse()
                .map_err(|_| Error::Config(format!("treatment label {arm:?} is not an integer")))?;
            treatment.insert(Arm(arm), *p);
        }
        let design = KnownDesign {
            sampling: design.sampling.clone(),
            treatment,
        };
        dataset = dataset.with_known_design(design)?;
    }

    if analyze.estimators.is_empty() || analyze.targets.is_empty() {
        return Err(Error::Config(
            "estimators and targets must be non-empty".into(),
        ));
    }
    let pairs: Vec<(EstimatorKind, crtgen_core::EstimandTarget)> = analyze
        .estimators
        .iter()
        .flat_map(|&kind| {
            analyze
                .targets
                .iter()
                .filter(move |t| {
                    kind == EstimatorKind::TrialOnly || t.population == kind.population()
                })
                .map(move |&t| (kind, t))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Config(
            "no estimator/target pair is compatible (check populations)".into(),
        ));
    }

    let needs_nuisance = pairs.iter().any(|(k, _)| *k != EstimatorKind::TrialOnly);
    let fitted = if needs_nuisance {
        Some(fit_nuisance(&dataset, &analyze.nuisance)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for (kind, target) in pairs {
        let mut result = estimate(&dataset, kind, target, fitted.as_ref())
            .map_err(|e| Error::Estimation(format!("{target}: {e}")))?;
        let mut boot_skipped = 0;
        if let Some(bc) = &analyze.bootstrap {
            let mut bc = bc.clone();
            if let Some(seed) = seed {
                bc.seed = seed;
            }
            let nuisance_config =
                (kind != EstimatorKind::TrialOnly).then(|| analyze.nuisance.clone());
            let boot = cluster_bootstrap(&dataset, kind, target, nuisance_config.as_ref(), &bc)
                .map_err(|e| Error::Estimation(format!("{target}: bootstrap: {e}")))?;
            result.se_bootstrap = boot.se;
            boot_skipped = boot.skipped;
        }
        // Wald interval from the bootstrap SE when available, else the
        // influence-curve SE.
        let (se, source) = match (result.se_bootstrap, result.se_ic) {
            (Some(se), _) => (Some(se), Some(SeSource::Bootstrap)),
            (None, Some(se)) => (Some(se), Some(SeSource::InfluenceCurve)),
            (None, None) => (None, None),
        };
        let ci = match (se, source) {
            (Some(se), Some(source)) => {
                let mut ci = wald_interval(result.point, se, analyze.ci_level)?;
                ci.se_source = source;
                Some(ci)
            }
            _ => None,
        };
        rows.push(AnalysisRow {
            population: target.population.to_string(),
            estimand: target.arm_or_contrast.to_string(),
            estimator: kind.name().to_string(),
            point: result.point,
            se_ic: result.se_ic,
            se_bootstrap: result.se_bootstrap,
            ci_lo: ci.map(|c| c.lo),
            ci_hi: ci.map(|c| c.hi),
            ci_level: analyze.ci_level,
            se_source: source,
            boot_skipped,
            probability_clips: result.diagnostics.probability_clips,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let mut run = load_config(&args.common.config)?;
    if let Some(dir) = args.common.output {
        run.output = dir;
    }
    if let Some(format) = args.common.format {
        run.format = format;
    }
    let Some(mut sim) = run.simulate.clone() else {
        return Err(Error::Config(
            "the configuration has no `simulate` block".into(),
        ));
    };
    if let Some(seed) = args.common.seed.or(run.seed) {
        sim.seed = seed;
    }
    if let Some(runs) = args.runs {
        sim.n_runs = runs;
    }
    sim.validate()?;

    let pool = thread_pool(args.common.threads.or(run.threads))?;
    let report = pool.install(|| run_study(&sim))?;

    if matches!(run.format, OutputFormat::Csv | OutputFormat::Both) {
        write_if(&run.output.join("simulation.csv"), &report.to_csv())?;
    }
    if matches!(run.format, OutputFormat::Json | OutputFormat::Both) {
        write_if(&run.output.join("simulation.json"), &report.to_json())?;
    } else {
        let meta = serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config": sim,
        });
        write_if(
            &run.output.join("simulation.meta.json"),
            &serde_json::to_string_pretty(&meta).expect("metadata serialization"),
        )?;
    }
    print!("{}", report.to_summary_table());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode, Error> {
    let (clusters, individuals) = match (&args.clusters, &args.individuals) {
        (Some(c), Some(i)) => (c.clone(), i.clone()),
        _ => {
            let Some(path) = &args.config else {
                return Err(Error::Config(
                    "pass --clusters and --individuals, or --config with an analyze block".into(),
                ));
            };
            let run = load_config(path)?;
            let Some(analyze) = run.analyze else {
                return Err(Error::Config(
                    "the configuration has no `analyze` block".into(),
                ));
            };
            (analyze.clusters, analyze.individuals)
        }
    };
    let dataset = load_dataset_from_paths(&clusters, &individuals)?;
    let report = validate(&dataset);
    for warning in &report.warnings {
        eprintln!("warning: {} ({})", warning.message, warning.rule);
    }
    for error in &report.errors {
        eprintln!("error: {} ({})", error.message, error.rule);
    }
    println!(
        "{} clusters ({} in trial, {} outside), {} error(s), {} warning(s)",
        dataset.m(),
        dataset.n_selected(),
        dataset.n_non_randomized(),
        report.errors.len(),
        report.warnings.len(),
    );
    if report.is_ok() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

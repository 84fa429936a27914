//! The simulated data-generating process: a cohort of clusters with one
//! binary cluster-level covariate and two individual-level covariates,
//! Bernoulli selection into the trial with covariate-dependent known
//! probabilities, cluster-level randomization, and binary individual
//! outcomes from a logistic model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, Uniform};

use super::SimulationConfig;
use crate::data_model::{Arm, ClusterDataset, ClusterRecord, KnownDesign};
use crate::error::{Error, Result};
use crate::nuisance::expit;

/// One simulated cluster before selection, treatment, and outcomes.
#[derive(Debug, Clone)]
pub struct SimCluster {
    pub n: usize,
    /// Binary cluster covariate, 0.0 or 1.0.
    pub x: f64,
    /// Latent cluster-specific means of the two individual covariates.
    pub mu: [f64; 2],
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

/// A generated cohort.
#[derive(Debug, Clone)]
pub struct SimPopulation {
    pub clusters: Vec<SimCluster>,
}

impl SimPopulation {
    pub fn m(&self) -> usize {
        self.clusters.len()
    }
}

/// Draws the baseline data: cluster sizes `N_j ~ Poisson(lambda)` truncated
/// to at least one individual, `X_j ~ Bernoulli(pr_x1)`, latent means
/// `mu ~ Uniform(-1, 1)` per covariate, and `W_k ~ Normal(mu_k, 1)`.
pub fn generate_population(config: &SimulationConfig, rng: &mut ChaCha8Rng) -> SimPopulation {
    let poisson = Poisson::new(config.mean_cluster_size).expect("validated lambda");
    let uniform = Uniform::new(-1.0f64, 1.0).expect("constant bounds");
    let mut clusters = Vec::with_capacity(config.m);
    for _ in 0..config.m {
        let n = (poisson.sample(rng) as usize).max(1);
        let x = f64::from(rng.random_bool(config.pr_x1));
        let mu = [uniform.sample(rng), uniform.sample(rng)];
        let normal1 = Normal::new(mu[0], 1.0).expect("unit sd");
        let normal2 = Normal::new(mu[1], 1.0).expect("unit sd");
        let w1 = (0..n).map(|_| normal1.sample(rng)).collect();
        let w2 = (0..n).map(|_| normal2.sample(rng)).collect();
        clusters.push(SimCluster { n, x, mu, w1, w2 });
    }
    SimPopulation { clusters }
}

/// The known-by-design sampling scheme: per-stratum probabilities
/// `p(x) = (Pr[S=1] / Pr_hat[X=x]) * Pr[X=x | S=1]`, with the marginal
/// `Pr_hat[X=x]` estimated from the generated cohort.
#[derive(Debug, Clone)]
pub struct SamplingDesign {
    /// `Pr[S = 1] = trial_size / m`.
    pub pr_s1: f64,
    /// Sampling probability for the `x = 0` and `x = 1` strata.
    pub p_by_stratum: [f64; 2],
    /// Per-cluster probabilities, aligned with the population.
    pub per_cluster: Vec<f64>,
}

/// Computes the per-cluster sampling probabilities for an expected trial
/// size and a desired `Pr[X = 1 | S = 1]`. Errors when a stratum's derived
/// probability leaves `(0, 1]`.
pub fn compute_sampling_probabilities(
    population: &SimPopulation,
    trial_size: f64,
    trial_x_share: f64,
) -> Result<SamplingDesign> {
    let m = population.m();
    let pr_s1 = trial_size / m as f64;
    let n_x1 = population.clusters.iter().filter(|c| c.x == 1.0).count();
    let pr_x = [(m - n_x1) as f64 / m as f64, n_x1 as f64 / m as f64];
    let share = [1.0 - trial_x_share, trial_x_share];
    let mut p_by_stratum = [0.0; 2];
    for x in 0..2 {
        if share[x] == 0.0 {
            // A stratum excluded from the trial by design keeps p = 0.
            continue;
        }
        if pr_x[x] == 0.0 {
            return Err(Error::Config(format!(
                "stratum x={x} has positive desired trial share {} but no clusters in the cohort",
                share[x]
            )));
        }
        let p = pr_s1 / pr_x[x] * share[x];
        if !(0.0 < p && p <= 1.0) {
            return Err(Error::Config(format!(
                "derived sampling probability {p:.6} for stratum x={x} is outside (0, 1]; \
                 adjust trial_size or trial_x_share"
            )));
        }
        p_by_stratum[x] = p;
    }
    let per_cluster = population
        .clusters
        .iter()
        .map(|c| p_by_stratum[c.x as usize])
        .collect();
    Ok(SamplingDesign {
        pr_s1,
        p_by_stratum,
        per_cluster,
    })
}

/// Selection and treatment assignment for one cohort.
#[derive(Debug, Clone)]
pub struct TrialAssignment {
    pub s: Vec<bool>,
    /// Present exactly for selected clusters.
    pub a: Vec<Option<Arm>>,
}

/// Bernoulli selection with the design probabilities, then Bernoulli
/// treatment assignment among selected clusters. The realized trial size is
/// random.
pub fn sample_trial_and_assign(
    population: &SimPopulation,
    design: &SamplingDesign,
    treatment_prob: f64,
    rng: &mut ChaCha8Rng,
) -> TrialAssignment {
    let mut s = Vec::with_capacity(population.m());
    let mut a = Vec::with_capacity(population.m());
    for (cluster, &p) in population.clusters.iter().zip(&design.per_cluster) {
        let _ = cluster;
        let selected = rng.random_bool(p);
        s.push(selected);
        a.push(selected.then(|| Arm(u32::from(rng.random_bool(treatment_prob)))));
    }
    TrialAssignment { s, a }
}

/// The outcome model's linear predictor for one individual under `arm`.
pub fn linear_predictor(arm: Arm, x: f64, w1: f64, w2: f64) -> f64 {
    let sign = 2.0 * f64::from(arm.0.min(1)) - 1.0;
    sign * x + 0.5 * sign * w1 + 0.5 * sign * w2
}

/// Both potential outcome vectors of one cluster and their means.
#[derive(Debug, Clone)]
pub struct PotentialOutcomes {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub mean1: f64,
    pub mean0: f64,
}

// One uniform draw per individual feeds both the observed-outcome and the
// potential-outcome generators, in the same cluster-major order. Outcome
// consistency (the observed vector equals the potential vector of the
// assigned arm) therefore holds mechanically when both are invoked with
// identically seeded streams.

/// Observed outcomes for the selected clusters: `Y = 1` iff the individual's
/// uniform draw falls below `expit(L)` under the assigned arm. One uniform is
/// consumed per individual of every cluster, selected or not.
pub fn generate_outcomes(
    population: &SimPopulation,
    assignment: &TrialAssignment,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<Vec<f64>>> {
    population
        .clusters
        .iter()
        .zip(&assignment.a)
        .map(|(cluster, arm)| match arm {
            Some(arm) => {
                let y = (0..cluster.n)
                    .map(|i| {
                        let u: f64 = rng.random();
                        let l = linear_predictor(*arm, cluster.x, cluster.w1[i], cluster.w2[i]);
                        f64::from(u < expit(l))
                    })
                    .collect();
                Some(y)
            }
            None => {
                for _ in 0..cluster.n {
                    let _: f64 = rng.random();
                }
                None
            }
        })
        .collect()
}

/// Both potential outcome vectors per cluster, from the same uniform stream
/// as [`generate_outcomes`].
pub fn generate_potential_outcomes(
    population: &SimPopulation,
    rng: &mut ChaCha8Rng,
) -> Vec<PotentialOutcomes> {
    population
        .clusters
        .iter()
        .map(|cluster| {
            let mut y1 = Vec::with_capacity(cluster.n);
            let mut y0 = Vec::with_capacity(cluster.n);
            for i in 0..cluster.n {
                let u: f64 = rng.random();
                let l1 = linear_predictor(Arm(1), cluster.x, cluster.w1[i], cluster.w2[i]);
                let l0 = linear_predictor(Arm(0), cluster.x, cluster.w1[i], cluster.w2[i]);
                y1.push(f64::from(u < expit(l1)));
                y0.push(f64::from(u < expit(l0)));
            }
            let mean1 = y1.iter().sum::<f64>() / cluster.n as f64;
            let mean0 = y0.iter().sum::<f64>() / cluster.n as f64;
            PotentialOutcomes {
                y1,
                y0,
                mean1,
                mean0,
            }
        })
        .collect()
}

/// Assembles the analysis dataset: covariates for everyone, treatment and
/// outcomes for selected clusters, and the known design attached.
pub fn assemble_dataset(
    population: &SimPopulation,
    assignment: &TrialAssignment,
    outcomes: Vec<Option<Vec<f64>>>,
    design: &SamplingDesign,
    treatment_prob: f64,
) -> Result<ClusterDataset> {
    let mut records = Vec::with_capacity(population.m());
    for (j, cluster) in population.clusters.iter().enumerate() {
        let mut w = Vec::with_capacity(cluster.n * 2);
        for i in 0..cluster.n {
            w.push(cluster.w1[i]);
            w.push(cluster.w2[i]);
        }
        records.push(ClusterRecord::new(
            format!("sim{j}"),
            vec![cluster.x],
            w,
            2,
            assignment.s[j],
            assignment.a[j],
            outcomes[j].clone(),
        )?);
    }
    let dataset = ClusterDataset::new(records, Some([Arm(0), Arm(1)].into()))?;
    dataset.with_known_design(KnownDesign {
        sampling: design.per_cluster.clone(),
        treatment: [(Arm(1), treatment_prob), (Arm(0), 1.0 - treatment_prob)].into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamLabel};
    use crate::simulation::SimulationConfig;

    fn paper_config() -> SimulationConfig {
        SimulationConfig::paper_defaults()
    }

    #[test]
    fn population_moments_match_design() {
        let config = paper_config();
        let mut rng = stream(11, StreamLabel::Population, 0);
        let pop = generate_population(&config, &mut rng);
        assert_eq!(pop.m(), 5000);

        // Mean cluster size: Poisson(100), se over 5000 clusters = sqrt(100/5000) = 0.141.
        let mean_n: f64 = pop.clusters.iter().map(|c| c.n as f64).sum::<f64>() / pop.m() as f64;
        assert!(
            (mean_n - 100.0).abs() < 3.0 * (100.0f64 / 5000.0).sqrt(),
            "mean n {mean_n}"
        );

        // Share of x = 1: Bernoulli(0.05), 3-sigma band.
        let share_x1: f64 = pop.clusters.iter().map(|c| c.x).sum::<f64>() / pop.m() as f64;
        let sd = (0.05f64 * 0.95 / 5000.0).sqrt();
        assert!((share_x1 - 0.05).abs() < 3.0 * sd, "share {share_x1}");

        // Within-cluster variance of w1 is 1 on average.
        let mut mean_var = 0.0;
        let mut counted = 0usize;
        for c in &pop.clusters {
            if c.n < 2 {
                continue;
            }
            let mean = c.w1.iter().sum::<f64>() / c.n as f64;
            let var =
                c.w1.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (c.n as f64 - 1.0);
            mean_var += var;
            counted += 1;
        }
        mean_var /= counted as f64;
        assert!(
            (mean_var - 1.0).abs() < 0.05,
            "mean within-cluster var {mean_var}"
        );
    }

    #[test]
    fn sampling_probabilities_match_worked_example() {
        // Force the empirical X margin to exactly 5%.
        let mut config = paper_config();
        config.trial_size = 50.0;
        let clusters: Vec<SimCluster> = (0..5000)
            .map(|j| SimCluster {
                n: 1,
                x: f64::from(j < 250),
                mu: [0.0, 0.0],
                w1: vec![0.0],
                w2: vec![0.0],
            })
            .collect();
        let pop = SimPopulation { clusters };
        let design = compute_sampling_probabilities(&pop, 50.0, 0.5).unwrap();
        assert!((design.p_by_stratum[1] - 0.1).abs() < 1e-12);
        assert!((design.p_by_stratum[0] - (50.0 / 5000.0) / 0.95 * 0.5).abs() < 1e-12);
        assert!((design.p_by_stratum[0] - 0.00526).abs() < 1e-4);
        assert_eq!(design.pr_s1, 0.01);
    }

    #[test]
    fn impossible_share_is_a_config_error() {
        let clusters: Vec<SimCluster> = (0..5000)
            .map(|j| SimCluster {
                n: 1,
                x: f64::from(j < 250),
                mu: [0.0, 0.0],
                w1: vec![0.0],
                w2: vec![0.0],
            })
            .collect();
        let pop = SimPopulation { clusters };
        // p(x=1) = (500/5000)/0.05 * 1.0 = 2 > 1.
        let err = compute_sampling_probabilities(&pop, 500.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("x=1"), "{err}");
    }

    #[test]
    fn realized_trial_size_tracks_expectation() {
        let config = paper_config();
        let mut rng = stream(3, StreamLabel::Population, 1);
        let pop = generate_population(&config, &mut rng);
        let design = compute_sampling_probabilities(&pop, 250.0, 0.5).unwrap();
        let expected: f64 = design.per_cluster.iter().sum();
        assert!((expected - 250.0).abs() < 1e-9, "sum of p_j = {expected}");

        let mut rng = stream(3, StreamLabel::TrialSelection, 1);
        let assignment = sample_trial_and_assign(&pop, &design, 0.5, &mut rng);
        let realized = assignment.s.iter().filter(|&&s| s).count() as f64;
        // 3-sigma band around the expected size.
        let sd: f64 = design
            .per_cluster
            .iter()
            .map(|p| p * (1.0 - p))
            .sum::<f64>()
            .sqrt();
        assert!((realized - 250.0).abs() < 3.0 * sd, "realized {realized}");

        // Share of x=1 among selected near 0.5, and randomization near 0.5.
        let selected: Vec<usize> = (0..pop.m()).filter(|&j| assignment.s[j]).collect();
        let x_share =
            selected.iter().map(|&j| pop.clusters[j].x).sum::<f64>() / selected.len() as f64;
        assert!(
            (x_share - 0.5).abs() < 0.12,
            "x share among trial {x_share}"
        );
        let arm1 = selected
            .iter()
            .filter(|&&j| assignment.a[j] == Some(Arm(1)))
            .count() as f64;
        let p_hat = arm1 / selected.len() as f64;
        let sd = (0.25 / selected.len() as f64).sqrt();
        assert!((p_hat - 0.5).abs() < 3.0 * sd, "Pr[A=1|S=1] {p_hat}");
    }

    #[test]
    fn all_probabilities_one_selects_everyone() {
        let clusters: Vec<SimCluster> = (0..40)
            .map(|_| SimCluster {
                n: 2,
                x: 0.0,
                mu: [0.0, 0.0],
                w1: vec![0.0; 2],
                w2: vec![0.0; 2],
            })
            .collect();
        let pop = SimPopulation { clusters };
        let design = SamplingDesign {
            pr_s1: 1.0,
            p_by_stratum: [1.0, 1.0],
            per_cluster: vec![1.0; 40],
        };
        let mut rng = stream(5, StreamLabel::TrialSelection, 0);
        let assignment = sample_trial_and_assign(&pop, &design, 0.5, &mut rng);
        assert!(assignment.s.iter().all(|&s| s));
    }

    #[test]
    fn linear_predictor_examples() {
        // A=1, X=1, W=0: expit(1).
        let l = linear_predictor(Arm(1), 1.0, 0.0, 0.0);
        assert!((expit(l) - 0.731_058_578_630_004_9).abs() < 1e-12);
        // A=0, X=0, W=0: probability one half.
        let l = linear_predictor(Arm(0), 0.0, 0.0, 0.0);
        assert_eq!(expit(l), 0.5);
        // Flipping the arm negates the predictor.
        for (x, w1, w2) in [(0.0, 0.3, -0.8), (1.0, -1.2, 0.4), (1.0, 0.0, 2.0)] {
            let l1 = linear_predictor(Arm(1), x, w1, w2);
            let l0 = linear_predictor(Arm(0), x, w1, w2);
            assert_eq!(l1, -l0);
        }
    }

    #[test]
    fn observed_outcomes_equal_assigned_potential_outcomes() {
        let mut config = paper_config();
        config.m = 300;
        config.mean_cluster_size = 10.0;
        config.pr_x1 = 0.2;
        let mut rng = stream(7, StreamLabel::Population, 0);
        let pop = generate_population(&config, &mut rng);
        let design = compute_sampling_probabilities(&pop, 60.0, 0.5).unwrap();
        let mut rng = stream(7, StreamLabel::TrialSelection, 0);
        let assignment = sample_trial_and_assign(&pop, &design, 0.5, &mut rng);

        // Identically seeded outcome streams for both generators.
        let mut rng_obs = stream(7, StreamLabel::Outcomes, 0);
        let mut rng_pot = stream(7, StreamLabel::Outcomes, 0);
        let observed = generate_outcomes(&pop, &assignment, &mut rng_obs);
        let potentials = generate_potential_outcomes(&pop, &mut rng_pot);

        let mut checked = 0;
        for j in 0..pop.m() {
            if let (Some(y), Some(arm)) = (&observed[j], assignment.a[j]) {
                let expected = if arm == Arm(1) {
                    &potentials[j].y1
                } else {
                    &potentials[j].y0
                };
                assert_eq!(y, expected, "cluster {j}");
                checked += 1;
            }
        }
        assert!(
            checked > 10,
            "too few selected clusters to exercise consistency"
        );
    }
}

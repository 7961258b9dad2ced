//! Train/test protocol, accuracy statistics, Welch significance test and
//! the candidate-vote nearest-neighbor baseline.
//!
//! An experiment runs one method over several seeds; each seed draws a
//! fresh stratified 80/20 split, trains on the first part and scores
//! accuracy on the second. Seeds execute as independent threads sharing
//! only the read-only dataset; results aggregate in seed order so reports
//! are reproducible.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::PllDataset;
use crate::error::{Error, Result};
use crate::models::{argmax, shuffle};
use crate::tensor::special::reg_inc_beta;
use crate::train::{fit, fit_ablation, predict_labels, TrainConfig};

/// PLL training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vipll,
    VipllAblation,
    Plknn,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vipll" => Ok(Method::Vipll),
            "vipll_ablation" => Ok(Method::VipllAblation),
            "plknn" => Ok(Method::Plknn),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected vipll, vipll_ablation or plknn)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Vipll => "vipll",
            Method::VipllAblation => "vipll_ablation",
            Method::Plknn => "plknn",
        })
    }
}

/// Experiment-level settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_seeds: usize,
    pub k_neighbors: usize,
    pub test_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_seeds: 5,
            k_neighbors: 10,
            test_fraction: 0.2,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds < 1 {
            return Err(Error::Config("n_seeds must be >= 1".to_string()));
        }
        if self.k_neighbors < 1 {
            return Err(Error::Config("k_neighbors must be >= 1".to_string()));
        }
        if !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Fraction of exact argmax matches.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions for {} labels", predictions.len(), truth.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::shape("accuracy", "empty prediction list".to_string()));
    }
    Ok(predictions.iter().zip(truth).filter(|(p, t)| p == t).count() as f64
        / predictions.len() as f64)
}

fn mean_var(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = if sample.len() > 1 {
        sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Welch's unequal-variance two-sided t-test: returns (t, dof, p). Both
/// samples degenerate: equal means give p = 1, unequal means p = 0.
pub fn welch_ttest(sample_a: &[f64], sample_b: &[f64]) -> Result<(f64, f64, f64)> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(Error::Config(format!(
            "welch_ttest needs at least two values per sample, got {} and {}",
            sample_a.len(),
            sample_b.len()
        )));
    }
    let (ma, va) = mean_var(sample_a);
    let (mb, vb) = mean_var(sample_b);
    let sa = va / sample_a.len() as f64;
    let sb = vb / sample_b.len() as f64;
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            (0.0, f64::INFINITY, 1.0)
        } else {
            (f64::INFINITY * (ma - mb).signum(), f64::INFINITY, 0.0)
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / (sa * sa / (sample_a.len() as f64 - 1.0) + sb * sb / (sample_b.len() as f64 - 1.0));
    // two-sided p through the regularized incomplete beta function
    let p = reg_inc_beta(0.5 * dof, 0.5, dof / (dof + t * t));
    Ok((t, dof, p))
}

/// Candidate-vote k-nearest-neighbor prediction: each neighbor contributes
/// its candidate indicator normalized by its set size; ties in the final
/// vote go to the smallest class index.
pub fn plknn(train: &PllDataset, query: &[f64], k_neighbors: usize) -> Result<Vec<f64>> {
    if train.n == 0 {
        return Err(Error::Config("plknn requires a non-empty training set".to_string()));
    }
    if query.len() != train.d {
        return Err(Error::shape(
            "plknn",
            format!("query has {} dims, dataset has {}", query.len(), train.d),
        ));
    }
    let mut dists: Vec<(f64, usize)> = (0..train.n)
        .map(|i| {
            let d2: f64 = train
                .feature_row(i)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2, i)
        })
        .collect();
    let k = k_neighbors.min(train.n);
    dists.select_nth_unstable_by(k - 1, |a, b| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
    });
    let mut votes = vec![0.0; train.k];
    let mut neighbors: Vec<usize> = dists[..k].iter().map(|&(_, i)| i).collect();
    neighbors.sort_unstable();
    for i in neighbors {
        let size = train.candidate_count(i) as f64;
        for (j, &inside) in train.candidates(i).iter().enumerate() {
            if inside {
                votes[j] += 1.0 / size;
            }
        }
    }
    let total: f64 = votes.iter().sum();
    for v in &mut votes {
        *v /= total;
    }
    Ok(votes)
}

/// Deterministic stratification key: the true label when available,
/// otherwise a hash of the candidate mask.
fn stratum_key(ds: &PllDataset, i: usize) -> u64 {
    match &ds.true_labels {
        Some(labels) => labels[i] as u64,
        None => {
            let mut hasher = std::collections::hash_map::DefaultHasher::new();
            ds.candidates(i).hash(&mut hasher);
            hasher.finish()
        }
    }
}

/// Disjoint covering train/test split, stratified per key; the per-class
/// test share stays within rounding of `test_fraction`.
pub fn stratified_split<R: Rng + ?Sized>(
    ds: &PllDataset,
    test_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for i in 0..ds.n {
        groups.entry(stratum_key(ds, i)).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for group in groups.values_mut() {
        shuffle(group, rng);
        let n_test = ((group.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(group.len());
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    if test.is_empty() && !train.is_empty() {
        test.push(train.pop().expect("non-empty"));
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Accuracy and timing of one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub accuracy: f64,
    pub wall_s: f64,
}

/// Aggregated multi-seed result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub master_seed: u64,
    pub runs: Vec<SeedRun>,
    pub mean: f64,
    /// Sample standard deviation (ddof = 1).
    pub std: f64,
    pub config: TrainConfig,
    pub eval: EvalConfig,
}

impl RunReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }

    /// The stored mean/std must match a recomputation from the per-seed
    /// accuracies.
    pub fn check_invariants(&self) -> Result<()> {
        let acc = self.accuracies();
        let (mean, var) = mean_var(&acc);
        if (mean - self.mean).abs() > 1e-12 || (var.sqrt() - self.std).abs() > 1e-12 {
            return Err(Error::Numeric(format!(
                "report aggregation mismatch: stored ({}, {}), recomputed ({}, {})",
                self.mean,
                self.std,
                mean,
                var.sqrt()
            )));
        }
        Ok(())
    }
}

fn seed_for_run(master: u64, index: usize) -> u64 {
    master.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_one_seed(
    ds: &PllDataset,
    method: Method,
    config: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<SeedRun> {
    let started = Instant::now();
    let mut split_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5EED_5EED_5EED_5EED);
    let (train_idx, test_idx) = stratified_split(ds, eval.test_fraction, &mut split_rng);
    let train_ds = ds.subset(&train_idx)?;
    let test_ds = ds.subset(&test_idx)?;
    let truth = test_ds
        .true_labels
        .clone()
        .ok_or_else(|| Error::Config("evaluation requires true labels".to_string()))?;

    let acc = match method {
        Method::Vipll | Method::VipllAblation => {
            let mut config = config.clone();
            config.seed = seed;
            let mut result = if method == Method::Vipll {
                fit(&train_ds, &config, None)?
            } else {
                fit_ablation(&train_ds, &config, None)?
            };
            let preds = predict_labels(&mut result.classifier, &test_ds.features)?;
            accuracy(&preds, &truth)?
        }
        Method::Plknn => {
            let preds: Vec<usize> = (0..test_ds.n)
                .map(|i| {
                    plknn(&train_ds, test_ds.feature_row(i), eval.k_neighbors).map(|v| argmax(&v))
                })
                .collect::<Result<_>>()?;
            accuracy(&preds, &truth)?
        }
    };
    Ok(SeedRun {
        seed,
        accuracy: acc,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

/// Train and score `method` over `eval.n_seeds` independent seeds derived
/// from `config.seed`; seeds run concurrently.
pub fn run_experiment(
    ds: &PllDataset,
    method: Method,
    config: &TrainConfig,
    eval: &EvalConfig,
) -> Result<RunReport> {
    config.validate()?;
    eval.validate()?;
    if ds.true_labels.is_none() {
        return Err(Error::Config(
            "run_experiment requires a dataset with true labels".to_string(),
        ));
    }
    let seeds: Vec<u64> = (0..eval.n_seeds).map(|i| seed_for_run(config.seed, i)).collect();
    let runs: Vec<Result<SeedRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| scope.spawn(move || run_one_seed(ds, method, config, eval, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Numeric("worker thread panicked".to_string())))
            })
            .collect()
    });
    let runs: Vec<SeedRun> = runs.into_iter().collect::<Result<_>>()?;
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let (mean, var) = mean_var(&acc);
    Ok(RunReport {
        method,
        master_seed: config.seed,
        runs,
        mean,
        std: var.sqrt(),
        config: config.clone(),
        eval: eval.clone(),
    })
}

/// Flags, per report, whether the method is not significantly worse than
/// the best mean at level 0.05 (the best method is always flagged). With a
/// single seed per method the test is skipped and only the best is marked.
pub fn not_significantly_worse(reports: &[&RunReport], level: f64) -> Result<Vec<bool>> {
    if reports.is_empty() {
        return Ok(Vec::new());
    }
    let best = reports
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.mean.partial_cmp(&b.1.mean).expect("finite means"))
        .map(|(i, _)| i)
        .expect("non-empty");
    let best_acc = reports[best].accuracies();
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if i == best {
                return Ok(true);
            }
            if best_acc.len() < 2 || r.runs.len() < 2 {
                return Ok(false);
            }
            let (_, _, p) = welch_ttest(&r.accuracies(), &best_acc)?;
            Ok(p >= level)
        })
        .collect()
}

//! Candidate-label generation for supervised datasets.
//!
//! A supervised probe classifier is trained on the true labels; each
//! incorrect label is then added to an instance's candidate set with a
//! probability built from the probe's confusion (instance-dependent part)
//! and, optionally, a long-tail schedule over a random class permutation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{shuffle, SoftmaxMlp};

use super::PllDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GenStrategy {
    /// Probe-confusion flipping probability only.
    InstanceDependent,
    /// Mix of the instance-dependent probability and a long-tail class
    /// schedule.
    #[default]
    LongtailMix,
}

/// Candidate-generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub strategy: GenStrategy,
    /// Weights of the (instance-dependent, long-tail) mixture.
    pub mix_weights: (f64, f64),
    /// Base of the long-tail schedule: rank r gets tail_base^((r+1)/k).
    pub tail_base: f64,
    /// Seed for probe training and the class permutation.
    pub probe_seed: u64,
    /// Explicit class permutation (rank per class); random when absent.
    pub permutation: Option<Vec<usize>>,
    /// Probe MLP width, epochs, learning rate and batch size.
    pub probe_hidden: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            strategy: GenStrategy::LongtailMix,
            mix_weights: (0.3, 0.7),
            tail_base: 0.025,
            probe_seed: 0,
            permutation: None,
            probe_hidden: 256,
            probe_epochs: 50,
            probe_lr: 1e-3,
            probe_batch: 256,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let (w1, w2) = self.mix_weights;
        if (w1 + w2 - 1.0).abs() > 1e-9 || w1 < 0.0 || w2 < 0.0 {
            return Err(Error::Config(format!(
                "mix weights must be non-negative and sum to 1, got ({w1}, {w2})"
            )));
        }
        if !(0.0 < self.tail_base && self.tail_base < 1.0) {
            return Err(Error::Config(format!(
                "tail_base must lie in (0, 1), got {}",
                self.tail_base
            )));
        }
        if self.probe_hidden == 0 || self.probe_epochs == 0 || self.probe_batch == 0 {
            return Err(Error::Config("probe settings must be positive".to_string()));
        }
        Ok(())
    }
}

/// Long-tail add probability for a class of the given permutation rank
/// (0-based): tail_base^((rank + 1) / k).
pub fn longtail_prob(tail_base: f64, rank: usize, k: usize) -> f64 {
    tail_base.powf((rank as f64 + 1.0) / k as f64)
}

/// Train the probe classifier on (features, true labels).
pub fn train_probe(ds: &PllDataset, spec: &GenSpec) -> Result<SoftmaxMlp> {
    let labels = ds
        .true_labels
        .as_ref()
        .ok_or_else(|| Error::Config("candidate generation requires true labels".to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.probe_seed);
    let mut probe = SoftmaxMlp::new(ds.d, ds.k, spec.probe_hidden, spec.probe_lr, &mut rng);
    probe.train_supervised(&ds.features, labels, spec.probe_epochs, spec.probe_batch, &mut rng)?;
    Ok(probe)
}

/// Instance-dependent flipping probability: the probe's confidence in the
/// wrong label relative to its strongest alternative. Can exceed 1 when the
/// probe misclassifies; the final mixed probability is clipped to [0, 1]
/// before the Bernoulli draw.
fn xi1(proba_row: &[f64], wrong: usize) -> f64 {
    let mut top_other = 0.0_f64;
    for (j, &p) in proba_row.iter().enumerate() {
        if j != wrong {
            top_other = top_other.max(p);
        }
    }
    if top_other <= 0.0 {
        return 1.0;
    }
    proba_row[wrong] / top_other
}

/// Replace the candidate sets of a fully labeled dataset: the true label is
/// always kept; every wrong label joins independently with probability
/// xi(x, wrong).
pub fn generate_candidates<R: Rng + ?Sized>(
    ds: &PllDataset,
    spec: &GenSpec,
    rng: &mut R,
) -> Result<PllDataset> {
    spec.validate()?;
    let labels = ds
        .true_labels
        .as_ref()
        .ok_or_else(|| Error::Config("candidate generation requires true labels".to_string()))?;
    let k = ds.k;

    let mut probe = train_probe(ds, spec)?;
    let proba = probe.predict_proba(&ds.features)?;

    // rank per class under the (possibly random) permutation
    let rank: Vec<usize> = match &spec.permutation {
        Some(p) => {
            if p.len() != k || {
                let mut seen = vec![false; k];
                p.iter().any(|&r| r >= k || std::mem::replace(&mut seen[r], true))
            } {
                return Err(Error::Config(format!("invalid class permutation {p:?}")));
            }
            p.clone()
        }
        None => {
            let mut perm_rng = ChaCha20Rng::seed_from_u64(spec.probe_seed.wrapping_add(1));
            let mut r: Vec<usize> = (0..k).collect();
            shuffle(&mut r, &mut perm_rng);
            r
        }
    };

    let (w1, w2) = spec.mix_weights;
    let mut candidates = vec![false; ds.n * k];
    for i in 0..ds.n {
        let y = labels[i];
        candidates[i * k + y] = true;
        let row = proba.row(i);
        for wrong in 0..k {
            if wrong == y {
                continue;
            }
            let xi = match spec.strategy {
                GenStrategy::InstanceDependent => xi1(row, wrong),
                GenStrategy::LongtailMix => {
                    w1 * xi1(row, wrong) + w2 * longtail_prob(spec.tail_base, rank[wrong], k)
                }
            }
            .clamp(0.0, 1.0);
            let w: f64 = rng.random();
            if w <= xi {
                candidates[i * k + wrong] = true;
            }
        }
    }
    PllDataset::new(ds.features.clone(), candidates, Some(labels.clone()), k)
}

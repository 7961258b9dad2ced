//! Dataset ingestion, synthetic benchmarks, candidate-label generation and
//! candidate co-occurrence statistics.

pub mod cooc;
pub mod format;
pub mod generate;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cooc::{cooccurrence, cooccurrence_normalized};
pub use format::{load_dataset, save_dataset};
pub use generate::{generate_candidates, GenSpec, GenStrategy};
pub use synth::synth_blobs;

/// A partially-labeled dataset: features, per-instance candidate bitmasks
/// and (optionally) hidden true labels used for generation and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PllDataset {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    /// Row-major [n, d] feature matrix.
    pub features: Tensor,
    /// Flat [n, k] candidate masks.
    candidates: Vec<bool>,
    /// Class index per instance, when known. Hidden from training.
    pub true_labels: Option<Vec<usize>>,
}

impl PllDataset {
    pub fn new(
        features: Tensor,
        candidates: Vec<bool>,
        true_labels: Option<Vec<usize>>,
        k: usize,
    ) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape(
                "dataset",
                format!("features must be [n, d], got {:?}", features.shape()),
            ));
        }
        let n = features.shape()[0];
        let d = features.shape()[1];
        if candidates.len() != n * k {
            return Err(Error::shape(
                "dataset",
                format!("candidate mask has {} entries, want n*k = {}", candidates.len(), n * k),
            ));
        }
        if !features.all_finite() {
            return Err(Error::Numeric("dataset features contain non-finite values".into()));
        }
        let ds = PllDataset {
            n,
            d,
            k,
            features,
            candidates,
            true_labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            let mask = self.candidates(i);
            if !mask.iter().any(|&b| b) {
                return Err(Error::domain(
                    "dataset",
                    format!("instance {i} has an empty candidate set"),
                ));
            }
        }
        if let Some(labels) = &self.true_labels {
            if labels.len() != self.n {
                return Err(Error::shape(
                    "dataset",
                    format!("{} labels for {} instances", labels.len(), self.n),
                ));
            }
            for (i, &y) in labels.iter().enumerate() {
                if y >= self.k {
                    return Err(Error::domain(
                        "dataset",
                        format!("instance {i}: label {y} out of range for k = {}", self.k),
                    ));
                }
                if !self.candidates(i)[y] {
                    return Err(Error::domain(
                        "dataset",
                        format!("instance {i}: true label {y} missing from its candidate set"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn candidates(&self, i: usize) -> &[bool] {
        &self.candidates[i * self.k..(i + 1) * self.k]
    }

    pub fn candidate_masks(&self) -> &[bool] {
        &self.candidates
    }

    /// Candidate masks as a 0/1 float matrix [n, k].
    pub fn candidate_matrix(&self) -> Tensor {
        let data: Vec<f64> = self.candidates.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(&[self.n, self.k], data).expect("mask length checked at construction")
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn candidate_count(&self, i: usize) -> usize {
        self.candidates(i).iter().filter(|&&b| b).count()
    }

    pub fn avg_candidates(&self) -> f64 {
        (0..self.n).map(|i| self.candidate_count(i)).sum::<usize>() as f64 / self.n as f64
    }

    /// Copy of the rows in `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<PllDataset> {
        let mut features = Vec::with_capacity(idx.len() * self.d);
        let mut candidates = Vec::with_capacity(idx.len() * self.k);
        let mut labels = self.true_labels.as_ref().map(|_| Vec::with_capacity(idx.len()));
        for &i in idx {
            if i >= self.n {
                return Err(Error::shape("subset", format!("index {i} out of range")));
            }
            features.extend_from_slice(self.feature_row(i));
            candidates.extend_from_slice(self.candidates(i));
            if let (Some(out), Some(src)) = (&mut labels, &self.true_labels) {
                out.push(src[i]);
            }
        }
        PllDataset::new(
            Tensor::from_vec(&[idx.len(), self.d], features)?,
            candidates,
            labels,
            self.k,
        )
    }
}

//! Candidate co-occurrence statistics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::PllDataset;

/// Co-occurrence counts: entry (y, wrong) counts instances with true label
/// y whose candidate set contains the incorrect label `wrong`; the diagonal
/// holds the class counts.
pub fn cooccurrence(ds: &PllDataset) -> Result<Tensor> {
    let labels = ds
        .true_labels
        .as_ref()
        .ok_or_else(|| Error::Config("co-occurrence requires true labels".to_string()))?;
    let k = ds.k;
    let mut counts = Tensor::zeros(&[k, k]);
    for (i, &y) in labels.iter().enumerate() {
        counts.data_mut()[y * k + y] += 1.0;
        for (j, &inside) in ds.candidates(i).iter().enumerate() {
            if inside && j != y {
                counts.data_mut()[y * k + j] += 1.0;
            }
        }
    }
    Ok(counts)
}

/// Row-normalized co-occurrence matrix (each row divided by its class
/// count) for plotting.
pub fn cooccurrence_normalized(ds: &PllDataset) -> Result<Tensor> {
    let counts = cooccurrence(ds)?;
    let k = ds.k;
    let mut out = counts.clone();
    for y in 0..k {
        let total = counts.at(y, y).max(1.0);
        for j in 0..k {
            out.data_mut()[y * k + j] /= total;
        }
    }
    Ok(out)
}

//! Synthetic Gaussian-blob benchmark.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::shuffle;
use crate::tensor::Tensor;

use super::PllDataset;

/// Isotropic unit-variance Gaussian clusters with means on a scaled sphere.
///
/// `separation` is the sphere radius in units of the cluster standard
/// deviation; zero puts every mean at the origin. Labels are balanced and
/// rows are shuffled, all driven by `rng`. Candidate sets start as the
/// true-label singletons.
pub fn synth_blobs<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    d: usize,
    separation: f64,
    rng: &mut R,
) -> Result<PllDataset> {
    if k < 2 || d < 2 {
        return Err(Error::Config(format!("synth_blobs requires k >= 2 and d >= 2, got k={k}, d={d}")));
    }
    if n == 0 {
        return Err(Error::Config("synth_blobs requires n >= 1".to_string()));
    }
    let means = cluster_means(k, d, separation, rng);

    // balanced labels, shuffled
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    shuffle(&mut labels, rng);

    let mut features = Vec::with_capacity(n * d);
    let mut candidates = vec![false; n * k];
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            features.push(means[y][j] + eps);
        }
        candidates[i * k + y] = true;
    }
    PllDataset::new(
        Tensor::from_vec(&[n, d], features)?,
        candidates,
        Some(labels),
        k,
    )
}

fn cluster_means<R: Rng + ?Sized>(k: usize, d: usize, separation: f64, rng: &mut R) -> Vec<Vec<f64>> {
    if separation == 0.0 {
        return vec![vec![0.0; d]; k];
    }
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    if d == 2 {
        // evenly spaced on the circle
        for j in 0..k {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            dirs.push(vec![angle.cos(), angle.sin()]);
        }
    } else {
        // random unit directions, re-drawn until no pair is nearly parallel
        'outer: loop {
            dirs.clear();
            for _ in 0..k {
                let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                dirs.push(v.into_iter().map(|x| x / norm).collect());
            }
            for a in 0..k {
                for b in (a + 1)..k {
                    let dist: f64 = dirs[a]
                        .iter()
                        .zip(&dirs[b])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    if dist < 0.2 {
                        continue 'outer;
                    }
                }
            }
            break;
        }
    }
    dirs.into_iter()
        .map(|v| v.into_iter().map(|x| x * separation).collect())
        .collect()
}

//! Maximum-entropy class prior under candidate-set frequency constraints.
//!
//! Each class must occur at least as often as it appears as a singleton
//! candidate set and at most as often as it appears in any candidate set.
//! Maximizing entropy over the simplex subject to these box constraints has
//! a water-filling solution: every component is the same level clipped into
//! its box, with the level chosen so the components sum to one. The prior
//! is then lifted to Dirichlet parameters via a ratio-to-minimum exponent.

use serde::{Deserialize, Serialize};

use crate::data::PllDataset;
use crate::error::{Error, Result};

/// Per-class lower/upper relative-frequency bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PriorBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::shape(
                "prior_bounds",
                format!("lower has {} entries, upper has {}", lower.len(), upper.len()),
            ));
        }
        for (j, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !(0.0..=1.0).contains(&l) || !(0.0..=1.0).contains(&u) || l > u {
                return Err(Error::domain(
                    "prior_bounds",
                    format!("class {j}: need 0 <= lower <= upper <= 1, got [{l}, {u}]"),
                ));
            }
        }
        let sum_l: f64 = lower.iter().sum();
        let sum_u: f64 = upper.iter().sum();
        if sum_l > 1.0 + 1e-12 || sum_u < 1.0 - 1e-12 {
            return Err(Error::domain(
                "prior_bounds",
                format!("infeasible bounds: sum(lower) = {sum_l}, sum(upper) = {sum_u}"),
            ));
        }
        Ok(PriorBounds { lower, upper })
    }

    /// Relative candidate-set frequencies of a dataset: the lower bound is
    /// the share of singleton sets {y}, the upper bound the share of sets
    /// containing y. Feasible by construction.
    pub fn from_dataset(ds: &PllDataset) -> Self {
        let k = ds.k;
        let n = ds.n as f64;
        let mut lower = vec![0.0; k];
        let mut upper = vec![0.0; k];
        for i in 0..ds.n {
            let mask = ds.candidates(i);
            let count = mask.iter().filter(|&&b| b).count();
            for (j, &inside) in mask.iter().enumerate() {
                if inside {
                    upper[j] += 1.0;
                    if count == 1 {
                        lower[j] += 1.0;
                    }
                }
            }
        }
        for v in &mut lower {
            *v /= n;
        }
        for v in &mut upper {
            *v /= n;
        }
        PriorBounds { lower, upper }
    }

    pub fn k(&self) -> usize {
        self.lower.len()
    }
}

/// Solved prior: the simplex vector, its Dirichlet lift and the exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorVector {
    pub pi: Vec<f64>,
    pub alpha_pi: Vec<f64>,
    pub delta: f64,
}

/// Maximize entropy over the simplex subject to box constraints.
///
/// The optimum has water-filling structure pi_j = clip(level, lower_j,
/// upper_j); the level is found by bisection on the monotone sum.
pub fn solve_max_entropy(bounds: &PriorBounds) -> Result<Vec<f64>> {
    let clip_sum = |level: f64| -> f64 {
        bounds
            .lower
            .iter()
            .zip(&bounds.upper)
            .map(|(&l, &u)| level.clamp(l, u))
            .sum()
    };
    let mut lo = 0.0_f64;
    let mut hi = bounds.upper.iter().cloned().fold(0.0, f64::max);
    if clip_sum(hi) < 1.0 - 1e-9 {
        return Err(Error::domain(
            "solve_max_entropy",
            "upper bounds sum below one".to_string(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clip_sum(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let level = 0.5 * (lo + hi);
    let mut pi: Vec<f64> = bounds
        .lower
        .iter()
        .zip(&bounds.upper)
        .map(|(&l, &u)| level.clamp(l, u))
        .collect();
    // Distribute the residual rounding error over the unclamped components
    // so the sum constraint holds to full precision.
    let residual = 1.0 - pi.iter().sum::<f64>();
    let free: Vec<usize> = (0..pi.len())
        .filter(|&j| pi[j] > bounds.lower[j] + 1e-15 && pi[j] < bounds.upper[j] - 1e-15)
        .collect();
    if !free.is_empty() {
        let share = residual / free.len() as f64;
        for j in free {
            pi[j] += share;
        }
    }
    Ok(pi)
}

/// Lift a simplex prior to Dirichlet parameters alpha_j =
/// (pi_j / min pi)^delta >= 1; delta = 0 gives the uniform prior.
pub fn prior_dirichlet_params(pi: &[f64], delta: f64) -> Result<Vec<f64>> {
    if pi.is_empty() {
        return Err(Error::domain("prior_dirichlet_params", "empty prior"));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!("delta must lie in [0, 1], got {delta}")));
    }
    if pi.iter().any(|&p| p <= 0.0) {
        return Err(Error::domain(
            "prior_dirichlet_params",
            "prior has a non-positive component; floor it first".to_string(),
        ));
    }
    let min = pi.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(pi.iter().map(|&p| (p / min).powf(delta)).collect())
}

/// Floor applied to prior components before the Dirichlet lift; keeps the
/// ratios finite when a class never occurs.
pub const PRIOR_FLOOR: f64 = 1e-6;

/// Solve the prior for a dataset and lift it with exponent `delta`.
pub fn compute_prior(bounds: &PriorBounds, delta: f64) -> Result<PriorVector> {
    let pi = solve_max_entropy(bounds)?;
    let floored: Vec<f64> = pi.iter().map(|&p| p.max(PRIOR_FLOOR)).collect();
    let alpha_pi = prior_dirichlet_params(&floored, delta)?;
    Ok(PriorVector { pi, alpha_pi, delta })
}

/// Classes whose box constraint is active at the solution (reported by the
/// CLI for diagnostics).
pub fn binding_constraints(bounds: &PriorBounds, pi: &[f64]) -> Vec<(usize, &'static str)> {
    let mut out = Vec::new();
    for (j, &p) in pi.iter().enumerate() {
        if (p - bounds.lower[j]).abs() < 1e-9 && bounds.lower[j] > 0.0 {
            out.push((j, "lower"));
        } else if (p - bounds.upper[j]).abs() < 1e-9 && bounds.upper[j] < 1.0 {
            out.push((j, "upper"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn entropy(pi: &[f64]) -> f64 {
        -pi.iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    #[test]
    fn unconstrained_gives_uniform() {
        let bounds = PriorBounds::new(vec![0.0; 4], vec![1.0; 4]).unwrap();
        let pi = solve_max_entropy(&bounds).unwrap();
        for &p in &pi {
            assert_relative_eq!(p, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn binding_lower_bound_two_classes() {
        let bounds = PriorBounds::new(vec![0.7, 0.0], vec![1.0, 1.0]).unwrap();
        let pi = solve_max_entropy(&bounds).unwrap();
        assert_relative_eq!(pi[0], 0.7, epsilon = 1e-10);
        assert_relative_eq!(pi[1], 0.3, epsilon = 1e-10);
    }

    #[test]
    fn binding_upper_bound_three_classes() {
        let bounds = PriorBounds::new(vec![0.0; 3], vec![1.0, 1.0, 0.1]).unwrap();
        let pi = solve_max_entropy(&bounds).unwrap();
        assert_relative_eq!(pi[0], 0.45, epsilon = 1e-10);
        assert_relative_eq!(pi[1], 0.45, epsilon = 1e-10);
        assert_relative_eq!(pi[2], 0.1, epsilon = 1e-10);
    }

    #[test]
    fn random_bounds_satisfy_constraints_and_water_fill() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let k = rng.random_range(2..8);
            // feasible by construction: lower small, upper large enough
            let lower: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..(0.8 / k as f64))).collect();
            let upper: Vec<f64> = lower
                .iter()
                .map(|&l| (l + rng.random_range(0.3..1.0)).min(1.0))
                .collect();
            if upper.iter().sum::<f64>() < 1.0 {
                continue;
            }
            let bounds = PriorBounds::new(lower.clone(), upper.clone()).unwrap();
            let pi = solve_max_entropy(&bounds).unwrap();
            assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let mut unclamped = Vec::new();
            for (j, &p) in pi.iter().enumerate() {
                assert!(p >= lower[j] - 1e-10 && p <= upper[j] + 1e-10);
                if p > lower[j] + 1e-7 && p < upper[j] - 1e-7 {
                    unclamped.push(p);
                }
            }
            // water-filling: all unclamped components share one level
            for w in unclamped.windows(2) {
                assert!((w[0] - w[1]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn grid_search_confirms_optimality_k3() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..20 {
            let lower: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..0.25)).collect();
            let upper: Vec<f64> = lower
                .iter()
                .map(|&l| (l + rng.random_range(0.3..1.0)).min(1.0))
                .collect();
            if upper.iter().sum::<f64>() < 1.0 {
                continue;
            }
            let bounds = PriorBounds::new(lower.clone(), upper.clone()).unwrap();
            let pi = solve_max_entropy(&bounds).unwrap();
            let h_solver = entropy(&pi);
            let step = 1e-3;
            let mut best = f64::NEG_INFINITY;
            let steps = (1.0 / step) as usize;
            for i in 0..=steps {
                let a = i as f64 * step;
                if a < lower[0] || a > upper[0] {
                    continue;
                }
                for j in 0..=(steps - i) {
                    let b = j as f64 * step;
                    let c = 1.0 - a - b;
                    if b < lower[1] || b > upper[1] || c < lower[2] - 1e-12 || c > upper[2] + 1e-12
                    {
                        continue;
                    }
                    best = best.max(entropy(&[a, b, c.max(0.0)]));
                }
            }
            assert!(
                h_solver >= best - 1e-6,
                "solver {h_solver} below grid {best} for bounds {lower:?} {upper:?}"
            );
        }
    }

    #[test]
    fn dirichlet_lift_examples() {
        // delta = 0: uniform prior regardless of pi
        let a = prior_dirichlet_params(&[0.3, 0.2, 0.5], 0.0).unwrap();
        assert_eq!(a, vec![1.0, 1.0, 1.0]);
        let a = prior_dirichlet_params(&[0.5, 0.25, 0.25], 1.0).unwrap();
        assert_eq!(a, vec![2.0, 1.0, 1.0]);
        let a = prior_dirichlet_params(&[0.5, 0.25, 0.25], 0.5).unwrap();
        assert_relative_eq!(a[0], 2.0_f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(a[1], 1.0);
        // all outputs >= 1
        assert!(a.iter().all(|&v| v >= 1.0));
        // zero component is an error
        assert!(prior_dirichlet_params(&[0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn infeasible_bounds_rejected() {
        assert!(PriorBounds::new(vec![0.8, 0.8], vec![1.0, 1.0]).is_err());
        assert!(PriorBounds::new(vec![0.0, 0.0], vec![0.3, 0.3]).is_err());
        assert!(PriorBounds::new(vec![0.5], vec![0.2]).is_err());
    }
}

//! The training objective: candidate-set likelihood, importance-sampled
//! generative term and Dirichlet prior KL, assembled into the beta-ELBO;
//! plus the ablated discriminative objective.
//!
//! For a mini-batch the graph computes, per instance,
//!
//!   mean_b [ log p(x | y_o) + log p(s | y_o) ] - beta * KL(q || prior)
//!
//! with y_o ~ Dir(alpha(x, s)) and log p(x | y) estimated by b' importance
//! samples through the CVAE, aggregated with a max-shifted log-sum-exp.
//! The returned loss is the negated batch mean. Gradients flow into the
//! classifier (through the closed-form KL and the implicitly
//! reparameterized Dirichlet samples) and into the CVAE weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{
    dirichlet::sample_dirichlet_var, kl_dirichlet_rows, DirSampleMode, DirichletParams,
    SIMPLEX_FLOOR,
};
use crate::error::{Error, Result};
use crate::models::{recon_loglik_rows, sample_gaussian_rows, ClassifierNet, CvaeNets};
use crate::tensor::params::BoundParams;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LN_2: f64 = std::f64::consts::LN_2;

/// The three ELBO terms of one batch, with
/// total = generative_term + candidate_term - beta * kl_term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub generative_term: f64,
    pub candidate_term: f64,
    pub kl_term: f64,
    pub beta: f64,
    pub total: f64,
}

/// Monte Carlo and weighting knobs of the objective.
#[derive(Debug, Clone, Copy)]
pub struct ElboOptions {
    pub b: usize,
    pub b_prime: usize,
    pub beta: f64,
    pub sample_mode: DirSampleMode,
    /// Replace the sampled candidate term by its Dirichlet expectation
    /// psi(alpha_s) - psi(alpha_0) - (k-1) log 2 (variance-free).
    pub closed_form_candidate: bool,
}

impl Default for ElboOptions {
    fn default() -> Self {
        ElboOptions {
            b: 10,
            b_prime: 10,
            beta: 1.0,
            sample_mode: DirSampleMode::MarsagliaTsang,
            closed_form_candidate: false,
        }
    }
}

impl ElboOptions {
    pub fn validate(&self) -> Result<()> {
        if self.b < 1 || self.b_prime < 1 {
            return Err(Error::Config(format!(
                "Monte Carlo sample counts must be >= 1, got b = {}, b' = {}",
                self.b, self.b_prime
            )));
        }
        if !(0.0 < self.beta && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// p(s | y) = (1 / 2^(k-1)) * sum_{j in s} y_j.
pub fn candidate_mass(s: &[bool], y: &[f64]) -> f64 {
    debug_assert_eq!(s.len(), y.len());
    let inner: f64 = s.iter().zip(y).filter(|(b, _)| **b).map(|(_, v)| v).sum();
    inner / 2f64.powi(s.len() as i32 - 1)
}

/// log p(s | y) with the inner sum floored; the flag marks a degenerate
/// (empty) candidate set.
pub fn log_candidate_mass(s: &[bool], y: &[f64]) -> (f64, bool) {
    let inner: f64 = s.iter().zip(y).filter(|(b, _)| **b).map(|(_, v)| v).sum();
    let degenerate = !s.iter().any(|&b| b);
    (
        inner.max(SIMPLEX_FLOOR).ln() - (s.len() as f64 - 1.0) * LN_2,
        degenerate,
    )
}

/// Rowwise log p(s | y) on the tape: y is [n, k], masks a 0/1 constant.
pub fn log_candidate_rows<'t>(
    tape: &'t Tape,
    y: Var<'t>,
    masks: &Tensor,
) -> Result<Var<'t>> {
    let k = masks.shape()[1];
    let mask_const = tape.constant(masks.clone());
    y.mul(mask_const)?
        .sum_axis(1)?
        .clamp(SIMPLEX_FLOOR, f64::INFINITY)?
        .log()?
        .add_const(-((k as f64 - 1.0) * LN_2))
}

/// Closed-form candidate expectation per row:
/// E_y[log p(s|y)] = psi(sum_{j in s} alpha_j) - psi(alpha_0) - (k-1) log 2.
pub fn closed_form_candidate_rows<'t>(
    tape: &'t Tape,
    alpha: Var<'t>,
    masks: &Tensor,
) -> Result<Var<'t>> {
    let k = masks.shape()[1];
    let mask_const = tape.constant(masks.clone());
    let alpha_s = alpha.mul(mask_const)?.sum_axis(1)?;
    let alpha_0 = alpha.sum_axis(1)?;
    alpha_s
        .digamma()?
        .sub(alpha_0.digamma()?)?
        .add_const(-((k as f64 - 1.0) * LN_2))
}

/// Importance-sampled log p(x | y) per row: log-sum-exp over b' weights
/// log p(x|y,z_i) + log p(z_i) - log r(z_i|x,y), minus log b'.
pub fn log_px_given_y_rows<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    nets: &CvaeNets,
    bound: &BoundParams<'t>,
    x: Var<'t>,
    y: Var<'t>,
    b_prime: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Var<'t>> {
    if b_prime < 1 {
        return Err(Error::Config(format!("b' must be >= 1, got {b_prime}")));
    }
    let n = x.shape()[0];
    let m = nets.m as f64;
    let xy = tape.concat(&[x, y], 1)?;
    let (mu, log_var) = nets.encode(bound, xy)?;
    let mut cols = Vec::with_capacity(b_prime);
    for _ in 0..b_prime {
        let (z, _eps) = sample_gaussian_rows(tape, mu, log_var, rng)?;
        let yz = tape.concat(&[y, z], 1)?;
        let recon = nets.decode(bound, yz)?;
        let recon_ll = recon_loglik_rows(x, recon, sigma)?;
        // log p(z | y) with p = N(0, I)
        let log_p = z
            .square()?
            .sum_axis(1)?
            .scale(-0.5)?
            .add_const(-0.5 * m * LN_2PI)?;
        let diff_sq = z.sub(mu)?.square()?;
        let log_r = diff_sq
            .mul(log_var.neg()?.exp()?)?
            .add(log_var)?
            .sum_axis(1)?
            .scale(-0.5)?
            .add_const(-0.5 * m * LN_2PI)?;
        let log_w = recon_ll.add(log_p.sub(log_r)?)?;
        cols.push(log_w.reshape(&[n, 1])?);
    }
    let stacked = tape.concat(&cols, 1)?;
    stacked.log_sum_exp_rows()?.add_const(-(b_prime as f64).ln())
}

/// Single-instance importance estimate of log p(x | y).
pub fn log_px_given_y<R: Rng + ?Sized>(
    nets: &CvaeNets,
    x: &[f64],
    y: &[f64],
    b_prime: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = nets.bind(&tape);
    let xv = tape.constant(Tensor::from_vec(&[1, x.len()], x.to_vec())?);
    let yv = tape.constant(Tensor::from_vec(&[1, y.len()], y.to_vec())?);
    let out = log_px_given_y_rows(&tape, nets, &bound, xv, yv, b_prime, sigma, rng)?;
    Ok(out.value().data()[0])
}

/// Live graph handles of one beta-ELBO evaluation.
pub struct ElboGraph<'t> {
    /// Negated total: the quantity to minimize.
    pub loss: Var<'t>,
    /// Dirichlet parameters alpha(x, s) of the batch, [n, k].
    pub alpha: Var<'t>,
    pub breakdown: ElboBreakdown,
}

/// A mini-batch view: features [n, d] and candidate masks [n, k] as 0/1.
pub struct BatchView<'a> {
    pub features: &'a Tensor,
    pub masks: &'a Tensor,
}

impl BatchView<'_> {
    fn check(&self) -> Result<()> {
        if self.features.rank() != 2 || self.masks.rank() != 2
            || self.features.shape()[0] != self.masks.shape()[0]
        {
            return Err(Error::shape(
                "beta_elbo",
                format!("features {:?} vs masks {:?}", self.features.shape(), self.masks.shape()),
            ));
        }
        if self.features.shape()[0] == 0 {
            return Err(Error::shape("beta_elbo", "empty batch".to_string()));
        }
        Ok(())
    }
}

/// Build the beta-ELBO for one batch on `tape`.
///
/// `training` selects the classifier's batch-norm mode (training mode also
/// updates its running statistics). The reported breakdown satisfies
/// total = generative_term + candidate_term - beta * kl_term bit-exactly.
pub fn beta_elbo_graph<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    classifier: &mut ClassifierNet,
    cls_bound: &BoundParams<'t>,
    nets: &CvaeNets,
    cvae_bound: &BoundParams<'t>,
    prior: &DirichletParams,
    batch: &BatchView<'_>,
    opts: &ElboOptions,
    training: bool,
    rng: &mut R,
) -> Result<ElboGraph<'t>> {
    opts.validate()?;
    batch.check()?;
    let input = tape.constant(classifier.build_input(batch.features, batch.masks)?);
    let x = tape.constant(batch.features.clone());
    let alpha = classifier.alpha_from_input(cls_bound, input, training)?;
    let kl_rows = kl_dirichlet_rows(tape, alpha, prior)?;

    let mut gen_rows: Option<Var<'t>> = None;
    let mut cand_rows: Option<Var<'t>> = None;
    for _ in 0..opts.b {
        let y = sample_dirichlet_var(tape, alpha, rng, opts.sample_mode)?;
        let gen = log_px_given_y_rows(tape, nets, cvae_bound, x, y, opts.b_prime, nets.sigma, rng)?;
        gen_rows = Some(match gen_rows {
            Some(acc) => acc.add(gen)?,
            None => gen,
        });
        if !opts.closed_form_candidate {
            let cand = log_candidate_rows(tape, y, batch.masks)?;
            cand_rows = Some(match cand_rows {
                Some(acc) => acc.add(cand)?,
                None => cand,
            });
        }
    }
    let gen_mean = gen_rows.expect("b >= 1").scale(1.0 / opts.b as f64)?;
    let cand_mean = match cand_rows {
        Some(acc) => acc.scale(1.0 / opts.b as f64)?,
        None => closed_form_candidate_rows(tape, alpha, batch.masks)?,
    };

    let generative_term = gen_mean.mean()?;
    let candidate_term = cand_mean.mean()?;
    let kl_term = kl_rows.mean()?;
    let total = generative_term
        .add(candidate_term)?
        .sub(kl_term.scale(opts.beta)?)?;
    let loss = total.neg()?;
    let breakdown = ElboBreakdown {
        generative_term: generative_term.value().as_scalar()?,
        candidate_term: candidate_term.value().as_scalar()?,
        kl_term: kl_term.value().as_scalar()?,
        beta: opts.beta,
        total: total.value().as_scalar()?,
    };
    Ok(ElboGraph { loss, alpha, breakdown })
}

/// Evaluate the beta-ELBO of a batch without touching any weights.
pub fn beta_elbo_batch<R: Rng + ?Sized>(
    classifier: &mut ClassifierNet,
    nets: &CvaeNets,
    prior: &DirichletParams,
    batch: &BatchView<'_>,
    opts: &ElboOptions,
    rng: &mut R,
) -> Result<ElboBreakdown> {
    let tape = Tape::new();
    let cls_bound = classifier.bind(&tape);
    let cvae_bound = nets.bind(&tape);
    let graph = beta_elbo_graph(
        &tape,
        classifier,
        &cls_bound,
        nets,
        &cvae_bound,
        prior,
        batch,
        opts,
        false,
        rng,
    )?;
    Ok(graph.breakdown)
}

/// Ablated discriminative objective for one batch:
/// mean_i [ KL(q(y|x,s) || Dir(1 + c * label_row_i)) - mean_b log p(s|y) ].
///
/// `label_rows` carries the maintained p(y|x) estimates of the batch; they
/// are lifted to a sharp Dirichlet with concentration `concentration`.
pub fn ablation_graph<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    classifier: &mut ClassifierNet,
    cls_bound: &BoundParams<'t>,
    label_rows: &Tensor,
    batch: &BatchView<'_>,
    b: usize,
    concentration: f64,
    sample_mode: DirSampleMode,
    training: bool,
    rng: &mut R,
) -> Result<(Var<'t>, Var<'t>)> {
    batch.check()?;
    if b < 1 {
        return Err(Error::Config(format!("b must be >= 1, got {b}")));
    }
    let n = batch.features.shape()[0];
    if label_rows.shape() != [n, classifier.k] {
        return Err(Error::shape(
            "ablation_loss",
            format!("label rows {:?} for batch of {n}", label_rows.shape()),
        ));
    }
    let input = tape.constant(classifier.build_input(batch.features, batch.masks)?);
    let alpha = classifier.alpha_from_input(cls_bound, input, training)?;

    // per-row prior parameters 1 + c * label_row
    let prior_rows = crate::tensor::ops::map(label_rows, |v| 1.0 + concentration * v);
    let kl_rows = kl_dirichlet_rows_per_row(tape, alpha, &prior_rows)?;

    let mut cand_rows: Option<Var<'t>> = None;
    for _ in 0..b {
        let y = sample_dirichlet_var(tape, alpha, rng, sample_mode)?;
        let cand = log_candidate_rows(tape, y, batch.masks)?;
        cand_rows = Some(match cand_rows {
            Some(acc) => acc.add(cand)?,
            None => cand,
        });
    }
    let cand_mean = cand_rows.expect("b >= 1").scale(1.0 / b as f64)?;
    let loss = kl_rows.sub(cand_mean)?.mean()?;
    Ok((loss, alpha))
}

/// Rowwise KL( Dir(alpha_r) || Dir(prior_r) ) with one prior per row.
pub fn kl_dirichlet_rows_per_row<'t>(
    tape: &'t Tape,
    alpha: Var<'t>,
    prior_rows: &Tensor,
) -> Result<Var<'t>> {
    let shape = alpha.shape();
    if prior_rows.shape() != shape.as_slice() {
        return Err(Error::shape(
            "kl_dirichlet",
            format!("alpha {shape:?} vs per-row prior {:?}", prior_rows.shape()),
        ));
    }
    let (n, k) = (shape[0], shape[1]);
    let beta = tape.constant(prior_rows.clone());
    let a0 = alpha.sum_axis(1)?;
    let term_a0 = a0.lgamma()?;
    let term_abs = alpha.lgamma()?.sum_axis(1)?;
    let prior_const = beta.lgamma()?.sum_axis(1)?.sub(beta.sum_axis(1)?.lgamma()?)?;
    let psi = alpha.digamma()?;
    let psi_a0 = a0.digamma()?.reshape(&[n, 1])?.broadcast_to(&[n, k])?;
    let inner = alpha.sub(beta)?.mul(psi.sub(psi_a0)?)?.sum_axis(1)?;
    term_a0.sub(term_abs)?.add(prior_const)?.add(inner)
}

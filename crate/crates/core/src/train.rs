//! The three-phase training algorithm: setup (prior, label vectors), CVAE
//! warm-up, and the main loop with alternating updates.
//!
//! Per mini-batch the main loop (a) evaluates the beta-ELBO with b
//! Dirichlet samples and b' importance samples, (b) takes an Adam step on
//! the classifier from that loss, (c) takes an Adam step on the CVAE using
//! the warm-up loss with the current label vectors, then (d) refreshes the
//! label vectors of the batch from the pre-update Dirichlet parameters.
//! The decoder noise scale follows an exponential moving average of the
//! observed per-element reconstruction RMSE: it is tracked during warm-up
//! (the warm-up loss itself uses sigma = 1), installed when warm-up ends,
//! and kept updated during the main loop.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::PllDataset;
use crate::dist::{DirSampleMode, DirichletParams};
use crate::error::{Error, Result};
use crate::models::{
    argmax, cvae_forward_rows, recon_loglik_rows, shuffle, ClassifierNet, CvaeNets,
};
use crate::objective::{ablation_graph, beta_elbo_graph, BatchView, ElboBreakdown, ElboOptions};
use crate::prior::{compute_prior, PriorBounds, PriorVector};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// All hyperparameters of a training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Main-loop epochs.
    pub t: usize,
    /// Warm-up epochs.
    pub t_w: usize,
    /// Mini-batch size.
    pub n_m: usize,
    /// Dirichlet Monte Carlo samples per instance.
    pub b: usize,
    /// Importance samples per Dirichlet sample.
    pub b_prime: usize,
    /// KL weight in (0, 1].
    pub beta: f64,
    /// Prior lift exponent in [0, 1].
    pub delta: f64,
    pub lr: f64,
    /// Latent dimension of the CVAE.
    pub m: usize,
    /// Hidden width of all MLPs.
    pub hidden: usize,
    pub seed: u64,
    pub sigma_ema_decay: f64,
    pub sigma_floor: f64,
    /// Write a checkpoint every this many main-loop epochs (0 = only at the
    /// end, and only when an output directory is given).
    pub checkpoint_every: usize,
    /// Use the closed-form candidate expectation instead of the sampled
    /// term.
    pub closed_form_candidate: bool,
    pub sample_mode: DirSampleMode,
    /// Dirichlet concentration of the label-table lift in the ablated
    /// objective.
    pub ablation_concentration: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t: 1000,
            t_w: 500,
            n_m: 256,
            b: 10,
            b_prime: 10,
            beta: 1.0,
            delta: 0.5,
            lr: 1e-3,
            m: 32,
            hidden: 256,
            seed: 0,
            sigma_ema_decay: 0.99,
            sigma_floor: 1e-2,
            checkpoint_every: 0,
            closed_form_candidate: false,
            sample_mode: DirSampleMode::MarsagliaTsang,
            ablation_concentration: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_m < 1 || self.b < 1 || self.b_prime < 1 {
            return Err(Error::Config(format!(
                "n_m, b and b' must be >= 1 (got {}, {}, {})",
                self.n_m, self.b, self.b_prime
            )));
        }
        if !(0.0 < self.beta && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.m < 1 || self.hidden < 1 {
            return Err(Error::Config(format!(
                "latent dim and hidden width must be >= 1 (got {}, {})",
                self.m, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.sigma_ema_decay) {
            return Err(Error::Config(format!(
                "sigma_ema_decay must lie in [0, 1), got {}",
                self.sigma_ema_decay
            )));
        }
        if self.ablation_concentration <= 0.0 {
            return Err(Error::Config(format!(
                "ablation concentration must be positive, got {}",
                self.ablation_concentration
            )));
        }
        Ok(())
    }

    fn elbo_options(&self) -> ElboOptions {
        ElboOptions {
            b: self.b,
            b_prime: self.b_prime,
            beta: self.beta,
            sample_mode: self.sample_mode,
            closed_form_candidate: self.closed_form_candidate,
        }
    }
}

/// Per-instance label vectors on the simplex, supported on the candidate
/// sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    rows: Vec<f64>,
    n: usize,
    k: usize,
}

impl LabelTable {
    /// Uniform mass over each candidate set.
    pub fn init_uniform(ds: &PllDataset) -> Self {
        let mut rows = vec![0.0; ds.n * ds.k];
        for i in 0..ds.n {
            let count = ds.candidate_count(i) as f64;
            for (j, &inside) in ds.candidates(i).iter().enumerate() {
                if inside {
                    rows[i * ds.k + j] = 1.0 / count;
                }
            }
        }
        LabelTable { rows, n: ds.n, k: ds.k }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.k..(i + 1) * self.k]
    }

    /// Rows for a batch of instance ids as an [nb, k] tensor.
    pub fn rows_for(&self, ids: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.k);
        for &i in ids {
            if i >= self.n {
                return Err(Error::shape(
                    "label_table",
                    format!("instance id {i} missing from the table (n = {})", self.n),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(&[ids.len(), self.k], data)
    }

    /// Every row sums to one and puts no mass outside its candidate set.
    pub fn check_invariants(&self, ds: &PllDataset) -> Result<()> {
        for i in 0..self.n {
            let row = self.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("label row {i} sums to {sum}")));
            }
            for (j, &inside) in ds.candidates(i).iter().enumerate() {
                if !inside && row[j] != 0.0 {
                    return Err(Error::Numeric(format!(
                        "label row {i} has mass {} on non-candidate class {j}",
                        row[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Refresh label rows from Dirichlet parameters, renormalized over the
/// candidate support: row_ij = 1{j in s_i} alpha_ij / sum_{j' in s_i}
/// alpha_ij'.
pub fn update_labels(
    table: &mut LabelTable,
    ids: &[usize],
    alphas: &Tensor,
    ds: &PllDataset,
) -> Result<()> {
    if alphas.shape() != [ids.len(), table.k] {
        return Err(Error::shape(
            "update_labels",
            format!("alphas {:?} for {} ids", alphas.shape(), ids.len()),
        ));
    }
    for (r, &i) in ids.iter().enumerate() {
        if i >= table.n {
            return Err(Error::shape(
                "update_labels",
                format!("instance id {i} missing from the table (n = {})", table.n),
            ));
        }
        let mask = ds.candidates(i);
        let alpha_row = alphas.row(r);
        let denom: f64 = mask
            .iter()
            .zip(alpha_row)
            .filter(|(b, _)| **b)
            .map(|(_, a)| a)
            .sum();
        for j in 0..table.k {
            table.rows[i * table.k + j] = if mask[j] { alpha_row[j] / denom } else { 0.0 };
        }
    }
    Ok(())
}

/// One row of the per-epoch metrics stream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub generative_term: f64,
    pub candidate_term: f64,
    pub kl_term: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// Everything a finished run hands back.
pub struct FitResult {
    pub classifier: ClassifierNet,
    pub cvae: CvaeNets,
    pub labels: LabelTable,
    pub prior: PriorVector,
    pub metrics: Vec<EpochMetrics>,
}

/// Versioned on-disk snapshot of a run, readable by the `eval` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub config: TrainConfig,
    pub classifier: ClassifierNet,
    pub cvae: CvaeNets,
    pub sigma: f64,
    pub seed: u64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Config(format!("cannot serialize checkpoint: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.as_ref().display().to_string(),
            line: 0,
            detail: format!("invalid checkpoint: {e}"),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

fn batch_tensors(ds: &PllDataset, ids: &[usize]) -> Result<(Tensor, Tensor)> {
    let mut feats = Vec::with_capacity(ids.len() * ds.d);
    let mut masks = Vec::with_capacity(ids.len() * ds.k);
    for &i in ids {
        feats.extend_from_slice(ds.feature_row(i));
        masks.extend(ds.candidates(i).iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Ok((
        Tensor::from_vec(&[ids.len(), ds.d], feats)?,
        Tensor::from_vec(&[ids.len(), ds.k], masks)?,
    ))
}

/// Per-element RMSE of a batch reconstruction.
fn batch_rmse(x: &Tensor, recon: &Tensor) -> f64 {
    let sq: f64 = x
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (sq / x.len() as f64).sqrt()
}

/// One CVAE gradient step on a batch (the warm-up loss): minimizes
/// -recon_loglik + KL(r(z|x,y) || N(0, I)) and returns the batch RMSE.
fn cvae_step<R: Rng + ?Sized>(
    nets: &mut CvaeNets,
    x_t: &Tensor,
    y_rows: &Tensor,
    sigma: f64,
    rng: &mut R,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = nets.bind(&tape);
    let x = tape.constant(x_t.clone());
    let y = tape.constant(y_rows.clone());
    let flow = cvae_forward_rows(&tape, nets, &bound, x, y, rng)?;
    let recon_value = flow.recon.value();
    let recon_ll = recon_loglik_rows(x, flow.recon, sigma)?;
    // 0.5 * sum(exp(lv) + mu^2 - 1 - lv) per row
    let kl_rows = flow
        .log_var
        .exp()?
        .add(flow.mu.square()?)?
        .add_const(-1.0)?
        .sub(flow.log_var)?
        .sum_axis(1)?
        .scale(0.5)?;
    let loss = kl_rows.sub(recon_ll)?.mean()?;
    let mut grads = tape.backward(loss)?;
    nets.store_mut().apply_grads(&bound, &mut grads)?;
    Ok(batch_rmse(x_t, &recon_value))
}

/// Warm up the CVAE for `config.t_w` epochs against the current label
/// vectors; afterwards the decoder noise scale is set to the tracked RMSE
/// average. With t_w = 0 the networks and sigma stay untouched.
pub fn warmup<R: Rng + ?Sized>(
    nets: &mut CvaeNets,
    ds: &PllDataset,
    labels: &LabelTable,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<()> {
    if config.t_w == 0 {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..ds.n).collect();
    let mut ema = 1.0;
    for epoch in 1..=config.t_w {
        shuffle(&mut order, rng);
        for chunk in order.chunks(config.n_m) {
            let (x_t, _) = batch_tensors(ds, chunk)?;
            let y_rows = labels.rows_for(chunk)?;
            let rmse = cvae_step(nets, &x_t, &y_rows, 1.0, rng).map_err(|e| {
                Error::Numeric(format!("warm-up epoch {epoch}: {e}"))
            })?;
            ema = config.sigma_ema_decay * ema
                + (1.0 - config.sigma_ema_decay) * rmse.max(config.sigma_floor);
        }
    }
    nets.sigma = ema;
    Ok(())
}

fn write_checkpoint(
    out_dir: Option<&Path>,
    epoch: usize,
    config: &TrainConfig,
    classifier: &ClassifierNet,
    cvae: &CvaeNets,
) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        epoch,
        config: config.clone(),
        classifier: classifier.clone(),
        cvae: cvae.clone(),
        sigma: cvae.sigma,
        seed: config.seed,
    };
    ckpt.save(dir.join("model.json"))
}

/// Full training run on a dataset; see the module docs for the loop
/// structure. Checkpoints and metrics land in `out_dir` when given.
pub fn fit(ds: &PllDataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<FitResult> {
    config.validate()?;
    if ds.n == 0 {
        return Err(Error::Config("cannot train on an empty dataset".to_string()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    // Phase 1: models, prior, label vectors.
    let mut classifier = ClassifierNet::new(ds.d, ds.k, config.hidden, config.lr, &mut rng);
    let mut cvae = CvaeNets::new(ds.d, ds.k, config.m, config.hidden, config.lr, &mut rng);
    cvae.sigma_ema_decay = config.sigma_ema_decay;
    cvae.sigma_floor = config.sigma_floor;
    let bounds = PriorBounds::from_dataset(ds);
    let prior = compute_prior(&bounds, config.delta)?;
    let prior_params = DirichletParams::new(prior.alpha_pi.clone())?;
    let mut labels = LabelTable::init_uniform(ds);

    // Phase 2: CVAE warm-up.
    warmup(&mut cvae, ds, &labels, config, &mut rng)?;

    // Phase 3: main loop.
    let opts = config.elbo_options();
    let mut order: Vec<usize> = (0..ds.n).collect();
    let mut metrics = Vec::with_capacity(config.t);
    for epoch in 1..=config.t {
        let started = Instant::now();
        shuffle(&mut order, &mut rng);
        let mut sums = ElboBreakdown {
            generative_term: 0.0,
            candidate_term: 0.0,
            kl_term: 0.0,
            beta: config.beta,
            total: 0.0,
        };
        for (batch_no, chunk) in order.chunks(config.n_m).enumerate() {
            let context = |e: Error| {
                Error::Numeric(format!("epoch {epoch}, batch {batch_no}: {e}"))
            };
            let (x_t, mask_t) = batch_tensors(ds, chunk)?;
            let batch = BatchView { features: &x_t, masks: &mask_t };

            // (a) + (b): beta-ELBO, Adam step on the classifier.
            let tape = Tape::new();
            let cls_bound = classifier.bind(&tape);
            let cvae_bound = cvae.bind(&tape);
            let graph = beta_elbo_graph(
                &tape,
                &mut classifier,
                &cls_bound,
                &cvae,
                &cvae_bound,
                &prior_params,
                &batch,
                &opts,
                true,
                &mut rng,
            )
            .map_err(context)?;
            if !graph.breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, batch {batch_no}: objective became non-finite"
                )));
            }
            let alpha_values = graph.alpha.value();
            let mut grads = tape.backward(graph.loss).map_err(context)?;
            classifier
                .store_mut()
                .apply_grads(&cls_bound, &mut grads)
                .map_err(context)?;

            // (c): CVAE step against the current label vectors.
            let y_rows = labels.rows_for(chunk)?;
            let sigma = cvae.sigma;
            let rmse = cvae_step(&mut cvae, &x_t, &y_rows, sigma, &mut rng).map_err(context)?;
            cvae.sigma_ema_update(rmse);

            // (d): refresh the label vectors from the pre-update alphas.
            update_labels(&mut labels, chunk, &alpha_values, ds)?;

            let w = chunk.len() as f64 / ds.n as f64;
            sums.generative_term += w * graph.breakdown.generative_term;
            sums.candidate_term += w * graph.breakdown.candidate_term;
            sums.kl_term += w * graph.breakdown.kl_term;
            sums.total += w * graph.breakdown.total;
        }
        metrics.push(EpochMetrics {
            epoch,
            generative_term: sums.generative_term,
            candidate_term: sums.candidate_term,
            kl_term: sums.kl_term,
            total: sums.total,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            write_checkpoint(out_dir, epoch, config, &classifier, &cvae)?;
        }
    }
    write_checkpoint(out_dir, config.t, config, &classifier, &cvae)?;
    if let Some(dir) = out_dir {
        write_metrics_csv(&metrics, &dir.join("metrics.csv"))?;
    }
    Ok(FitResult { classifier, cvae, labels, prior, metrics })
}

/// Train only the classifier with the ablated discriminative objective.
pub fn fit_ablation(
    ds: &PllDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitResult> {
    config.validate()?;
    if ds.n == 0 {
        return Err(Error::Config("cannot train on an empty dataset".to_string()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut classifier = ClassifierNet::new(ds.d, ds.k, config.hidden, config.lr, &mut rng);
    let mut cvae = CvaeNets::new(ds.d, ds.k, config.m, config.hidden, config.lr, &mut rng);
    cvae.sigma_ema_decay = config.sigma_ema_decay;
    cvae.sigma_floor = config.sigma_floor;
    let bounds = PriorBounds::from_dataset(ds);
    let prior = compute_prior(&bounds, config.delta)?;
    let mut labels = LabelTable::init_uniform(ds);

    let mut order: Vec<usize> = (0..ds.n).collect();
    let mut metrics = Vec::with_capacity(config.t);
    for epoch in 1..=config.t {
        let started = Instant::now();
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(config.n_m).enumerate() {
            let context =
                |e: Error| Error::Numeric(format!("epoch {epoch}, batch {batch_no}: {e}"));
            let (x_t, mask_t) = batch_tensors(ds, chunk)?;
            let batch = BatchView { features: &x_t, masks: &mask_t };
            let label_rows = labels.rows_for(chunk)?;
            let tape = Tape::new();
            let cls_bound = classifier.bind(&tape);
            let (loss, alpha) = ablation_graph(
                &tape,
                &mut classifier,
                &cls_bound,
                &label_rows,
                &batch,
                config.b,
                config.ablation_concentration,
                config.sample_mode,
                true,
                &mut rng,
            )
            .map_err(context)?;
            let loss_value = loss.value().as_scalar()?;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, batch {batch_no}: ablation loss became non-finite"
                )));
            }
            let alpha_values = alpha.value();
            let mut grads = tape.backward(loss).map_err(context)?;
            classifier
                .store_mut()
                .apply_grads(&cls_bound, &mut grads)
                .map_err(context)?;
            update_labels(&mut labels, chunk, &alpha_values, ds)?;
            loss_sum += loss_value * chunk.len() as f64 / ds.n as f64;
        }
        metrics.push(EpochMetrics {
            epoch,
            generative_term: 0.0,
            candidate_term: 0.0,
            kl_term: 0.0,
            total: -loss_sum,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    write_checkpoint(out_dir, config.t, config, &classifier, &cvae)?;
    if let Some(dir) = out_dir {
        write_metrics_csv(&metrics, &dir.join("metrics.csv"))?;
    }
    Ok(FitResult { classifier, cvae, labels, prior, metrics })
}

/// Append-style metrics CSV: one row per epoch.
pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,generative_term,candidate_term,kl_term,total,wall_ms")?;
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch, m.generative_term, m.candidate_term, m.kl_term, m.total, m.wall_ms
        )?;
    }
    Ok(())
}

/// Predict class probabilities for one instance with the full candidate
/// set: g_j(x) = alpha_j / sum alpha.
pub fn predict(classifier: &mut ClassifierNet, x: &[f64]) -> Result<Vec<f64>> {
    let features = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
    let proba = classifier.predict_proba(&features)?;
    Ok(proba.row(0).to_vec())
}

/// Argmax labels for a feature matrix.
pub fn predict_labels(classifier: &mut ClassifierNet, features: &Tensor) -> Result<Vec<usize>> {
    let proba = classifier.predict_proba(features)?;
    Ok((0..proba.shape()[0]).map(|r| argmax(proba.row(r))).collect())
}

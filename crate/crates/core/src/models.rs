//! Neural components: the amortized classifier producing Dirichlet
//! parameters, the CVAE encoder/decoder pair, and a plain softmax MLP used
//! as supervised probe.
//!
//! Candidate sets are fed to the classifier as a k-dimensional 0/1
//! indicator concatenated to the features; prediction time uses the full
//! label set, i.e. the all-ones indicator. All MLPs are two hidden layers
//! of ReLU units; the classifier and the probe also use batch
//! normalization. Weights start Kaiming-uniform with zero biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{DirichletParams, GaussianDiag, LOG_VAR_CLAMP};
use crate::error::{Error, Result};
use crate::tensor::adam::AdamHyper;
use crate::tensor::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn kaiming_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("generated data matches shape")
}

/// Fully connected layer y = x W + b with W of shape [in, out].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming_uniform(in_dim, out_dim, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    fn forward<'t>(&self, bound: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(bound.var(self.w))?.add(bound.var(self.b))
    }

    fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        store.get_mut(self.b).data_mut().fill(0.0);
    }
}

/// Batch normalization with running statistics (momentum 0.9, eps 1e-5).
/// Training mode normalizes by batch statistics and updates the running
/// buffers; inference mode applies the affine transform with frozen stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: Tensor,
    running_var: Tensor,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::ones(&[dim]),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    fn forward<'t>(
        &mut self,
        bound: &BoundParams<'t>,
        x: Var<'t>,
        training: bool,
    ) -> Result<Var<'t>> {
        if training {
            let n = x.shape()[0];
            let (y, batch_mean, batch_var) =
                x.batch_norm_train(bound.var(self.gamma), bound.var(self.beta), self.eps)?;
            // Running variance uses the unbiased batch estimate.
            let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            for (rm, &bm) in self.running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
                *rm = self.momentum * *rm + (1.0 - self.momentum) * bm;
            }
            for (rv, &bv) in self.running_var.data_mut().iter_mut().zip(batch_var.data()) {
                *rv = self.momentum * *rv + (1.0 - self.momentum) * bv * unbias;
            }
            Ok(y)
        } else {
            x.batch_norm_infer(
                bound.var(self.gamma),
                bound.var(self.beta),
                &self.running_mean,
                &self.running_var,
                self.eps,
            )
        }
    }
}

/// Classifier f(x, s) mapping features plus a candidate indicator to
/// non-negative Dirichlet offsets; alpha = softplus(logits) + 1 >= 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierNet {
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    store: ParamStore,
    l1: Linear,
    bn1: BatchNorm,
    l2: Linear,
    bn2: BatchNorm,
    l3: Linear,
}

impl ClassifierNet {
    pub fn new<R: Rng + ?Sized>(d: usize, k: usize, hidden: usize, lr: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new(AdamHyper::with_lr(lr));
        let l1 = Linear::new(&mut store, "classifier.l1", d + k, hidden, rng);
        let bn1 = BatchNorm::new(&mut store, "classifier.bn1", hidden);
        let l2 = Linear::new(&mut store, "classifier.l2", hidden, hidden, rng);
        let bn2 = BatchNorm::new(&mut store, "classifier.bn2", hidden);
        let l3 = Linear::new(&mut store, "classifier.l3", hidden, k, rng);
        ClassifierNet { d, k, hidden, store, l1, bn1, l2, bn2, l3 }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        self.store.bind(tape)
    }

    /// Stack features and 0/1 candidate indicators into the net input [n, d+k].
    pub fn build_input(&self, features: &Tensor, masks: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.shape()[1] != self.d {
            return Err(Error::shape(
                "classifier",
                format!("features {:?}, expected [n, {}]", features.shape(), self.d),
            ));
        }
        if masks.shape() != [features.shape()[0], self.k] {
            return Err(Error::shape(
                "classifier",
                format!("masks {:?}, expected [n, {}]", masks.shape(), self.k),
            ));
        }
        crate::tensor::ops::concat(&[features, masks], 1)
    }

    /// Dirichlet parameters for a batch of prepared inputs.
    pub fn alpha_from_input<'t>(
        &mut self,
        bound: &BoundParams<'t>,
        input: Var<'t>,
        training: bool,
    ) -> Result<Var<'t>> {
        let h = self.l1.forward(bound, input)?;
        let h = self.bn1.forward(bound, h, training)?.relu()?;
        let h = self.l2.forward(bound, h)?;
        let h = self.bn2.forward(bound, h, training)?.relu()?;
        self.l3.forward(bound, h)?.softplus()?.add_const(1.0)
    }

    /// Single-instance Dirichlet head (inference mode).
    pub fn classifier_alpha(&mut self, x: &[f64], s: &[bool]) -> Result<DirichletParams> {
        if x.len() != self.d || s.len() != self.k {
            return Err(Error::shape(
                "classifier_alpha",
                format!("x has {} dims (want {}), s has {} bits (want {})", x.len(), self.d, s.len(), self.k),
            ));
        }
        let mut input = x.to_vec();
        input.extend(s.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let input = tape.constant(Tensor::from_vec(&[1, self.d + self.k], input)?);
        let alpha = self.alpha_from_input(&bound, input, false)?;
        DirichletParams::new(alpha.value().row(0).to_vec())
    }

    /// Class probabilities g(x) = alpha(x, Y) / sum alpha(x, Y) with the
    /// full candidate set, inference-mode batch norm.
    pub fn predict_proba(&mut self, features: &Tensor) -> Result<Tensor> {
        let n = features.shape()[0];
        let masks = Tensor::ones(&[n, self.k]);
        let input_t = self.build_input(features, &masks)?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let input = tape.constant(input_t);
        let alpha = self.alpha_from_input(&bound, input, false)?.value();
        let mut out = Tensor::zeros(&[n, self.k]);
        for r in 0..n {
            let row = alpha.row(r);
            let total: f64 = row.iter().sum();
            for (j, &a) in row.iter().enumerate() {
                out.data_mut()[r * self.k + j] = a / total;
            }
        }
        Ok(out)
    }

    /// Zero the output layer; softplus(0) + 1 makes every alpha 1 + ln 2.
    pub fn zero_final_layer(&mut self) {
        self.l3.zero(&mut self.store);
    }
}

/// Encoder (gamma), decoder (theta) and the decoder noise scale sigma.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvaeNets {
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub hidden: usize,
    store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    pub sigma: f64,
    pub sigma_ema_decay: f64,
    pub sigma_floor: f64,
}

impl CvaeNets {
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        k: usize,
        m: usize,
        hidden: usize,
        lr: f64,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new(AdamHyper::with_lr(lr));
        let enc1 = Linear::new(&mut store, "encoder.l1", d + k, hidden, rng);
        let enc2 = Linear::new(&mut store, "encoder.l2", hidden, 2 * m, rng);
        let dec1 = Linear::new(&mut store, "decoder.l1", k + m, hidden, rng);
        let dec2 = Linear::new(&mut store, "decoder.l2", hidden, d, rng);
        CvaeNets {
            d,
            k,
            m,
            hidden,
            store,
            enc1,
            enc2,
            dec1,
            dec2,
            sigma: 1.0,
            sigma_ema_decay: 0.99,
            sigma_floor: 1e-2,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        self.store.bind(tape)
    }

    /// Encoder r(z | x, y): input [n, d+k], output mean and clamped
    /// log-variance, each [n, m].
    pub fn encode<'t>(
        &self,
        bound: &BoundParams<'t>,
        xy: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.enc1.forward(bound, xy)?.relu()?;
        let out = self.enc2.forward(bound, h)?;
        let mu = out.slice(1, 0, self.m)?;
        let log_var = out.slice(1, self.m, 2 * self.m)?.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;
        Ok((mu, log_var))
    }

    /// Decoder mean mu(y, z): input [n, k+m], output [n, d].
    pub fn decode<'t>(&self, bound: &BoundParams<'t>, yz: Var<'t>) -> Result<Var<'t>> {
        let h = self.dec1.forward(bound, yz)?.relu()?;
        self.dec2.forward(bound, h)
    }

    /// sigma <- decay * sigma + (1 - decay) * max(batch_rmse, floor).
    pub fn sigma_ema_update(&mut self, batch_rmse: f64) -> f64 {
        debug_assert!(batch_rmse >= 0.0);
        self.sigma = self.sigma_ema_decay * self.sigma
            + (1.0 - self.sigma_ema_decay) * batch_rmse.max(self.sigma_floor);
        self.sigma
    }
}

/// Reparameterized Gaussian rows z = mu + exp(log_var / 2) * eps on the
/// tape; eps is drawn fresh from `rng` and enters as a constant.
pub fn sample_gaussian_rows<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    mu: Var<'t>,
    log_var: Var<'t>,
    rng: &mut R,
) -> Result<(Var<'t>, Var<'t>)> {
    let shape = mu.shape();
    let eps_data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    let eps = tape.constant(Tensor::from_vec(&shape, eps_data)?);
    let z = mu.add(log_var.scale(0.5)?.exp()?.mul(eps)?)?;
    Ok((z, eps))
}

/// One full CVAE pass over a batch, recorded on the caller's tape.
pub struct CvaeFlow<'t> {
    pub mu: Var<'t>,
    pub log_var: Var<'t>,
    pub z: Var<'t>,
    pub recon: Var<'t>,
}

/// Encode (x, y), draw one reparameterized z, decode (y, z).
pub fn cvae_forward_rows<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    nets: &CvaeNets,
    bound: &BoundParams<'t>,
    x: Var<'t>,
    y: Var<'t>,
    rng: &mut R,
) -> Result<CvaeFlow<'t>> {
    let xy = tape.concat(&[x, y], 1)?;
    let (mu, log_var) = nets.encode(bound, xy)?;
    let (z, _eps) = sample_gaussian_rows(tape, mu, log_var, rng)?;
    let yz = tape.concat(&[y, z], 1)?;
    let recon = nets.decode(bound, yz)?;
    Ok(CvaeFlow { mu, log_var, z, recon })
}

/// Single-instance CVAE pass: returns the encoder distribution, the latent
/// draw and the reconstruction mean.
pub fn cvae_forward<R: Rng + ?Sized>(
    nets: &CvaeNets,
    x: &[f64],
    y: &[f64],
    rng: &mut R,
) -> Result<(GaussianDiag, Vec<f64>, Vec<f64>)> {
    if x.len() != nets.d || y.len() != nets.k {
        return Err(Error::shape(
            "cvae_forward",
            format!("x has {} dims (want {}), y has {} (want {})", x.len(), nets.d, y.len(), nets.k),
        ));
    }
    let tape = Tape::new();
    let bound = nets.bind(&tape);
    let xv = tape.constant(Tensor::from_vec(&[1, nets.d], x.to_vec())?);
    let yv = tape.constant(Tensor::from_vec(&[1, nets.k], y.to_vec())?);
    let flow = cvae_forward_rows(&tape, nets, &bound, xv, yv, rng)?;
    let gauss = GaussianDiag::new(flow.mu.value().row(0).to_vec(), flow.log_var.value().row(0).to_vec())?;
    Ok((gauss, flow.z.value().row(0).to_vec(), flow.recon.value().row(0).to_vec()))
}

/// Gaussian reconstruction log-likelihood
/// -||x - mu||^2 / (2 sigma^2) - (d/2) log(2 pi sigma^2),
/// with d the feature dimension.
pub fn recon_loglik(x: &[f64], mu_theta: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != mu_theta.len() {
        return Err(Error::shape(
            "recon_loglik",
            format!("x has {} dims, mu has {}", x.len(), mu_theta.len()),
        ));
    }
    if sigma <= 0.0 {
        return Err(Error::domain("recon_loglik", format!("sigma must be positive, got {sigma}")));
    }
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mu_theta).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sq / (2.0 * sigma * sigma) - 0.5 * d * (LN_2PI + 2.0 * sigma.ln()))
}

/// Rowwise reconstruction log-likelihood on the tape: x and recon are
/// [n, d], the result is an [n] vector.
pub fn recon_loglik_rows<'t>(x: Var<'t>, recon: Var<'t>, sigma: f64) -> Result<Var<'t>> {
    if sigma <= 0.0 {
        return Err(Error::domain("recon_loglik", format!("sigma must be positive, got {sigma}")));
    }
    let d = x.shape()[1] as f64;
    let constant = -0.5 * d * (LN_2PI + 2.0 * sigma.ln());
    x.sub(recon)?
        .square()?
        .sum_axis(1)?
        .scale(-1.0 / (2.0 * sigma * sigma))?
        .add_const(constant)
}

/// Plain softmax MLP (same family as the classifier) used as supervised
/// probe for candidate generation and as oracle in tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftmaxMlp {
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    store: ParamStore,
    l1: Linear,
    bn1: BatchNorm,
    l2: Linear,
    bn2: BatchNorm,
    l3: Linear,
}

impl SoftmaxMlp {
    pub fn new<R: Rng + ?Sized>(d: usize, k: usize, hidden: usize, lr: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new(AdamHyper::with_lr(lr));
        let l1 = Linear::new(&mut store, "probe.l1", d, hidden, rng);
        let bn1 = BatchNorm::new(&mut store, "probe.bn1", hidden);
        let l2 = Linear::new(&mut store, "probe.l2", hidden, hidden, rng);
        let bn2 = BatchNorm::new(&mut store, "probe.bn2", hidden);
        let l3 = Linear::new(&mut store, "probe.l3", hidden, k, rng);
        SoftmaxMlp { d, k, hidden, store, l1, bn1, l2, bn2, l3 }
    }

    fn logits<'t>(
        &mut self,
        bound: &BoundParams<'t>,
        x: Var<'t>,
        training: bool,
    ) -> Result<Var<'t>> {
        let h = self.l1.forward(bound, x)?;
        let h = self.bn1.forward(bound, h, training)?.relu()?;
        let h = self.l2.forward(bound, h)?;
        let h = self.bn2.forward(bound, h, training)?.relu()?;
        self.l3.forward(bound, h)
    }

    /// Minimize cross-entropy with Adam over shuffled mini-batches.
    pub fn train_supervised<R: Rng + ?Sized>(
        &mut self,
        features: &Tensor,
        labels: &[usize],
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<()> {
        let n = features.shape()[0];
        if labels.len() != n {
            return Err(Error::shape(
                "train_supervised",
                format!("{n} rows but {} labels", labels.len()),
            ));
        }
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..epochs {
            shuffle(&mut order, rng);
            for chunk in order.chunks(batch_size.max(1)) {
                let nb = chunk.len();
                let mut xb = Vec::with_capacity(nb * self.d);
                let mut onehot = vec![0.0; nb * self.k];
                for (r, &i) in chunk.iter().enumerate() {
                    xb.extend_from_slice(features.row(i));
                    onehot[r * self.k + labels[i]] = 1.0;
                }
                let tape = Tape::new();
                let bound = self.store.bind(&tape);
                let x = tape.constant(Tensor::from_vec(&[nb, self.d], xb)?);
                let target = tape.constant(Tensor::from_vec(&[nb, self.k], onehot)?);
                let logits = self.logits(&bound, x, true)?;
                let lse = logits.log_sum_exp_rows()?.reshape(&[nb, 1])?;
                let log_probs = logits.sub(lse.broadcast_to(&[nb, self.k])?)?;
                let loss = log_probs.mul(target)?.sum_axis(1)?.mean()?.neg()?;
                let mut grads = tape.backward(loss)?;
                self.store.apply_grads(&bound, &mut grads)?;
            }
        }
        Ok(())
    }

    /// Softmax probabilities with inference-mode batch norm.
    pub fn predict_proba(&mut self, features: &Tensor) -> Result<Tensor> {
        let n = features.shape()[0];
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let x = tape.constant(features.clone());
        let logits = self.logits(&bound, x, false)?.value();
        let mut out = Tensor::zeros(&[n, self.k]);
        for r in 0..n {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                out.data_mut()[r * self.k + j] = e / z;
            }
        }
        Ok(out)
    }

    pub fn predict(&mut self, features: &Tensor) -> Result<Vec<usize>> {
        let proba = self.predict_proba(features)?;
        Ok((0..proba.shape()[0])
            .map(|r| argmax(proba.row(r)))
            .collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fisher-Yates shuffle driven by the run RNG.
pub(crate) fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

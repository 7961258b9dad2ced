//! Acceptance gates: one test per criterion, each printing a PASS/FAIL
//! line (run with `--nocapture` to see them). The blobs experiment is
//! shared between the end-to-end, ablation and determinism criteria
//! through a lazily computed fixture.
//!
//! The real-world spot check needs the `lost` dataset converted to `.pll`;
//! point `PLLVI_LOST` at the file (or place it at `data/lost.pll` in the
//! repository root). Without it that criterion reports SKIP.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use pllvi_core::data::{generate_candidates, load_dataset, synth_blobs, GenSpec, GenStrategy, PllDataset};
use pllvi_core::dist::{
    dirichlet_log_pdf, dirichlet_sample_grad, gaussian_diag_log_pdf, kl_dirichlet,
    kl_gaussian_std, sample_dirichlet, sample_dirichlet_retained, sample_gaussian, DirSampleMode,
    DirichletParams, GaussianDiag,
};
use pllvi_core::eval::{run_experiment, welch_ttest, EvalConfig, Method, RunReport};
use pllvi_core::models::{ClassifierNet, CvaeNets, SoftmaxMlp};
use pllvi_core::objective::{beta_elbo_graph, candidate_mass, BatchView, ElboOptions};
use pllvi_core::prior::{solve_max_entropy, PriorBounds};
use pllvi_core::tensor::grad_check::grad_check;
use pllvi_core::tensor::special::digamma;
use pllvi_core::tensor::tape::Tape;
use pllvi_core::tensor::Tensor;
use pllvi_core::train::TrainConfig;

const LN_2: f64 = std::f64::consts::LN_2;

fn report(criterion: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {verdict} [{detail}]");
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------
// criterion 1: the candidate-set distribution is a valid mass function

#[test]
fn criterion_1_candidate_mass_enumeration() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xC1);
    let mut worst = 0.0_f64;
    for k in 2..=12usize {
        for _ in 0..100 {
            let alpha = DirichletParams::new(
                (0..k).map(|_| rng.random_range(0.2..5.0)).collect(),
            )
            .unwrap();
            let y = sample_dirichlet(&alpha, &mut rng);
            let mut total = 0.0;
            for bits in 0..(1u64 << k) {
                let s: Vec<bool> = (0..k).map(|j| bits >> j & 1 == 1).collect();
                total += candidate_mass(&s, &y);
            }
            worst = worst.max((total - 1.0).abs());
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "1 (mass-function enumeration)",
        worst < 1e-9 && elapsed < 10.0,
        &format!("max |sum - 1| = {worst:.2e} over k = 2..12, {elapsed:.1} s"),
    );
}

// ---------------------------------------------------------------------
// criterion 2: closed forms against Monte Carlo oracles

#[test]
fn criterion_2_closed_forms_vs_monte_carlo() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xC2);

    // Dirichlet KL, 20 parameter pairs at 1e6 samples
    let mut dir_ok = true;
    let mut dir_worst_z = 0.0_f64;
    for _ in 0..20 {
        let k = rng.random_range(2..=6);
        let q = DirichletParams::new((0..k).map(|_| rng.random_range(1.0..10.0)).collect())
            .unwrap();
        let p = DirichletParams::new((0..k).map(|_| rng.random_range(1.0..10.0)).collect())
            .unwrap();
        let closed = kl_dirichlet(&q, &p).unwrap();
        let n = 1_000_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let y = sample_dirichlet(&q, &mut rng);
            let v = dirichlet_log_pdf(&y, &q).unwrap() - dirichlet_log_pdf(&y, &p).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt().max(1e-12);
        let z = (mean - closed).abs() / se;
        dir_worst_z = dir_worst_z.max(z);
        dir_ok &= z < 3.0;
    }

    // Gaussian KL to the standard normal, 20 parameter sets at 1e5 samples
    let mut gauss_ok = true;
    let mut gauss_worst_z = 0.0_f64;
    for _ in 0..20 {
        let m = rng.random_range(1..=8);
        let g = GaussianDiag::new(
            (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let std = GaussianDiag::new(vec![0.0; m], vec![0.0; m]).unwrap();
        let closed = kl_gaussian_std(&g);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let z = sample_gaussian(&g, &mut rng);
            let v = gaussian_diag_log_pdf(&z, &g).unwrap() - gaussian_diag_log_pdf(&z, &std).unwrap();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt().max(1e-12);
        let z = (mean - closed).abs() / se;
        gauss_worst_z = gauss_worst_z.max(z);
        gauss_ok &= z < 3.0;
    }

    // candidate-term closed form psi(alpha_s) - psi(alpha_0) - (k-1) log 2
    let mut cand_ok = true;
    let mut cand_worst_z = 0.0_f64;
    for _ in 0..10 {
        let k = rng.random_range(2..=6);
        let alpha = DirichletParams::new((0..k).map(|_| rng.random_range(0.5..5.0)).collect())
            .unwrap();
        let mut s: Vec<bool> = (0..k).map(|_| rng.random::<bool>()).collect();
        if !s.iter().any(|&b| b) {
            s[0] = true;
        }
        let alpha_s: f64 = s
            .iter()
            .zip(alpha.alpha())
            .filter(|(b, _)| **b)
            .map(|(_, a)| a)
            .sum();
        let closed = digamma(alpha_s) - digamma(alpha.sum()) - (k as f64 - 1.0) * LN_2;
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let y = sample_dirichlet(&alpha, &mut rng);
            let inner: f64 = s.iter().zip(&y).filter(|(b, _)| **b).map(|(_, v)| v).sum();
            let v = inner.ln() - (k as f64 - 1.0) * LN_2;
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt().max(1e-12);
        let z = (mean - closed).abs() / se;
        cand_worst_z = cand_worst_z.max(z);
        cand_ok &= z < 3.0;
    }

    let elapsed = started.elapsed().as_secs_f64();
    report(
        "2 (closed form vs MC oracles)",
        dir_ok && gauss_ok && cand_ok && elapsed < 120.0,
        &format!(
            "worst z: dirichlet {dir_worst_z:.2}, gaussian {gauss_worst_z:.2}, candidate {cand_worst_z:.2}; {elapsed:.0} s"
        ),
    );
}

// ---------------------------------------------------------------------
// criterion 3: finite-difference gradient suite

fn check(
    name: &str,
    failures: &mut Vec<String>,
    point: Tensor,
    tol: f64,
    f: impl for<'t> Fn(&'t Tape, pllvi_core::tensor::tape::Var<'t>) -> pllvi_core::Result<pllvi_core::tensor::tape::Var<'t>>,
) {
    match grad_check(f, &point, 1e-5, tol) {
        Ok(rep) if rep.pass => {}
        Ok(rep) => failures.push(format!("{name}: {}", rep.message)),
        Err(e) => failures.push(format!("{name}: {e}")),
    }
}

#[test]
fn criterion_3_gradient_suite() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xC3);
    let mut failures: Vec<String> = Vec::new();

    let vec_pos = Tensor::vector(&(0..6).map(|_| rng.random_range(0.3..2.5)).collect::<Vec<_>>());
    let vec_any = Tensor::vector(&(0..6).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
    let mat = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let mat_sq = Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    // keep relu/clamp inputs away from their kinks
    let vec_away =
        Tensor::vector(&(0..6).map(|_| rng.random_range(0.2..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect::<Vec<_>>());

    const LINEAR: f64 = 1e-6;
    const GENERAL: f64 = 1e-4;

    check("add", &mut failures, mat.clone(), LINEAR, {
        let b = Tensor::vector(&[0.3, -0.7, 1.1, 0.4]);
        move |t, v| v.add(t.constant(b.clone()))?.sum()
    });
    check("sub", &mut failures, mat.clone(), LINEAR, {
        let b = Tensor::vector(&[0.3, -0.7, 1.1, 0.4]);
        move |t, v| t.constant(b.clone()).sub(v)?.square()?.sum()
    });
    check("mul", &mut failures, mat.clone(), GENERAL, {
        let b = Tensor::vector(&[0.3, -0.7, 1.1, 0.4]);
        move |t, v| v.mul(t.constant(b.clone()))?.sum()
    });
    check("div", &mut failures, mat.clone(), GENERAL, {
        let b = Tensor::vector(&[0.8, 1.7, 1.1, 2.4]);
        move |t, v| v.div(t.constant(b.clone()))?.square()?.sum()
    });
    check("div_denominator", &mut failures, vec_pos.clone(), GENERAL, {
        let b = Tensor::vector(&[0.3, -0.7, 1.1, 0.4, 0.9, -1.2]);
        move |t, v| t.constant(b.clone()).div(v)?.sum()
    });
    check("matmul", &mut failures, mat_sq.clone(), LINEAR, {
        let b = Tensor::matrix(3, 3, (0..9).map(|i| 0.1 * i as f64 - 0.4).collect()).unwrap();
        move |t, v| v.matmul(t.constant(b.clone()))?.sum()
    });
    check("matmul_rhs", &mut failures, mat_sq.clone(), LINEAR, {
        let b = Tensor::matrix(3, 3, (0..9).map(|i| 0.1 * i as f64 - 0.4).collect()).unwrap();
        move |t, v| t.constant(b.clone()).matmul(v)?.square()?.sum()
    });
    check("relu", &mut failures, vec_away.clone(), GENERAL, |_, v| v.relu()?.sum());
    check("softplus", &mut failures, vec_any.clone(), GENERAL, |_, v| v.softplus()?.sum());
    check("sigmoid", &mut failures, vec_any.clone(), GENERAL, |_, v| v.sigmoid()?.sum());
    check("exp", &mut failures, vec_any.clone(), GENERAL, |_, v| v.exp()?.sum());
    check("log", &mut failures, vec_pos.clone(), GENERAL, |_, v| v.log()?.sum());
    check("lgamma", &mut failures, vec_pos.clone(), GENERAL, |_, v| v.lgamma()?.sum());
    check("digamma", &mut failures, vec_pos.clone(), GENERAL, |_, v| v.digamma()?.sum());
    check("square", &mut failures, vec_any.clone(), GENERAL, |_, v| v.square()?.sum());
    check("neg_scale_addconst", &mut failures, vec_any.clone(), LINEAR, |_, v| {
        v.neg()?.scale(1.7)?.add_const(0.3)?.sum()
    });
    check("clamp_inside", &mut failures, vec_away.clone(), GENERAL, |_, v| {
        v.clamp(-10.0, 10.0)?.square()?.sum()
    });
    check("sum", &mut failures, mat.clone(), LINEAR, |_, v| v.sum());
    check("mean", &mut failures, mat.clone(), LINEAR, |_, v| v.mean());
    check("sum_axis0", &mut failures, mat.clone(), LINEAR, |_, v| {
        v.sum_axis(0)?.square()?.sum()
    });
    check("sum_axis1", &mut failures, mat.clone(), LINEAR, |_, v| {
        v.sum_axis(1)?.square()?.sum()
    });
    check("mean_axis", &mut failures, mat.clone(), LINEAR, |_, v| {
        v.mean_axis(1)?.square()?.sum()
    });
    check("broadcast", &mut failures, vec_any.clone(), LINEAR, |_, v| {
        v.reshape(&[1, 6])?.broadcast_to(&[4, 6])?.square()?.sum()
    });
    check("reshape_slice_concat", &mut failures, mat.clone(), LINEAR, |t, v| {
        let left = v.slice(1, 0, 2)?;
        let right = v.slice(1, 2, 4)?;
        t.concat(&[right, left], 1)?.square()?.sum()
    });
    check("log_sum_exp", &mut failures, mat.clone(), GENERAL, |_, v| {
        v.log_sum_exp_rows()?.sum()
    });
    check("batch_norm_train_x", &mut failures, mat.clone(), GENERAL, |t, v| {
        let gamma = t.leaf(Tensor::vector(&[1.1, 0.9, 1.3, 0.8]), false);
        let beta = t.leaf(Tensor::vector(&[0.1, -0.2, 0.0, 0.3]), false);
        let (y, _, _) = v.batch_norm_train(gamma, beta, 1e-5)?;
        y.square()?.sum()
    });
    check("batch_norm_train_gamma", &mut failures, Tensor::vector(&[1.1, 0.9, 1.3, 0.8]), GENERAL, {
        let x = mat.clone();
        move |t, v| {
            let xc = t.constant(x.clone());
            let beta = t.constant(Tensor::vector(&[0.1, -0.2, 0.0, 0.3]));
            let (y, _, _) = xc.batch_norm_train(v, beta, 1e-5)?;
            y.square()?.sum()
        }
    });
    check("batch_norm_infer", &mut failures, mat.clone(), GENERAL, |t, v| {
        let gamma = t.leaf(Tensor::vector(&[1.1, 0.9, 1.3, 0.8]), false);
        let beta = t.leaf(Tensor::vector(&[0.1, -0.2, 0.0, 0.3]), false);
        let mean = Tensor::vector(&[0.2, -0.1, 0.0, 0.4]);
        let var = Tensor::vector(&[1.3, 0.7, 1.0, 0.5]);
        v.batch_norm_infer(gamma, beta, &mean, &var, 1e-5)?.square()?.sum()
    });

    // full beta-ELBO on the toy configuration, common random numbers via
    // inverse-CDF Dirichlet sampling
    let elbo_failures = elbo_gradient_check();
    failures.extend(elbo_failures);

    let elapsed = started.elapsed().as_secs_f64();
    report(
        "3 (gradient suite)",
        failures.is_empty() && elapsed < 120.0,
        &if failures.is_empty() {
            format!("all primitives and the sampled beta-ELBO match finite differences; {elapsed:.0} s")
        } else {
            failures.join("; ")
        },
    );
}

/// Finite-difference check of the full beta-ELBO (k=3, d=4, m=2, b=b'=2)
/// with respect to every classifier and CVAE parameter.
fn elbo_gradient_check() -> Vec<String> {
    const SEED: u64 = 1301;
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let classifier0 = ClassifierNet::new(4, 3, 8, 1e-3, &mut rng);
    let cvae0 = CvaeNets::new(4, 3, 2, 8, 1e-3, &mut rng);
    let n = 4;
    let features = Tensor::from_vec(&[n, 4], (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut masks = vec![0.0; n * 3];
    for r in 0..n {
        masks[r * 3 + r % 3] = 1.0;
        masks[r * 3 + (r + 1) % 3] = 1.0;
    }
    let masks = Tensor::from_vec(&[n, 3], masks).unwrap();
    let prior = DirichletParams::new(vec![1.4, 1.0, 1.1]).unwrap();
    let opts = ElboOptions {
        b: 2,
        b_prime: 2,
        beta: 1.0,
        sample_mode: DirSampleMode::InverseCdf,
        closed_form_candidate: false,
    };

    let eval_total = |cls_flat: &[f64], cvae_flat: &[f64]| -> f64 {
        let mut classifier = classifier0.clone();
        classifier.store_mut().unflatten(cls_flat);
        let mut cvae = cvae0.clone();
        cvae.store_mut().unflatten(cvae_flat);
        let tape = Tape::new();
        let cls_bound = classifier.bind(&tape);
        let cvae_bound = cvae.bind(&tape);
        let mut rng = ChaCha20Rng::seed_from_u64(SEED);
        let graph = beta_elbo_graph(
            &tape,
            &mut classifier,
            &cls_bound,
            &cvae,
            &cvae_bound,
            &prior,
            &BatchView { features: &features, masks: &masks },
            &opts,
            false,
            &mut rng,
        )
        .unwrap();
        graph.breakdown.total
    };

    // analytic gradients from one taped pass
    let cls_flat = classifier0.store().flatten();
    let cvae_flat = cvae0.store().flatten();
    let (cls_grad, cvae_grad) = {
        let mut classifier = classifier0.clone();
        let mut cvae = cvae0.clone();
        cvae.store_mut().unflatten(&cvae_flat);
        let tape = Tape::new();
        let cls_bound = classifier.bind(&tape);
        let cvae_bound = cvae.bind(&tape);
        let mut rng = ChaCha20Rng::seed_from_u64(SEED);
        let graph = beta_elbo_graph(
            &tape,
            &mut classifier,
            &cls_bound,
            &cvae,
            &cvae_bound,
            &prior,
            &BatchView { features: &features, masks: &masks },
            &opts,
            false,
            &mut rng,
        )
        .unwrap();
        let mut grads = tape.backward(graph.loss).unwrap();
        let flatten_grads = |store: &pllvi_core::tensor::params::ParamStore,
                             bound: &pllvi_core::tensor::params::BoundParams<'_>,
                             grads: &mut pllvi_core::tensor::tape::Gradients| {
            let mut out = Vec::new();
            for (i, t) in store.tensors().iter().enumerate() {
                let var = bound.var(pllvi_core::tensor::params::ParamId(i));
                match grads.take(var) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat(0.0).take(t.len())),
                }
            }
            out
        };
        (
            flatten_grads(classifier.store(), &cls_bound, &mut grads),
            flatten_grads(cvae.store(), &cvae_bound, &mut grads),
        )
    };

    // the graph minimizes -total, so d(total)/d(theta) = -loss gradient
    let mut failures = Vec::new();
    let mut worst = (0.0_f64, String::new());
    let mut check_block = |name: &str, flat: &[f64], grad: &[f64], which: usize| {
        for i in 0..flat.len() {
            let orig = flat[i];
            let h = 1e-5 * orig.abs().max(1.0);
            let (mut up, mut down) = (flat.to_vec(), flat.to_vec());
            up[i] = orig + h;
            down[i] = orig - h;
            let (fu, fd) = if which == 0 {
                (eval_total(&up, &cvae_flat), eval_total(&down, &cvae_flat))
            } else {
                (eval_total(&cls_flat, &up), eval_total(&cls_flat, &down))
            };
            let fd_grad = (fu - fd) / (2.0 * h);
            let analytic = -grad[i];
            let rel = (analytic - fd_grad).abs() / analytic.abs().max(fd_grad.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]"));
            }
            if rel > 1e-3 {
                failures.push(format!(
                    "{name}[{i}]: analytic {analytic:.6e} vs fd {fd_grad:.6e} (rel {rel:.2e})"
                ));
            }
        }
    };
    check_block("classifier", &cls_flat, &cls_grad, 0);
    check_block("cvae", &cvae_flat, &cvae_grad, 1);
    if failures.is_empty() {
        println!(
            "  beta-ELBO gradient: {} parameters checked, worst rel err {:.2e} at {}",
            cls_flat.len() + cvae_flat.len(),
            worst.0,
            worst.1
        );
    }
    failures
}

// ---------------------------------------------------------------------
// criterion 4: implicit reparameterization against the analytic mean
// derivative

#[test]
fn criterion_4_dirichlet_implicit_gradients() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xC4);
    let n = 100_000;
    let mut worst_z = 0.0_f64;
    let mut ok = true;
    for _ in 0..10 {
        let k = rng.random_range(2..=6);
        let alpha =
            DirichletParams::new((0..k).map(|_| rng.random_range(0.5..5.0)).collect()).unwrap();
        let j = rng.random_range(0..k);
        let mut downstream = vec![0.0; k];
        downstream[j] = 1.0;
        let mut sums = vec![0.0; k];
        let mut sumsq = vec![0.0; k];
        for _ in 0..n {
            let (_, retained) =
                sample_dirichlet_retained(&alpha, &mut rng, DirSampleMode::MarsagliaTsang);
            let g = dirichlet_sample_grad(&retained, &downstream).unwrap();
            for l in 0..k {
                sums[l] += g[l];
                sumsq[l] += g[l] * g[l];
            }
        }
        let a0 = alpha.sum();
        for l in 0..k {
            let mean = sums[l] / n as f64;
            let var = (sumsq[l] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt().max(1e-12);
            let analytic = if l == j {
                (a0 - alpha.alpha()[j]) / (a0 * a0)
            } else {
                -alpha.alpha()[j] / (a0 * a0)
            };
            let z = (mean - analytic).abs() / se;
            worst_z = worst_z.max(z);
            ok &= z < 3.0;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "4 (Dirichlet implicit gradients)",
        ok && elapsed < 60.0,
        &format!("worst z = {worst_z:.2} over 10 alphas at 1e5 samples; {elapsed:.0} s"),
    );
}

// ---------------------------------------------------------------------
// criterion 5: prior solver against grid search

#[test]
fn criterion_5_prior_solver_optimality() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xC5);
    // entropy lookup over the 1e-3 grid
    const STEPS: usize = 1000;
    let xlnx: Vec<f64> = (0..=STEPS)
        .map(|i| {
            let p = i as f64 / STEPS as f64;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .collect();

    let mut checked = 0usize;
    let mut constraint_ok = true;
    let mut optimal_ok = true;
    let mut worst_gap = f64::NEG_INFINITY;
    while checked < 200 {
        let k = rng.random_range(2..=4);
        let lower: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..(0.9 / k as f64))).collect();
        let upper: Vec<f64> = lower
            .iter()
            .map(|&l| (l + rng.random_range(0.2..1.0)).min(1.0))
            .collect();
        if upper.iter().sum::<f64>() < 1.0 + 1e-9 {
            continue;
        }
        checked += 1;
        let bounds = PriorBounds::new(lower.clone(), upper.clone()).unwrap();
        let pi = solve_max_entropy(&bounds).unwrap();
        constraint_ok &= (pi.iter().sum::<f64>() - 1.0).abs() < 1e-10;
        for j in 0..k {
            constraint_ok &= pi[j] >= lower[j] - 1e-10 && pi[j] <= upper[j] + 1e-10;
        }
        let h_solver: f64 = -pi.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();

        // integer-grid search over the simplex at step 1e-3
        let lo: Vec<usize> = lower.iter().map(|&l| ((l - 1e-12) * STEPS as f64).ceil().max(0.0) as usize).collect();
        let hi: Vec<usize> = upper.iter().map(|&u| (((u + 1e-12) * STEPS as f64).floor() as usize).min(STEPS)).collect();
        let mut h_grid = f64::NEG_INFINITY;
        match k {
            2 => {
                for a in lo[0]..=hi[0] {
                    let b = STEPS - a;
                    if b < lo[1] || b > hi[1] {
                        continue;
                    }
                    h_grid = h_grid.max(-(xlnx[a] + xlnx[b]));
                }
            }
            3 => {
                for a in lo[0]..=hi[0] {
                    for b in lo[1]..=hi[1].min(STEPS - a) {
                        let c = STEPS - a - b;
                        if c < lo[2] || c > hi[2] {
                            continue;
                        }
                        h_grid = h_grid.max(-(xlnx[a] + xlnx[b] + xlnx[c]));
                    }
                }
            }
            _ => {
                for a in lo[0]..=hi[0] {
                    for b in lo[1]..=hi[1].min(STEPS - a) {
                        let rest = STEPS - a - b;
                        let part = -(xlnx[a] + xlnx[b]);
                        for c in lo[2]..=hi[2].min(rest) {
                            let d = rest - c;
                            if d < lo[3] || d > hi[3] {
                                continue;
                            }
                            let h = part - xlnx[c] - xlnx[d];
                            if h > h_grid {
                                h_grid = h;
                            }
                        }
                    }
                }
            }
        }
        let gap = h_grid - h_solver;
        worst_gap = worst_gap.max(gap);
        optimal_ok &= h_solver >= h_grid - 1e-6;
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "5 (prior solver optimality)",
        constraint_ok && optimal_ok && elapsed < 60.0,
        &format!("200 bound sets, worst grid-solver gap {worst_gap:.2e}; {elapsed:.0} s"),
    );
}

// ---------------------------------------------------------------------
// shared blobs fixture for criteria 6, 8 and 9

struct BlobsFixture {
    dataset: PllDataset,
    config: TrainConfig,
    eval: EvalConfig,
    report: RunReport,
    oracle_mean: f64,
}

fn blobs_config() -> TrainConfig {
    TrainConfig {
        t: 200,
        t_w: 100,
        n_m: 256,
        b: 10,
        b_prime: 10,
        m: 4,
        hidden: 32,
        seed: 42,
        ..TrainConfig::default()
    }
}

fn blobs_fixture() -> &'static BlobsFixture {
    static FIXTURE: OnceLock<BlobsFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let mut rng = ChaCha20Rng::seed_from_u64(1234);
        let clean = synth_blobs(2000, 5, 2, 4.0, &mut rng).unwrap();
        let spec = GenSpec {
            strategy: GenStrategy::LongtailMix,
            tail_base: 0.3,
            probe_seed: 7,
            probe_hidden: 32,
            probe_epochs: 50,
            ..GenSpec::default()
        };
        let dataset = generate_candidates(&clean, &spec, &mut rng).unwrap();
        let config = blobs_config();
        let eval = EvalConfig::default();
        let report = run_experiment(&dataset, Method::Vipll, &config, &eval).unwrap();

        // supervised oracle over the same five splits
        let mut oracle_accs = Vec::new();
        for run in &report.runs {
            let mut split_rng = ChaCha20Rng::seed_from_u64(run.seed ^ 0x5EED_5EED_5EED_5EED);
            let (tr, te) = pllvi_core::eval::stratified_split(&dataset, 0.2, &mut split_rng);
            let train = dataset.subset(&tr).unwrap();
            let test = dataset.subset(&te).unwrap();
            let mut orng = ChaCha20Rng::seed_from_u64(run.seed);
            let mut oracle = SoftmaxMlp::new(2, 5, 64, 1e-3, &mut orng);
            oracle
                .train_supervised(&train.features, train.true_labels.as_ref().unwrap(), 100, 256, &mut orng)
                .unwrap();
            let preds = oracle.predict(&test.features).unwrap();
            oracle_accs
                .push(pllvi_core::eval::accuracy(&preds, test.true_labels.as_ref().unwrap()).unwrap());
        }
        let oracle_mean = oracle_accs.iter().sum::<f64>() / oracle_accs.len() as f64;
        BlobsFixture { dataset, config, eval, report, oracle_mean }
    })
}

#[test]
fn criterion_6_blobs_end_to_end() {
    let fx = blobs_fixture();
    let avg = fx.dataset.avg_candidates();
    let per_seed_ok = fx.report.runs.iter().all(|r| r.wall_s < 300.0);
    let accs: Vec<String> = fx.report.runs.iter().map(|r| format!("{:.4}", r.accuracy)).collect();
    report(
        "6 (blobs end-to-end learning)",
        (2.2..=2.8).contains(&avg) && fx.report.mean >= 0.90 && fx.oracle_mean >= 0.98 && per_seed_ok,
        &format!(
            "avg |s| = {avg:.2}, vipll mean {:.4} over 5 seeds [{}], oracle mean {:.4}, max seed wall {:.0} s",
            fx.report.mean,
            accs.join(", "),
            fx.oracle_mean,
            fx.report.runs.iter().map(|r| r.wall_s).fold(0.0, f64::max)
        ),
    );
}

// ---------------------------------------------------------------------
// criterion 7: real-world spot check on the lost dataset

fn lost_path() -> Option<std::path::PathBuf> {
    if let Ok(p) = std::env::var("PLLVI_LOST") {
        let p = std::path::PathBuf::from(p);
        if p.exists() {
            return Some(p);
        }
    }
    let fallback = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/lost.pll");
    fallback.exists().then_some(fallback)
}

fn lost_config() -> TrainConfig {
    TrainConfig {
        t: 300,
        t_w: 150,
        n_m: 256,
        b: 10,
        b_prime: 10,
        m: 8,
        hidden: 64,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn lost_report() -> Option<&'static (PllDataset, RunReport)> {
    static FIXTURE: OnceLock<Option<(PllDataset, RunReport)>> = OnceLock::new();
    FIXTURE
        .get_or_init(|| {
            let path = lost_path()?;
            let ds = load_dataset(path).ok()?;
            let report =
                run_experiment(&ds, Method::Vipll, &lost_config(), &EvalConfig::default()).ok()?;
            Some((ds, report))
        })
        .as_ref()
}

#[test]
fn criterion_7_lost_spot_check() {
    let Some(path) = lost_path() else {
        println!(
            "criterion 7 (lost spot check): SKIP [dataset not present; set PLLVI_LOST or place data/lost.pll]"
        );
        return;
    };
    let started = Instant::now();
    let (ds, rep) = lost_report().expect("dataset loads and trains");
    let sane = ds.n == 1122 && ds.d == 108 && ds.k == 14 && (ds.avg_candidates() - 2.217).abs() < 0.05;
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "7 (lost spot check)",
        sane && rep.mean >= 0.72 && elapsed < 1800.0,
        &format!(
            "{}: n={} d={} k={} avg|s|={:.3}; vipll mean {:.4} over 5 seeds; {elapsed:.0} s",
            path.display(),
            ds.n,
            ds.d,
            ds.k,
            ds.avg_candidates(),
            rep.mean
        ),
    );
}

// ---------------------------------------------------------------------
// criterion 8: ablation ordering (soft report)

#[test]
fn criterion_8_ablation_ordering_report() {
    let fx = blobs_fixture();
    let ablation =
        run_experiment(&fx.dataset, Method::VipllAblation, &fx.config, &fx.eval).unwrap();
    let holds = ablation.mean <= fx.report.mean;
    let p = welch_ttest(&ablation.accuracies(), &fx.report.accuracies())
        .map(|(_, _, p)| p)
        .unwrap_or(f64::NAN);
    // soft expectation from the toy benchmark: ablated accuracy within
    // two points of the full objective
    let within_band = ablation.mean <= fx.report.mean + 0.02;
    let mut lost_note = String::new();
    if let Some((ds, vipll_rep)) = lost_report() {
        let abl = run_experiment(ds, Method::VipllAblation, &lost_config(), &fx.eval).unwrap();
        lost_note = format!(
            "; lost: ablation {:.4} vs vipll {:.4} (finding {})",
            abl.mean,
            vipll_rep.mean,
            if abl.mean <= vipll_rep.mean { "holds" } else { "does not hold" }
        );
    }
    println!(
        "criterion 8 (ablation ordering, report-only): blobs ablation mean {:.4} vs vipll {:.4} (welch p = {:.3}); qualitative finding {}{}",
        ablation.mean,
        fx.report.mean,
        p,
        if holds { "holds" } else { "does not hold" },
        lost_note
    );
    report(
        "8 (ablation ordering band)",
        within_band,
        &format!("ablation mean {:.4} <= vipll mean {:.4} + 0.02", ablation.mean, fx.report.mean),
    );
}

// ---------------------------------------------------------------------
// criterion 9: bit-exact determinism of the experiment runs

#[test]
fn criterion_9_determinism() {
    let fx = blobs_fixture();
    let rerun = run_experiment(&fx.dataset, Method::Vipll, &fx.config, &fx.eval).unwrap();
    let blobs_exact = rerun.accuracies() == fx.report.accuracies();
    let mut detail = format!(
        "blobs accuracies reproduce bit-exactly over {} seeds",
        rerun.runs.len()
    );
    let mut all_ok = blobs_exact;
    if let Some((ds, first)) = lost_report() {
        let second =
            run_experiment(ds, Method::Vipll, &lost_config(), &EvalConfig::default()).unwrap();
        let lost_exact = second.accuracies() == first.accuracies();
        all_ok &= lost_exact;
        detail.push_str(if lost_exact {
            "; lost accuracies reproduce bit-exactly"
        } else {
            "; lost accuracies DIFFER"
        });
    } else {
        detail.push_str("; lost dataset absent (criterion 7 skipped)");
    }
    report("9 (determinism)", all_ok, &detail);
}

//! `pllvi`: train and evaluate partial-label classifiers from the command
//! line.
//!
//! Subcommands: `generate` builds candidate sets (or synthetic blobs),
//! `prior` prints the max-entropy class prior, `train` runs one training
//! run, `eval` runs multi-seed experiments or scores a saved model, and
//! `cooc` writes candidate co-occurrence counts. Exit codes: 0 on success,
//! 2 on validation errors, 3 on numeric failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use pllvi_core::config::FileConfig;
use pllvi_core::data::{
    cooccurrence, cooccurrence_normalized, generate_candidates, load_dataset, save_dataset,
    synth_blobs, PllDataset,
};
use pllvi_core::eval::{accuracy, not_significantly_worse, run_experiment, welch_ttest, Method, RunReport};
use pllvi_core::prior::{binding_constraints, compute_prior, PriorBounds};
use pllvi_core::train::{fit, predict_labels, Checkpoint};
use pllvi_core::Error;

#[derive(Parser)]
#[command(name = "pllvi", version, about = "Partial-label learning via variational inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON configuration file with train/gen/eval sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<FileConfig, Error> {
        let mut config = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.train.seed = seed;
            config.gen.probe_seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate candidate labels for a fully labeled dataset, or synthesize
    /// a blobs benchmark first.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input dataset (.pll) with true labels.
        #[arg(long, conflicts_with = "blobs")]
        data: Option<PathBuf>,
        /// Synthesize Gaussian blobs instead of reading a dataset.
        #[arg(long)]
        blobs: bool,
        /// Blob instance count.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Blob class count.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Blob feature dimension.
        #[arg(long, default_value_t = 2)]
        d: usize,
        /// Blob mean-sphere radius in cluster standard deviations.
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        /// Skip candidate generation and keep the singleton sets.
        #[arg(long)]
        clean: bool,
        /// Output dataset path (.pll).
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the maximum-entropy class prior of a dataset as JSON.
    Prior {
        #[arg(long)]
        data: PathBuf,
        /// Dirichlet lift exponent in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
    },
    /// Train once and write model.json / metrics.csv to --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a multi-seed experiment (or score a saved model with --model).
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated methods: vipll, vipll_ablation, plknn.
        #[arg(long, default_value = "vipll")]
        methods: String,
        /// Score this saved model on --data instead of running experiments.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory for report.json (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the candidate co-occurrence matrix as CSV.
    Cooc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Row-normalize counts by class frequency.
        #[arg(long)]
        normalized: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { config, data, blobs, n, k, d, separation, clean, out } => {
            let cfg = config.load()?;
            let seed = config.seed.unwrap_or(cfg.train.seed);
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let base: PllDataset = if blobs {
                synth_blobs(n, k, d, separation, &mut rng)?
            } else {
                let path = data.ok_or_else(|| {
                    Error::Config("generate needs --data or --blobs".to_string())
                })?;
                load_dataset(path)?
            };
            let result = if clean {
                base
            } else {
                generate_candidates(&base, &cfg.gen, &mut rng)?
            };
            save_dataset(&result, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "written": out.display().to_string(),
                    "n": result.n,
                    "d": result.d,
                    "k": result.k,
                    "avg_candidates": result.avg_candidates(),
                })
            );
            Ok(())
        }
        Command::Prior { data, delta } => {
            let ds = load_dataset(data)?;
            let bounds = PriorBounds::from_dataset(&ds);
            let prior = compute_prior(&bounds, delta)?;
            let binding: Vec<_> = binding_constraints(&bounds, &prior.pi)
                .into_iter()
                .map(|(class, side)| serde_json::json!({"class": class, "side": side}))
                .collect();
            println!(
                "{}",
                serde_json::json!({
                    "pi": prior.pi,
                    "alpha_pi": prior.alpha_pi,
                    "delta": prior.delta,
                    "binding_constraints": binding,
                })
            );
            Ok(())
        }
        Command::Train { config, data, out } => {
            let cfg = config.load()?;
            let ds = load_dataset(data)?;
            std::fs::create_dir_all(&out)?;
            let result = fit(&ds, &cfg.train, Some(&out))?;
            let last = result.metrics.last();
            println!(
                "{}",
                serde_json::json!({
                    "model": out.join("model.json").display().to_string(),
                    "metrics": out.join("metrics.csv").display().to_string(),
                    "epochs": result.metrics.len(),
                    "final_total": last.map(|m| m.total),
                    "sigma": result.cvae.sigma,
                })
            );
            Ok(())
        }
        Command::Eval { config, data, methods, model, out } => {
            let cfg = config.load()?;
            let ds = load_dataset(data)?;
            if let Some(model_path) = model {
                let ckpt = Checkpoint::load(model_path)?;
                let mut classifier = ckpt.classifier;
                let preds = predict_labels(&mut classifier, &ds.features)?;
                let truth = ds.true_labels.as_ref().ok_or_else(|| {
                    Error::Config("scoring a model requires true labels".to_string())
                })?;
                let acc = accuracy(&preds, truth)?;
                println!("{}", serde_json::json!({"accuracy": acc, "n": ds.n}));
                return Ok(());
            }
            let methods: Vec<Method> = methods
                .split(',')
                .map(|m| m.trim().parse())
                .collect::<Result<_, _>>()?;
            let mut reports: Vec<RunReport> = Vec::new();
            for method in methods {
                let report = run_experiment(&ds, method, &cfg.train, &cfg.eval)?;
                report.check_invariants()?;
                eprintln!(
                    "{}: mean {:.4} (std {:.4}) over {} seeds",
                    method,
                    report.mean,
                    report.std,
                    report.runs.len()
                );
                reports.push(report);
            }
            let refs: Vec<&RunReport> = reports.iter().collect();
            let flags = not_significantly_worse(&refs, 0.05)?;
            let best = reports
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let comparisons: Vec<serde_json::Value> = reports
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    if i == best || r.runs.len() < 2 {
                        return serde_json::json!(null);
                    }
                    match welch_ttest(&r.accuracies(), &reports[best].accuracies()) {
                        Ok((t, dof, p)) => serde_json::json!({
                            "against": reports[best].method.to_string(),
                            "t": t, "dof": dof, "p": p,
                        }),
                        Err(_) => serde_json::json!(null),
                    }
                })
                .collect();
            let doc = serde_json::json!({
                "reports": reports,
                "not_significantly_worse_than_best": flags,
                "welch_vs_best": comparisons,
            });
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let path = dir.join("report.json");
                std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap())?;
                println!("{}", serde_json::json!({"report": path.display().to_string()}));
            } else {
                println!("{doc}");
            }
            Ok(())
        }
        Command::Cooc { data, out, normalized } => {
            let ds = load_dataset(data)?;
            let matrix = if normalized {
                cooccurrence_normalized(&ds)?
            } else {
                cooccurrence(&ds)?
            };
            let mut text = String::new();
            for r in 0..ds.k {
                let row: Vec<String> = matrix.row(r).iter().map(|v| v.to_string()).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            std::fs::write(&out, text)?;
            println!("{}", serde_json::json!({"written": out.display().to_string(), "k": ds.k}));
            Ok(())
        }
    }
}

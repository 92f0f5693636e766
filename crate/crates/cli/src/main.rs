use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sfnn_cli::commands::{self, VerifyWhat};
use sfnn_cli::dataref::DataRef;
use sfnn_core::Error;

#[derive(Parser)]
#[command(
    name = "sfnn",
    version,
    about = "Stochastic feedforward networks: train, transfer, fine-tune, evaluate, verify"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset: a .csv path (synthetic regression) or images:labels IDX pair
    #[arg(long)]
    data: String,
    /// Threshold pixels to {0,1} before use
    #[arg(long)]
    binarize: bool,
    /// Binarization threshold
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Upper-half input, lower-half target completion task
    #[arg(long)]
    half_digit: bool,
    /// Keep only the first N rows
    #[arg(long)]
    subset: Option<usize>,
}

impl DataArgs {
    fn dataref(&self) -> DataRef {
        DataRef {
            source: self.data.clone(),
            binarize_threshold: self.binarize.then_some(self.threshold),
            half_digit: self.half_digit,
            subset: self.subset,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate datasets
    GenData {
        #[command(subcommand)]
        what: GenDataCmd,
    },
    /// Train a deterministic baseline network
    Train {
        /// Experiment config (JSON)
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics JSONL
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Convert a trained network to a stochastic model
    Transfer {
        /// Source checkpoint (trained deterministic network)
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// simple-sigmoid | simple-relu | thm1 | thm3
        #[arg(long)]
        mode: String,
        /// Upper-layer constant for the theorem transforms
        #[arg(long, default_value_t = 50.0)]
        gamma: f64,
        /// Hidden layers to convert (theorem transforms)
        #[arg(long, value_delimiter = ',', default_value = "0")]
        layers: Vec<usize>,
        /// Replace a degenerate (all-zero) gamma by the epsilon floor
        #[arg(long)]
        gamma_floor: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a transferred simplified-SFNN with the sampling estimator
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Monte Carlo samples per training batch
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tail rows held out for validation
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under a chosen forward semantics
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// dnn | dnn-star | simplified-mc | sfnn
        #[arg(long)]
        mode: String,
        /// Monte Carlo samples for the stochastic modes
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics JSONL output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a numerical certification suite
    Verify {
        #[command(subcommand)]
        what: VerifyCmd,
    },
}

#[derive(Subcommand)]
enum GenDataCmd {
    /// Inverse-sinusoid multi-modal regression benchmark (CSV)
    Synthetic {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_test: Option<PathBuf>,
    },
    /// Procedural 28x28 digit glyphs (IDX pair)
    Digits {
        #[arg(long, default_value_t = 12000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_images: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Transfer-bound certificate on random networks
    Theorem1 {
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long, default_value_t = 50.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transfer-loss monotonicity over gamma on random networks
    GammaSweep {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks (exact and enumerated routes)
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 50.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward Monte Carlo estimator bias z-test
    McBias {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 50.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(serde_json::Value, bool), Error> {
    match cli.cmd {
        Cmd::GenData { what } => match what {
            GenDataCmd::Synthetic {
                n,
                n_test,
                noise,
                seed,
                out,
                out_test,
            } => commands::gen_data_synthetic(n, n_test, noise, seed, &out, out_test.as_deref())
                .map(|v| (v, true)),
            GenDataCmd::Digits {
                n,
                seed,
                out_images,
                out_labels,
            } => commands::gen_data_digits(n, seed, &out_images, &out_labels).map(|v| (v, true)),
        },
        Cmd::Train {
            config,
            data,
            out,
            metrics,
        } => commands::train_cmd(&config, &data.dataref(), &out, metrics.as_deref())
            .map(|v| (v, true)),
        Cmd::Transfer {
            model,
            data,
            mode,
            gamma,
            layers,
            gamma_floor,
            out,
        } => commands::transfer_cmd(
            &model,
            &data.dataref(),
            &mode,
            gamma,
            &layers,
            gamma_floor,
            &out,
        )
        .map(|v| (v, true)),
        Cmd::Finetune {
            model,
            data,
            samples,
            epochs,
            lr,
            seed,
            val,
            out,
            metrics,
        } => commands::finetune_cmd(
            &model,
            &data.dataref(),
            samples,
            epochs,
            lr,
            seed,
            val,
            &out,
            metrics.as_deref(),
        )
        .map(|v| (v, true)),
        Cmd::Eval {
            model,
            data,
            mode,
            samples,
            seed,
            out,
        } => commands::eval_cmd(&model, &data.dataref(), &mode, samples, seed, out.as_deref())
            .map(|v| (v, true)),
        Cmd::Verify { what } => {
            let (what, seeds, gamma, base_seed, out) = match what {
                VerifyCmd::Theorem1 {
                    seeds,
                    gamma,
                    base_seed,
                    out,
                } => (VerifyWhat::Theorem1, seeds, gamma, base_seed, out),
                VerifyCmd::GammaSweep {
                    seeds,
                    base_seed,
                    out,
                } => (VerifyWhat::GammaSweep, seeds, 50.0, base_seed, out),
                VerifyCmd::Gradcheck {
                    seeds,
                    gamma,
                    base_seed,
                    out,
                } => (VerifyWhat::GradCheck, seeds, gamma, base_seed, out),
                VerifyCmd::McBias {
                    seeds,
                    gamma,
                    base_seed,
                    out,
                } => (VerifyWhat::McBias, seeds, gamma, base_seed, out),
            };
            commands::verify_cmd(what, seeds, gamma, base_seed, out.as_deref())
        }
    }
}

fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Io(_) => ("io", 2),
        Error::Divergence { .. } => ("divergence", 3),
        _ => ("validation", 1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help / --version exit cleanly; bad usage is a validation error
            if e.use_stderr() {
                let msg = json!({"error": {"kind": "validation", "message": e.to_string()}});
                eprintln!("{msg}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok((value, pass)) => {
            println!("{value}");
            if pass {
                ExitCode::SUCCESS
            } else {
                let msg =
                    json!({"error": {"kind": "validation", "message": "verification failed"}});
                eprintln!("{msg}");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            let (kind, code) = error_kind(&e);
            let msg = json!({"error": {"kind": kind, "message": e.to_string()}});
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}

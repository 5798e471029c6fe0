//! `alore`: train, merge, verify and benchmark Kronecker-structured adapters.
//!
//! Exit status: 0 on success, 1 when a verification fails, 2 for usage or
//! configuration errors, 3 for I/O and checkpoint-format errors.

mod commands;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use alore_core::accounting::Method;
use alore_core::alore::MaskMode;
use alore_core::Error;

#[derive(Parser)]
#[command(
    name = "alore",
    version,
    about = "Multi-expert Kronecker low-rank adapters for a small ViT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Increment,
    Single,
    Sliced,
}

impl From<MaskArg> for MaskMode {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::Increment => MaskMode::Increment,
            MaskArg::Single => MaskMode::Single,
            MaskArg::Sliced => MaskMode::Sliced,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes model.ckpt, data.ckpt, metrics.jsonl and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search lr, weight decay and dropout; writes the selected model plus trials.json.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold the adapters of a checkpoint into its backbone.
    Merge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare eval logits of two checkpoints on random inputs.
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 10)]
        inputs: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure eval throughput (images per second).
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Ignore any adapters stored in the checkpoint.
        #[arg(long)]
        plain: bool,
    },
    /// Print extra-parameter counts for a PETL method.
    Params {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        d: u64,
        #[arg(long, default_value_t = 0)]
        r: u64,
        #[arg(long = "L", alias = "layers")]
        layers: u64,
        #[arg(long, default_value_t = 0)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        m: u64,
        #[arg(long, default_value_t = 0)]
        w: u64,
        #[arg(long, default_value_t = 0)]
        o: u64,
        /// Adapted sites per layer (alore only; the attention-only variant uses 1).
        #[arg(long, default_value_t = 2)]
        sites: usize,
        /// Report the stacked-linear baseline with this many parallel branches instead (alore only).
        #[arg(long)]
        stacked: Option<usize>,
    },
    /// Check analytic gradients against central differences on a random model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Evaluate a checkpoint with a subset of its experts switched on.
    MaskEval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset checkpoint (as written by `train`); its test split is scored.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: MaskArg,
        /// 1-based expert index.
        #[arg(long)]
        index: usize,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Outcome of a subcommand that ran to completion.
pub enum Status {
    Ok,
    Failed,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Format(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => commands::train(&config, &out, false),
        Command::Grid { config, out } => commands::train(&config, &out, true),
        Command::Merge { ckpt, out } => commands::merge(&ckpt, &out),
        Command::Verify {
            a,
            b,
            inputs,
            tol,
            seed,
        } => commands::verify(&a, &b, inputs, tol, seed),
        Command::Bench {
            ckpt,
            batch,
            iters,
            warmup,
            plain,
        } => commands::bench(&ckpt, batch, iters, warmup, plain),
        Command::Params {
            method,
            d,
            r,
            layers,
            n,
            m,
            w,
            o,
            sites,
            stacked,
        } => commands::params(
            alore_core::accounting::AccountingInputs {
                method: Some(method),
                d,
                r,
                layers,
                n,
                m,
                w,
                o,
            },
            sites,
            stacked,
        ),
        Command::Gradcheck { config, eps, tol } => commands::gradcheck(&config, eps, tol),
        Command::MaskEval {
            ckpt,
            data,
            mode,
            index,
        } => commands::mask_eval(&ckpt, &data, mode.into(), index),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

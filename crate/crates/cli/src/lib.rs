//! The `evhand` command-line tool.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 check failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod selftest;

pub use config::PipelineConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    ChecksFailed,
}

/// An error caused by how the tool was invoked rather than by the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "evhand", version, about = "Event-camera hand pose pipeline")]
pub struct Cli {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for frame-level parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Process at most this many frames or samples.
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bin events and write one frame per bin, plus ROI and statistics tables.
    Convert {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the wrist location and ROI of every bin.
    Roi {
        #[arg(long)]
        events: PathBuf,
    },
    /// Print the seven ROI statistics of every bin.
    Stats {
        #[arg(long)]
        events: PathBuf,
    },
    /// Run the network on every bin or stored frame.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
        events: Option<PathBuf>,
        /// Directory of `.raw` frames, processed in file-name order.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Append the seven auxiliary outputs to each row.
        #[arg(long)]
        aux: bool,
    },
    /// PCK curve and AUC of predicted against ground-truth joints.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Per-layer multiply-add counts at ROI and full resolution.
    Flops,
    /// Run the built-in oracle, invariant and gradient checks.
    Selftest {
        /// Taylor-softmax order to check.
        #[arg(long)]
        taylor_order: Option<usize>,
        /// Perturb analytic gradients to exercise the gradient checker.
        #[arg(long)]
        inject_grad_fault: bool,
    },
    /// Train the toy network on synthetic silhouettes.
    TrainToy {
        /// Output weight file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Train the main head only.
        #[arg(long)]
        no_aux: bool,
        /// Also write a config matching the toy sensor and network.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };

    let result = execute(&cli, out);
    let _ = out.flush();
    match result {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::ChecksFailed) => EXIT_CHECK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
    }
}

fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> anyhow::Result<Status> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.threads {
        Some(0) => Err(UsageError("--threads must be at least 1".into()).into()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| commands::dispatch(&cli.command, &cfg, cli.limit, out))
        }
        None => commands::dispatch(&cli.command, &cfg, cli.limit, out),
    }
}

//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use facetx_core::graph::BackwardFault;
use facetx_core::synth::IMAGE_SIZE;
use facetx_core::Config;

use crate::commands;
use crate::error::{CliError, Result};
use crate::train;

#[derive(Debug, Parser)]
#[command(name = "facetx", version, about = "Desk-scale attention face swapper")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file, appending to its metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the configured checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Swap the source face of one pair onto the target face of another.
    Swap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; defaults to the checkpoint's training pairs.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on every pair of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report directory; defaults to the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group at 8×8 scale.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true, value_enum)]
        fault: Option<Fault>,
    },
    /// Render a synthetic pair dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = IMAGE_SIZE)]
        image_size: usize,
        /// Also write PNG previews.
        #[arg(long)]
        png: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Fault {
    Matmul,
    Conv2d,
    Softmax,
}

impl From<Fault> for BackwardFault {
    fn from(f: Fault) -> Self {
        match f {
            Fault::Matmul => BackwardFault::MatMul,
            Fault::Conv2d => BackwardFault::Conv2d,
            Fault::Softmax => BackwardFault::SoftmaxRows,
        }
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Config::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Runs a parsed command, printing its summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            steps,
            seed,
            resume,
        } => {
            let mut c = load_config(&config)?;
            if let Some(s) = steps {
                c.steps = s;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            let out = train::train(&c, resume)?;
            let last = out.reports.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained steps {}..{}; last total {last}; checkpoint {}; log {}",
                out.first_step,
                out.final_step,
                out.checkpoint.display(),
                out.metrics_log.display()
            );
        }
        Command::Swap {
            ckpt,
            source,
            target,
            out,
            data,
        } => {
            let r = commands::swap(&ckpt, data.as_deref(), source, target, &out)?.row;
            print!("{}", commands::EVAL_HEADER);
            println!(
                "{source}->{target}\t{}\t{}\t{}\t{}",
                r.id_dist, r.expr_dist, r.shape_dist, r.ssim
            );
        }
        Command::Eval { ckpt, data, out } => {
            let out = out.unwrap_or_else(|| data.clone());
            let report = commands::eval(&ckpt, &data, &out)?;
            let m = report.mean;
            println!(
                "{} pairs: id_dist {} expr_dist {} shape_dist {} ssim {}",
                report.rows.len(),
                m.id_dist,
                m.expr_dist,
                m.shape_dist,
                m.ssim
            );
        }
        Command::Gradcheck { config, fault } => {
            let c = match config {
                Some(p) => load_config(&p)?,
                None => Config::default(),
            };
            let rep = commands::gradcheck(&c, fault.map(Into::into))?;
            print!("{}", commands::gradcheck_table(&rep));
            let failed: Vec<String> = rep.iter().filter(|r| !r.passed()).map(|r| r.group.clone()).collect();
            if !failed.is_empty() {
                return Err(CliError::GradcheckFailed(failed));
            }
        }
        Command::GenData {
            out,
            n,
            seed,
            image_size,
            png,
        } => {
            let m = commands::gen_data(&out, n, seed, image_size, png)?;
            println!(
                "wrote {} pairs of {}×{} to {}",
                m.count,
                m.image_size,
                m.image_size,
                out.display()
            );
        }
    }
    Ok(())
}

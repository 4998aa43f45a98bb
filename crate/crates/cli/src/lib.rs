//! Command-line front end for the fusion network: dataset synthesis, training,
//! evaluation, the six-row component ablation, gradient checking, and symbolic
//! shape tracing. The binary is a thin shell over [`run`]; everything here is
//! callable from tests.

pub mod cfg;
pub mod commands;
pub mod lock;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use elf_core::Result;

const MODE_HELP: &str = "Component configuration: full, fundus_only, oct_only, concat_only, \
lm_only, or gm_only. Both modality files are always loaded and validated; single-modality \
modes leave the other branch unused rather than skipping its files";

#[derive(Parser, Debug)]
#[command(
    name = "elf",
    version,
    about = "Dual-branch 2D/3D fusion network: synthesize data, train, evaluate, ablate, \
gradient-check, and trace shapes",
    after_help = "Seeds resolve in precedence order: --seed flag, then the ELF_SEED \
environment variable, then the config file, then the built-in default."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset split (class-coded patch patterns plus noise)
    Synth {
        /// Flat key=value config file; built-in defaults where omitted
        #[arg(long, visible_alias = "config", value_name = "FILE")]
        spec: Option<PathBuf>,
        /// Dataset root directory to write into
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Split name under the dataset root
        #[arg(long, default_value = "train")]
        split: String,
        /// Replace the split directory if it already contains data
        #[arg(long)]
        force: bool,
        /// Dataset seed override (beats ELF_SEED and the config file)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one component configuration and write a checkpoint
    Train {
        /// Flat key=value config file; built-in defaults where omitted
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Dataset root (as written by `elf synth`)
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value = "full", help = MODE_HELP)]
        mode: String,
        /// Output directory for checkpoint/, train_log.csv, and config_used.cfg
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Split to train on
        #[arg(long, default_value = "train")]
        split: String,
        /// Training seed override (beats ELF_SEED and the config file)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset split and write the metrics CSV
    Eval {
        /// Flat key=value config file; built-in defaults where omitted
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Checkpoint directory written by `elf train`
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Dataset root (as written by `elf synth`)
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Expected component configuration; fails if the checkpoint was
        /// trained in a different one
        #[arg(long)]
        mode: Option<String>,
        /// Split to evaluate on
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the metrics CSV (default: <checkpoint>/eval_metrics.csv)
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train and evaluate all six component configurations under one seed
    Ablate {
        /// Flat key=value config file; built-in defaults where omitted
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Dataset root (as written by `elf synth`)
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory for ablation.txt, ablation.csv, and config_used.cfg
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Split every row trains on
        #[arg(long, default_value = "train")]
        train_split: String,
        /// Split every row is scored on
        #[arg(long, default_value = "test")]
        eval_split: String,
        /// Training seed override shared by all six rows
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients against finite differences on a fresh sample
    Gradcheck {
        /// Flat key=value config file; built-in defaults where omitted
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Seed override for both model init and probe selection
        #[arg(long)]
        seed: Option<u64>,
        /// Coordinates probed per parameter group (0 = every coordinate)
        #[arg(long, default_value_t = 2048)]
        probes: usize,
        /// Base finite-difference step
        #[arg(long, default_value_t = 1e-3, value_name = "H")]
        step: f64,
        /// Max relative error allowed per parameter group
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Print the symbolic shape walkthrough of one mode's forward pass
    Shapes {
        /// Flat key=value config file; built-in defaults where omitted
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full", help = MODE_HELP)]
        mode: String,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, split, force, seed } => {
            commands::cmd_synth(spec.as_deref(), &out, &split, force, seed)
        }
        Command::Train { config, data, mode, out, split, seed } => {
            commands::cmd_train(config.as_deref(), &data, &mode, &out, &split, seed)
        }
        Command::Eval { config, checkpoint, data, mode, split, out } => {
            commands::cmd_eval(config.as_deref(), &checkpoint, &data, mode.as_deref(), &split, out.as_deref())
        }
        Command::Ablate { config, data, out, train_split, eval_split, seed } => {
            commands::cmd_ablate(config.as_deref(), &data, &out, &train_split, &eval_split, seed)
        }
        Command::Gradcheck { config, seed, probes, step, tol } => {
            commands::cmd_gradcheck(config.as_deref(), seed, probes, step, tol)
        }
        Command::Shapes { config, mode } => commands::cmd_shapes(config.as_deref(), &mode),
    }
}

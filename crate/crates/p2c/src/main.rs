//! Command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use p2c::cli::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_report, cmd_shift_eval, cmd_sweep, cmd_train,
    CmdError,
};

#[derive(Parser)]
#[command(
    name = "p2c",
    about = "Desk-scale prompt-denoising lab: train, ablate, and sweep a \
             noise-regularized prompt learner on synthetic compositional tasks",
    version
)]
struct Cli {
    /// JSON run config; {} selects all defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output file (gen-data) or directory (everything else)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// overrides data.seed for gen-data and train.seed elsewhere
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads for ablate/sweep
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic task file from the config's data section
    GenData,
    /// Train one run: writes curves.csv, report.json, params.json
    Train {
        /// task file from gen-data
        #[arg(long)]
        task: PathBuf,
    },
    /// Re-evaluate trained params on a task: writes report.json
    Eval {
        /// params.json from train
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        task: PathBuf,
    },
    /// Run the five component-ablation variants over several seeds
    Ablate {
        #[arg(long)]
        task: PathBuf,
        /// seeds per variant
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// One-axis hyperparameter sweep
    Sweep {
        #[arg(long)]
        task: PathBuf,
        /// schedule | sigma_max | sigma_aux | lambda | s_H | TL
        #[arg(long)]
        axis: String,
        /// comma-separated values, e.g. "0.005,0.01,0.015"
        #[arg(long)]
        values: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Evaluate trained params on shifted test sets
    ShiftEval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// comma-separated: mean_shift,linear_warp
        #[arg(long, default_value = "mean_shift,linear_warp")]
        kinds: String,
        /// comma-separated magnitudes
        #[arg(long, default_value = "0,0.25,0.5,1,2")]
        magnitudes: String,
    },
    /// Merge run directories into plot-ready CSVs
    Report {
        /// keep every Nth curve row
        #[arg(long, default_value_t = 10)]
        downsample: usize,
        /// run directories containing curves.csv and report.json
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T, CmdError> {
    v.ok_or_else(|| CmdError::Validation(format!("{flag} is required for this command")))
}

fn dispatch(cli: Cli) -> Result<(), CmdError> {
    match cli.cmd {
        Cmd::GenData => {
            let config = require(cli.config, "--config")?;
            let out = require(cli.out, "--out")?;
            cmd_gen_data(&config, &out, cli.seed)
        }
        Cmd::Train { task } => {
            let config = require(cli.config, "--config")?;
            let out = require(cli.out, "--out")?;
            cmd_train(&config, &task, &out, cli.seed)
        }
        Cmd::Eval { params, task } => {
            let out = require(cli.out, "--out")?;
            cmd_eval(&params, &task, &out)
        }
        Cmd::Ablate { task, seeds } => {
            let config = require(cli.config, "--config")?;
            let out = require(cli.out, "--out")?;
            cmd_ablate(&config, &task, &out, seeds, cli.jobs, cli.seed)
        }
        Cmd::Sweep {
            task,
            axis,
            values,
            seeds,
        } => {
            let config = require(cli.config, "--config")?;
            let out = require(cli.out, "--out")?;
            cmd_sweep(&config, &task, &axis, &values, &out, seeds, cli.jobs, cli.seed)
        }
        Cmd::ShiftEval {
            params,
            task,
            kinds,
            magnitudes,
        } => {
            let out = require(cli.out, "--out")?;
            cmd_shift_eval(&params, &task, &out, &kinds, &magnitudes)
        }
        Cmd::Report {
            downsample,
            run_dirs,
        } => {
            let out = require(cli.out, "--out")?;
            cmd_report(&run_dirs, &out, downsample)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end: training, evaluation, the replacement-probability
//! solver, and synthetic-dataset generation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tmkt::config::TrainConfig;
use tmkt::data::{write_synth_dataset, SynthConfig};
use tmkt::mixup::{expected_replaced, solve_replacement_prob, ExpectationMode};
use tmkt::train::{run_eval, run_training};
use tmkt::{Error, Result};

#[derive(Parser)]
#[command(name = "tmkt", version, about = "spiking-network lab for time-step mixup transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a flat key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// overrides the config file's seed
        #[arg(long)]
        seed: Option<u64>,
        /// overrides the config file's output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved model's event head on one dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["train", "test"])]
        split: String,
    },
    /// Solve for the per-step replacement probability matching a ratio.
    SolveP {
        #[arg(long)]
        t: usize,
        #[arg(long)]
        ratio: f64,
        /// "unconditional" or "conditional"
        #[arg(long, default_value = "unconditional")]
        mode: String,
    },
    /// Write a synthetic paired dataset (train/ and test/ under --out).
    GenSynth {
        #[arg(long)]
        classes: usize,
        /// files per class, half appearance and half event
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        height: usize,
        #[arg(long, default_value_t = 24)]
        width: usize,
        #[arg(long, default_value_t = 6)]
        t: usize,
    },
}

fn cmd_train(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = TrainConfig::from_file(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let outcome = run_training(&cfg)?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "done: {} epochs, final train_acc {:.4}, test_acc {:.4}",
        outcome.metrics.len(),
        last.train_acc,
        last.test_acc
    );
    println!("metrics: {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}

fn cmd_eval(ckpt: PathBuf, data: PathBuf, split: String) -> Result<()> {
    let report = run_eval(&ckpt, &data, &split)?;
    println!(
        "accuracy {:.4} ({}/{})",
        report.accuracy(),
        report.correct,
        report.total
    );
    println!("confusion (rows = truth, cols = prediction):");
    for (truth, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        println!("  class {truth:>3}: {}", cells.join(" "));
    }
    Ok(())
}

fn cmd_solve_p(t: usize, ratio: f64, mode: String) -> Result<()> {
    let mode: ExpectationMode = mode.parse()?;
    let p = solve_replacement_prob(t, ratio, mode)?;
    let residual = (expected_replaced(p, t, mode) / t as f64 - ratio).abs();
    println!("p = {p:.12}");
    println!("residual = {residual:.3e}");
    println!("feasible: yes");
    Ok(())
}

fn cmd_gen_synth(
    classes: usize,
    per_class: usize,
    out: PathBuf,
    seed: u64,
    height: usize,
    width: usize,
    t: usize,
) -> Result<()> {
    let cfg = SynthConfig {
        classes,
        per_class,
        height,
        width,
        time_steps: t,
        seed,
    };
    let summary = write_synth_dataset(&out, &cfg)?;
    println!(
        "wrote {} train and {} test files under {}",
        summary.train_files,
        summary.test_files,
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(config, seed, out),
        Command::Eval { ckpt, data, split } => cmd_eval(ckpt, data, split),
        Command::SolveP { t, ratio, mode } => cmd_solve_p(t, ratio, mode),
        Command::GenSynth {
            classes,
            per_class,
            out,
            seed,
            height,
            width,
            t,
        } => cmd_gen_synth(classes, per_class, out, seed, height, width, t),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Infeasible { .. }) => {
            // The solver did its job: the requested ratio cannot be hit.
            println!("{e}");
            println!("feasible: no");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use liera_core::peft::LiftMode;
use liera_lab::error::exit;
use liera_lab::report::{write_csv, RUN_HEADER};
use liera_lab::run;
use liera_lab::suites::{run_suites, Suite};
use liera_lab::{ExperimentConfig, LabError, LabResult};

#[derive(Parser)]
#[command(name = "liera-lab", version, about = "Low-rank adapter experiments with additive and exponential-map lifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val datasets of the configured task.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for train.lckp and val.lckp.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every weight of the configured model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train fresh adapters on the checkpoint in `checkpoint_in`.
    Finetune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate `checkpoint_in` on the validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run verification suites and write one CSV per suite.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra CSV reports for the format suite to schema-check.
        #[arg(long)]
        check: Vec<PathBuf>,
    },
    /// Identical fine-tunes per lift mode, compared in one report.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "additive,lie_taylor,lie_exact")]
        modes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Runs per mode; each epoch is timed by its fastest run.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Run modes on worker threads (capped by LIERA_LAB_THREADS).
        #[arg(long)]
        parallel: bool,
    },
}

fn parse_modes(names: &[String]) -> LabResult<Vec<LiftMode>> {
    names
        .iter()
        .map(|n| LiftMode::parse(n.trim()).ok_or_else(|| LabError::config(format!("unknown lift mode {n:?}"))))
        .collect()
}

fn execute(command: Command) -> LabResult<i32> {
    match command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (n_train, n_val) = run::gen_data(&cfg, &out)?;
            println!("gen-data: {n_train} train / {n_val} val samples -> {}", out.display());
        }
        Command::Pretrain { config } | Command::Finetune { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run::run_phase(&cfg)?;
            run::write_outputs(&cfg, &outcome)?;
            let last = outcome.log.epochs.last().expect("at least one epoch");
            let trainable = outcome.rows.first().map_or(0, |r| r.trainable_params);
            println!(
                "{}: epochs={} train_loss={:.4} train_acc={:.4} val_acc={:.4} (start {:.4}) trainable={} wall_ms={}",
                outcome.rows[0].run_id, last.epoch, last.train_loss, last.train_acc, last.val_acc,
                outcome.initial.accuracy, trainable, outcome.wall_ms
            );
        }
        Command::Eval { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (ev, row) = run::eval(&cfg)?;
            if let Some(path) = &cfg.report_out {
                write_csv(path, &[row.clone()], &RUN_HEADER)?;
            }
            println!("{}: val_loss={:.4} val_acc={:.4}", row.run_id, ev.loss, ev.accuracy);
        }
        Command::Verify { suite, out, seed, check } => {
            let outcomes = run_suites(suite, &out, seed, &check)?;
            let mut failed = false;
            for o in &outcomes {
                let bad: Vec<&str> = o.rows.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
                if bad.is_empty() {
                    println!("{}: pass ({} checks)", o.suite.as_str(), o.rows.len());
                } else {
                    failed = true;
                    println!("{}: FAIL {}", o.suite.as_str(), bad.join(", "));
                }
            }
            return Ok(if failed { exit::VERIFY } else { exit::OK });
        }
        Command::Bench { config, modes, out, repeats, parallel } => {
            let cfg = ExperimentConfig::load(&config)?;
            let modes = parse_modes(&modes)?;
            let outcome = run::bench(&cfg, &modes, repeats, parallel)?;
            write_csv(&out, &outcome.rows(), &RUN_HEADER)?;
            let parts: Vec<String> = outcome
                .modes
                .iter()
                .map(|m| format!("{}: val_acc={:.4} wall_ms={} trainable={}", m.mode, m.final_val_acc, m.wall_ms, m.trainable_params))
                .collect();
            println!("bench: {}", parts.join(" | "));
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("liera-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fastemit::metrics::LatencyReport;
use fastemit::run::{self, Overrides, RunConfig};
use fastemit::selftest;

/// Transducer training with FastEmit regularization on synthetic streaming data.
///
/// Settings are resolved as: built-in defaults, then the --config file, then
/// the flags below.
#[derive(Debug, Parser)]
#[command(name = "fastemit", version)]
struct Cli {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// FastEmit regularization weight λ.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Duration of one frame in milliseconds.
    #[arg(long, global = true)]
    frame_ms: Option<f64>,
    /// Append the end-of-query token </s> to every label sequence.
    #[arg(long, global = true)]
    endpointer: Option<Switch>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train/test corpora and a manifest.
    Generate,
    /// Train on the generated corpus; writes training_log.csv and checkpoint.bin.
    Train,
    /// Decode a corpus and write report.json, report.csv and trace.jsonl.
    Eval {
        /// Defaults to <output-dir>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to <output-dir>/test.jsonl.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train and evaluate one model per λ; writes sweep.csv.
    Sweep {
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', default_values_t = run::DEFAULT_GRID.to_vec())]
        grid: Vec<f64>,
    },
    /// Check the loss and its gradients against brute-force references.
    Selftest,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let overrides = Overrides {
        fastemit_lambda: cli.lambda,
        seed: cli.seed,
        output_dir: cli.output_dir.clone(),
        frame_ms: cli.frame_ms,
        endpointer: cli.endpointer.map(|s| matches!(s, Switch::On)),
    };
    RunConfig::load(cli.config.as_deref(), &overrides).context("loading configuration")
}

fn print_report(report: &LatencyReport) {
    println!("{}", LatencyReport::csv_header());
    println!("{}", report.csv_row());
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => {
            let config = config(cli)?;
            let manifest = run::cmd_generate(&config)?;
            println!(
                "wrote {} and {} to {} (config {})",
                run::TRAIN_CORPUS,
                run::TEST_CORPUS,
                config.output_dir.display(),
                manifest.config_hash
            );
        }
        Command::Train => {
            let config = config(cli)?;
            let out = run::cmd_train(&config)?;
            println!(
                "trained {} steps, final nll {}, checkpoint {}",
                out.steps,
                out.final_nll,
                out.checkpoint.display()
            );
        }
        Command::Eval { checkpoint, corpus } => {
            let config = config(cli)?;
            let report = run::cmd_eval(&config, checkpoint.as_deref(), corpus.as_deref())?;
            print_report(&report);
        }
        Command::Sweep { grid } => {
            let config = config(cli)?;
            let rows = run::cmd_sweep(&config, grid)?;
            println!("{}", run::SweepRow::csv_header());
            for row in &rows {
                println!("{}", row.csv_row());
            }
        }
        Command::Selftest => {
            let seed = cli.seed.unwrap_or(0);
            let results = selftest::run_all(seed);
            let mut failed = Vec::new();
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<14} cases {:>5}  max error {:.3e}  tolerance {:.0e}  {verdict}",
                    r.name, r.cases, r.max_error, r.tolerance
                );
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            for lambda in [0.01, 0.04] {
                let (lo, hi) = selftest::fastemit_rule_discrepancy(100, seed, lambda);
                println!(
                    "fastemit rule vs single-diagonal objective gradient at lambda {lambda}: \
                     relative discrepancy {lo:.3e} .. {hi:.3e} (measured, not checked)"
                );
            }
            if !failed.is_empty() {
                bail!(fastemit::Error::Numerical(format!(
                    "self-test failed: {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<fastemit::Error>())
        .any(fastemit::Error::is_numerical);
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

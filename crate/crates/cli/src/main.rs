use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use fedmr_cli::{cmd_compare, cmd_run, cmd_verify, ExperimentManifest};
use fedmr_core::verify::Suite;

/// Federated learning simulator with layer-wise model recombination.
///
/// Log verbosity follows RUST_LOG (default: info).
#[derive(Parser)]
#[command(name = "fedmr", version)]
struct Cli {
    /// Worker threads for client training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configuration of a manifest and write metrics and checkpoints.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; overrides the manifest's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the master seed and re-derive every seed from it.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Compare finished runs that share a dataset.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Accuracy threshold for rounds-to-target.
        #[arg(long)]
        target: Option<f64>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run a fixed-seed property suite and print a JSON report.
    Verify {
        #[arg(long, value_enum)]
        suite: SuiteArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Lemma1,
    Gradcheck,
    Secure,
    Partition,
    All,
}

impl SuiteArg {
    fn suites(self) -> Vec<Suite> {
        match self {
            SuiteArg::Lemma1 => vec![Suite::Lemma1],
            SuiteArg::Gradcheck => vec![Suite::Gradcheck],
            SuiteArg::Secure => vec![Suite::Secure],
            SuiteArg::Partition => vec![Suite::Partition],
            SuiteArg::All => Suite::ALL.to_vec(),
        }
    }
}

fn execute(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Run {
            manifest,
            out,
            seed_override,
        } => {
            let m = ExperimentManifest::load(&manifest, seed_override)?;
            for info in cmd_run(&m, out.as_deref())? {
                println!("{}\t{}\tfinal_acc={:.4}\tbest_acc={:.4}", info.name, info.strategy, info.final_acc, info.best_acc);
            }
            Ok(true)
        }
        Command::Compare { dirs, target, json } => {
            let c = cmd_compare(&dirs, target)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&c)?);
            } else {
                print!("{}", c.render());
            }
            Ok(true)
        }
        Command::Verify { suite } => {
            let reports = cmd_verify(&suite.suites())?;
            println!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(reports.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

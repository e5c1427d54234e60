//! `coldstart` — generate synthetic cold-start ranking data, train any
//! combination of the remedies, evaluate, run the diagnostic analyses, and
//! aggregate a consolidated comparison report.
//!
//! Exit codes: 0 success, 1 user error (bad config/spec), 2 runtime failure
//! (divergence, IO).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coldstart::experiment::{
    build_report, load_genspec, load_spec, run_diagnose, run_evaluation, run_training, write_report,
};
use coldstart::synthdata::{generate, write_dataset};
use coldstart::Error;

#[derive(Parser)]
#[command(
    name = "coldstart",
    version,
    about = "Cold-start ranking experiment runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Filters shared by the run-oriented subcommands.
#[derive(Args)]
struct RunFilter {
    /// Experiment spec file (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Restrict to these technique subsets (repeatable).
    #[arg(long = "subset")]
    subsets: Vec<String>,
    /// Restrict to these seeds (comma separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

impl RunFilter {
    fn subsets(&self) -> Option<&[String]> {
        (!self.subsets.is_empty()).then_some(self.subsets.as_slice())
    }

    fn seeds(&self) -> Option<&[u64]> {
        (!self.seeds.is_empty()).then_some(self.seeds.as_slice())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a generator spec.
    Generate {
        /// Generator spec file (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for train.jsonl and eval.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every selected (subset, seed) pair of an experiment.
    Train(RunFilter),
    /// Compute metrics.json for trained runs.
    Evaluate(RunFilter),
    /// Run the four diagnostic analyses (ablation, gradient ratio, score
    /// gaps, embedding spectrum) for trained runs.
    Diagnose(RunFilter),
    /// Aggregate all stored runs into report.json / report.csv.
    Report {
        /// Experiment spec file (JSON).
        #[arg(long)]
        spec: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { spec, out } => {
            let gen_spec = load_genspec(&spec)?;
            let generated = generate(&gen_spec)?;
            std::fs::create_dir_all(&out).map_err(|e| {
                Error::InvalidConfig(format!("cannot create {}: {e}", out.display()))
            })?;
            let train_path = out.join("train.jsonl");
            let eval_path = out.join("eval.jsonl");
            write_dataset(&train_path, &generated.train)?;
            write_dataset(&eval_path, &generated.eval)?;
            println!(
                "wrote {} ({} groups, {} instances, {} cold)",
                train_path.display(),
                generated.train.groups.len(),
                generated.train.num_instances(),
                generated.train.num_cold(),
            );
            println!(
                "wrote {} ({} groups, {} instances, {} cold)",
                eval_path.display(),
                generated.eval.groups.len(),
                generated.eval.num_instances(),
                generated.eval.num_cold(),
            );
        }
        Command::Train(filter) => {
            let spec = load_spec(&filter.spec)?;
            let artifacts = run_training(&spec, filter.subsets(), filter.seeds())?;
            for artifact in &artifacts {
                println!(
                    "trained {}/{} ({} params) -> {}",
                    artifact.subset,
                    artifact.seed,
                    artifact.params.param_count(),
                    spec.run_dir(&artifact.subset, artifact.seed).display()
                );
            }
        }
        Command::Evaluate(filter) => {
            let spec = load_spec(&filter.spec)?;
            run_evaluation(&spec, filter.subsets(), filter.seeds())?;
            println!("metrics written under {}", spec.output_dir.display());
        }
        Command::Diagnose(filter) => {
            let spec = load_spec(&filter.spec)?;
            run_diagnose(&spec, filter.subsets(), filter.seeds())?;
            println!("diagnostics written under {}", spec.output_dir.display());
        }
        Command::Report { spec } => {
            let spec = load_spec(&spec)?;
            let report = build_report(&spec)?;
            let path = write_report(&spec, &report)?;
            if !report.missing.is_empty() {
                eprintln!(
                    "warning: {} runs missing (see the `missing` list in the report)",
                    report.missing.len()
                );
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("COLDSTART_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => coldstart::exec::configure_threads(n),
            _ => {
                eprintln!("error: COLDSTART_THREADS must be a positive integer, got `{threads}`");
                return ExitCode::from(1);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

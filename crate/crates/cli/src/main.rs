use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use icl_cli::{
    configure_threads, failure_summary, load_config, metadata, run_experiment, run_suite, write_outputs, Result, Suite,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Command {
    /// Every suite listed in the config.
    Run,
    Landscape,
    #[value(alias = "theory-vs-mc")]
    TheoryVsMc,
    #[value(alias = "train-vs-theory")]
    TrainVsTheory,
    #[value(alias = "zero-mean")]
    ZeroMean,
    #[value(alias = "gap-scaling")]
    GapScaling,
    #[value(alias = "verify-lemmas")]
    Lemmas,
    Equivalence,
}

impl Command {
    fn suite(self) -> Option<Suite> {
        Some(match self {
            Command::Run => return None,
            Command::Landscape => Suite::Landscape,
            Command::TheoryVsMc => Suite::TheoryVsMc,
            Command::TrainVsTheory => Suite::TrainVsTheory,
            Command::ZeroMean => Suite::ZeroMean,
            Command::GapScaling => Suite::GapScaling,
            Command::Lemmas => Suite::Lemmas,
            Command::Equivalence => Suite::Equivalence,
        })
    }
}

/// Multi-task in-context regression laboratory.
///
/// Writes loss rows to the output CSV and pass/fail checks to a sibling
/// `.checks.csv`. Exits with 1 when a check fails and 2 on errors.
#[derive(Debug, Parser)]
#[command(name = "icl-lab", version)]
struct Args {
    /// Suite to run, or `run` for every suite in the config.
    command: Command,
    /// JSON config path, or `@name` for a bundled preset.
    #[arg(long, short)]
    config: String,
    /// Output CSV (defaults to the config's output_path).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Divides every loss column by the label second moment.
    #[arg(long)]
    normalize: bool,
    /// Overrides the number of Monte-Carlo episodes.
    #[arg(long)]
    mc_samples: Option<usize>,
}

fn execute(args: &Args) -> Result<bool> {
    configure_threads()?;
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(samples) = args.mc_samples {
        config.mc_samples = samples;
    }
    config.normalize |= args.normalize;
    config.validate()?;
    let results = match args.command.suite() {
        Some(suite) => run_suite(suite, &config)?,
        None => run_experiment(&config)?,
    };
    let output = args.out.clone().unwrap_or_else(|| config.output_path.clone());
    let checks = write_outputs(&output, metadata(&config), &results)?;
    let failed = results.failures().count();
    println!(
        "{} loss rows -> {}; {} checks ({} failed) -> {}",
        results.rows.len(),
        output.display(),
        results.checks.len(),
        failed,
        checks.display()
    );
    if failed > 0 {
        eprintln!("{}", failure_summary(&results));
    }
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("{}", serde_json::json!({"status": "error", "message": err.to_string()}));
            ExitCode::from(2)
        }
    }
}

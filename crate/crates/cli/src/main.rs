use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphvar::experiment::{run_experiment, ExperimentConfig, Kind, Outcome};

/// Runs graph-variable sufficiency experiments from TOML configs.
#[derive(Parser)]
#[command(name = "graphvar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a generator and save it.
    Generate(RunArgs),
    /// Build an explicit separator and certify it on sampled data.
    Construct(RunArgs),
    /// Train anchors by SGD and record the trace.
    Train(RunArgs),
    /// Collision, separation and gap diagnostics of one representation.
    Evaluate(RunArgs),
    /// Gap or covering radius across widths and seeds.
    Sweep(RunArgs),
    /// Convolutional margin check across patch noise levels.
    Conv(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out`, else runs/<config name>.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Command {
    fn parts(&self) -> (Kind, &RunArgs) {
        match self {
            Command::Generate(a) => (Kind::Generate, a),
            Command::Construct(a) => (Kind::Construct, a),
            Command::Train(a) => (Kind::Train, a),
            Command::Evaluate(a) => (Kind::Evaluate, a),
            Command::Sweep(a) => (Kind::Sweep, a),
            Command::Conv(a) => (Kind::Conv, a),
        }
    }
}

const EXIT_ASSERTION: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn out_dir(args: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    if let Some(out) = &cfg.out {
        return cfg.base_dir.join(out);
    }
    let stem = args
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into());
    Path::new("runs").join(stem)
}

fn report(outcome: &Outcome) {
    for (name, value) in &outcome.metrics {
        println!("{name} = {value}");
    }
    for check in &outcome.checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("check {} {} (value {}): {status}", check.metric, check.condition, check.value);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = cli.command.parts();
    let mut cfg = match ExperimentConfig::from_path(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if cfg.kind != kind {
        eprintln!(
            "error: {} declares kind `{}` but was run with `{kind}`",
            args.config.display(),
            cfg.kind
        );
        return ExitCode::from(EXIT_USAGE);
    }
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    let dir = out_dir(args, &cfg);
    match run_experiment(&cfg, &dir) {
        Ok(outcome) => {
            report(&outcome);
            println!("artifacts written to {}", dir.display());
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                for c in outcome.checks.iter().filter(|c| !c.passed) {
                    eprintln!("assertion failed: {} {} (value {})", c.metric, c.condition, c.value);
                }
                ExitCode::from(EXIT_ASSERTION)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

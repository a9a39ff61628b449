use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use fsl_core::experiment::{self, ExperimentConfig, ENV_OUT, ENV_SEED};
use fsl_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_ORACLE: u8 = 3;

#[derive(Parser)]
#[command(name = "fslsim", version, about = "Federated split learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config for every seed and write CSVs and summaries.
    Run(RunArgs),
    /// Finite-difference check of every layer's backward pass.
    Gradcheck(GradcheckArgs),
    /// Run several configs on the same data and model and merge their curves.
    Compare(CompareArgs),
}

#[derive(Args)]
struct Overrides {
    /// Run only this seed instead of the config's list.
    #[arg(long, env = ENV_SEED)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = ENV_OUT)]
    out: Option<PathBuf>,
    /// Worker threads for client-local training.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random test points.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more experiment configs.
    #[arg(long = "config", value_name = "PATH", required = true, num_args = 1..)]
    configs: Vec<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn load(path: &PathBuf, o: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)
        .with_context(|| format!("loading {}", path.display()))?
        .with_overrides(o.seed, o.out.clone());
    if let Some(t) = o.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> anyhow::Result<u8> {
    let cfg = load(&args.config, &args.overrides)?;
    let outcome = experiment::run_experiment(&cfg)?;
    for s in &outcome.seeds {
        println!(
            "seed {}: final top-1 {:.4}, total load {} B, storage {} params",
            s.seed,
            s.final_top1(),
            s.total_bytes(),
            s.storage_params
        );
    }
    println!("outputs in {}", cfg.output_dir.display());
    Ok(0)
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<u8> {
    let report = experiment::gradcheck(args.seed, args.inject_fault)?;
    print!("{}", experiment::format_gradcheck(&report));
    Ok(if report.passed() { 0 } else { EXIT_ORACLE })
}

fn compare(args: CompareArgs) -> anyhow::Result<u8> {
    if args.configs.len() < 2 {
        return Err(Error::usage("compare needs at least two --config files").into());
    }
    let configs = args
        .configs
        .iter()
        .map(|p| load(p, &Overrides { out: None, ..args.overrides }))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let out = args.overrides.out.clone().unwrap_or_else(|| PathBuf::from("compare-out"));
    let rows = experiment::compare(&configs, &out)?;
    println!("{} rows written to {}", rows.len(), out.join("compare.csv").display());
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric { .. }) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

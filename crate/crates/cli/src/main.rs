use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jmls_cli::commands::{cmd_bode, cmd_identify, cmd_loglik, cmd_simulate, SimulateSettings};
use jmls_cli::config::{Budget, EmOverrides, FileConfig, RunConfig};
use jmls_cli::{CliError, CliResult};
use jmls_core::Convention;

#[derive(Parser)]
#[command(name = "jmls", version, about = "Simulate and identify jump Markov linear systems")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a model file.
    Simulate(SimulateArgs),
    /// Run EM from an initial model.
    Identify(IdentifyArgs),
    /// Evaluate the approximate log-likelihood of a dataset.
    Loglik(LoglikArgs),
    /// Match modes between two models by Bode magnitude error.
    Bode(BodeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of time steps.
    #[arg(long, short = 'n')]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `normal`, `zero`, or a dataset CSV whose inputs are replayed.
    #[arg(long)]
    input: Option<String>,
    #[arg(long, value_parser = parse_convention)]
    convention: Option<Convention>,
    /// Output CSV (standard output when omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IdentifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial model.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_convention)]
    convention: Option<Convention>,
    /// Budget for the filter, backward filter and smoother at once.
    #[arg(long)]
    budget: Option<Budget>,
    #[arg(long)]
    filter_budget: Option<Budget>,
    #[arg(long)]
    bif_budget: Option<Budget>,
    #[arg(long)]
    smoother_budget: Option<Budget>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    stage_transition: Option<bool>,
    #[arg(long)]
    transition_delta: Option<f64>,
    #[arg(long)]
    transition_patience: Option<usize>,
    #[arg(long)]
    transition_floor: Option<f64>,
    /// Comma-separated groups to hold fixed: gamma, pi, transition, prior, all.
    #[arg(long, value_delimiter = ',')]
    freeze: Option<Vec<String>>,
    /// Also write smoothed moments of the final model.
    #[arg(long)]
    moments: bool,
}

#[derive(Args)]
struct LoglikArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Components per mode, or `inf`.
    #[arg(long)]
    budget: Option<Budget>,
    #[arg(long, value_parser = parse_convention)]
    convention: Option<Convention>,
    /// Per-step breakdown CSV.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Estimated model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reference model.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Number of log-spaced frequencies on [1e-3, π].
    #[arg(long)]
    points: Option<usize>,
    /// Plot data CSV.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn parse_convention(s: &str) -> Result<Convention, String> {
    match s {
        "dynamic" => Ok(Convention::Dynamic),
        "classic" => Ok(Convention::Classic),
        _ => Err(format!("unknown convention {s:?} (expected dynamic or classic)")),
    }
}

fn need<T>(value: Option<T>, what: &str, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Config(format!("no {what} given (use {flag} or set it in the config file)")))
}

fn run(cli: Cli) -> CliResult<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => {
            let file = FileConfig::load_optional(a.config.as_deref())?;
            cmd_simulate(&SimulateSettings {
                model: need(a.model.or(file.paths.model), "model file", "--model")?,
                steps: need(a.steps.or(file.simulate.steps), "number of steps", "--steps")?,
                seed: need(a.seed.or(file.seed), "seed", "--seed")?,
                input: a.input.or(file.simulate.input).unwrap_or_else(|| "normal".into()),
                convention: a.convention.or(file.convention),
                out: a.out,
            })
        }
        Command::Identify(a) => {
            let file = FileConfig::load_optional(a.config.as_deref())?;
            let overrides = EmOverrides {
                budget: a.budget,
                filter_budget: a.filter_budget,
                bif_budget: a.bif_budget,
                smoother_budget: a.smoother_budget,
                max_iter: a.max_iter,
                tol: a.tol,
                patience: a.patience,
                stage_transition: a.stage_transition,
                transition_delta: a.transition_delta,
                transition_patience: a.transition_patience,
                transition_floor: a.transition_floor,
                freeze: a.freeze,
            };
            let cfg = RunConfig::resolve(file, a.model, a.data, a.out_dir, a.convention, &overrides)?;
            cmd_identify(&cfg, a.moments)
        }
        Command::Loglik(a) => {
            let file = FileConfig::load_optional(a.config.as_deref())?;
            let budget = a.budget.or(file.budgets.filter).map_or(3, |b| b.0);
            let model = need(a.model.or(file.paths.model), "model file", "--model")?;
            let data = need(a.data.or(file.paths.dataset), "dataset", "--data")?;
            cmd_loglik(&model, &data, budget, a.convention.or(file.convention), a.out.as_deref())
        }
        Command::Bode(a) => {
            let file = FileConfig::load_optional(a.config.as_deref())?;
            let model = need(a.model.or(file.paths.model), "model file", "--model")?;
            let reference = need(a.reference.or(file.paths.reference), "reference model", "--reference")?;
            cmd_bode(&model, &reference, a.points.or(file.bode.points).unwrap_or(200), a.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}


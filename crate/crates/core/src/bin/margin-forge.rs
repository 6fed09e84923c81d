use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use margin_forge::experiment::{compare, run_experiment, ExperimentConfig, OUTPUT_ENV};
use margin_forge::report::{parse_per_class_csv, per_class_svg};
use margin_forge::Error;

#[derive(Parser)]
#[command(
    name = "margin-forge",
    version,
    about = "Maximum-margin losses for imbalanced classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment config.
    Run {
        config: PathBuf,
        /// Dotted override, e.g. `--set loss.kind=erm`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run several configs over several seeds and tabulate mean ± stdev errors.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Directory for `comparison.csv` (default: $MARGIN_FORGE_OUT or `.`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a per-class CSV (class,error,count) as an SVG bar chart.
    Plot { csv: PathBuf, svg: PathBuf },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(&err))
}

fn run(config: PathBuf, overrides: Vec<String>) -> ExitCode {
    let cfg = match ExperimentConfig::load(&config, &overrides) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let outcome = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let dir = cfg.output_dir();
    if let Err(e) = outcome.write_artifacts(&dir) {
        return fail(e);
    }
    println!(
        "{}: top-1 error {:.4} (artifacts in {})",
        outcome.summary.method,
        outcome.report.overall_error,
        dir.display()
    );
    ExitCode::SUCCESS
}

fn run_compare(configs: Vec<PathBuf>, seeds: Vec<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut loaded = Vec::with_capacity(configs.len());
    for path in &configs {
        match ExperimentConfig::load(path, &[]) {
            Ok(c) => loaded.push(c),
            Err(e) => return fail(e),
        }
    }
    let outcome = compare(&loaded, &seeds);
    let csv = outcome.to_csv();
    print!("{csv}");
    let dir = out
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    if let Err(e) =
        fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join("comparison.csv"), &csv))
    {
        return fail(e.into());
    }
    if outcome.failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    for (method, seed, err) in &outcome.failures {
        eprintln!("error: {method} (seed {seed}): {err}");
    }
    let diverged = outcome
        .failures
        .iter()
        .any(|(_, _, e)| matches!(e, Error::Diverged { .. }));
    ExitCode::from(if diverged { 3 } else { 1 })
}

fn plot(csv: PathBuf, svg: PathBuf) -> ExitCode {
    let text = match fs::read_to_string(&csv) {
        Ok(t) => t,
        Err(e) => return fail(e.into()),
    };
    let rows = match parse_per_class_csv(&text) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    match fs::write(&svg, per_class_svg(&rows)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { config, overrides } => run(config, overrides),
        Command::Compare {
            configs,
            seeds,
            out,
        } => run_compare(configs, seeds, out),
        Command::Plot { csv, svg } => plot(csv, svg),
    }
}

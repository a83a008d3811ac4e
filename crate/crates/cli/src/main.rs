use std::path::PathBuf;
use std::process::ExitCode;

use asmc_cli::config::{parse_shape_spec, shape_from_table};
use asmc_cli::{execute, fold_failures, ingest, parse_config, report, resolve_threads, selftest, CliError};
use asmc_core::engine::rng::{stream, DATA};
use asmc_core::engine::Estimator;
use asmc_core::models::{generate_synthetic, ModelKind, Shape};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asmc", version, about = "Adaptive SMC cross-validation for hierarchical and time-series models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a cross-validation experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; overrides ASMC_THREADS and the config.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        estimator: Option<Estimator>,
        /// Output directory for report.json, timings.json and traces.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the model's CSV schema.
    Synth {
        #[arg(long)]
        model: ModelKind,
        /// Comma-separated shape overrides, e.g. "groups=20,max_size=30".
        #[arg(long, default_value = "")]
        shape: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn run(
    config: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
    estimator: Option<Estimator>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = parse_config(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = estimator {
        cfg.estimator = e;
    }
    if let Some(o) = out {
        cfg.output = o;
    }
    if threads == Some(0) {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    let threads = resolve_threads(threads, &cfg)?;
    let result = execute(&cfg, threads)?;
    report::emit_report(&cfg.output, &cfg, &result.report, &result.timings, threads)?;
    let r = &result.report;
    for (name, res) in [("asmc", &r.asmc), ("psis", &r.psis), ("mcmc-refit", &r.mcmc_refit)] {
        if let Some(res) = res {
            println!("{name}: elpd {:.6} (mc se {:.6}) over {} folds", res.aggregate, res.mc_se, res.folds.len());
        }
    }
    println!("wrote {} in {:.2}s", cfg.output.display(), result.timings.total);
    let failures = fold_failures(&result);
    if failures.is_empty() {
        Ok(())
    } else {
        for (est, fold, msg) in &failures {
            eprintln!("{est} fold {fold} failed: {msg}");
        }
        Err(CliError::Numerical(format!("{} fold(s) failed", failures.len())))
    }
}

fn synth(model: ModelKind, shape: &str, out: PathBuf, seed: u64) -> Result<(), CliError> {
    let table = parse_shape_spec(shape).map_err(CliError::Config)?;
    let shape: Shape = shape_from_table(model, table).map_err(|e| CliError::Config(format!("--shape: {e}")))?;
    let s = generate_synthetic(&shape, &mut stream(seed, &[DATA])).map_err(|e| CliError::Config(e.to_string()))?;
    let f = std::fs::File::create(&out).map_err(|e| CliError::Output(format!("cannot write {}: {e}", out.display())))?;
    ingest::write_csv(&s.data, f).map_err(|e| CliError::Output(e.to_string()))?;
    let truth_path = out.with_extension("truth.json");
    let truth = serde_json::to_string_pretty(&s.truth).expect("truth serializes");
    std::fs::write(&truth_path, truth)
        .map_err(|e| CliError::Output(format!("cannot write {}: {e}", truth_path.display())))?;
    println!("wrote {} and {}", out.display(), truth_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run { config, seed, threads, estimator, out } => run(config, seed, threads, estimator, out),
        Command::Synth { model, shape, out, seed } => synth(model, &shape, out, seed),
        Command::Selftest => {
            if selftest::run_all(std::io::stdout()) {
                Ok(())
            } else {
                Err(CliError::Numerical("self-test failed".into()))
            }
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

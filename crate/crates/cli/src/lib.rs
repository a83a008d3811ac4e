//! Batch front end: configuration, CSV ingestion, experiment execution and
//! report emission.

pub mod config;
pub mod ingest;
pub mod report;
pub mod selftest;

use std::sync::Arc;

use asmc_core::engine::rng::{stream, DATA};
use asmc_core::engine::{run_estimators, RunOutput};
use asmc_core::models::{generate_synthetic, Dataset};
use asmc_core::{DeletionScheme, Error, Model};

pub use config::{parse_config, parse_config_str, RunConfig};

/// Environment variable that overrides the configured thread count.
pub const THREADS_ENV: &str = "ASMC_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    /// Process exit code: 1 config, 2 data, 3 numerical. Unwritable output
    /// is a configuration problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn from_engine(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::InvalidScheme(_) | Error::Unsupported { .. } => {
                CliError::Config(e.to_string())
            }
            Error::EmptyGroup(_) | Error::EmptyInput => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

/// Loads or generates the dataset named by the configuration.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match (&cfg.data.path, cfg.synthetic_shape()?) {
        (Some(p), _) => ingest::ingest_csv(cfg.model.kind, p),
        (None, Some(shape)) => generate_synthetic(&shape, &mut stream(cfg.seed, &[DATA]))
            .map(|s| s.data)
            .map_err(|e| CliError::Config(format!("data.synthetic: {e}"))),
        (None, None) => unreachable!("synthetic_shape is Some whenever path is None"),
    }
}

pub fn build_model(cfg: &RunConfig, data: Dataset) -> Result<Arc<dyn Model>, CliError> {
    data.into_model(&cfg.model.options).map_err(|e| CliError::Data(e.to_string()))
}

pub fn build_scheme(cfg: &RunConfig, model: &dyn Model) -> Result<DeletionScheme, CliError> {
    cfg.scheme.build(model.group_sizes(), cfg.seed).map_err(|e| CliError::Config(format!("scheme: {e}")))
}

/// Thread count: explicit override, then `ASMC_THREADS`, then the config,
/// then the machine's parallelism.
pub fn resolve_threads(cli: Option<usize>, cfg: &RunConfig) -> Result<usize, CliError> {
    let env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
        ),
        Err(_) => None,
    };
    let n = cli.or(env).or(cfg.threads).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(CliError::Config("threads must be >= 1".into()));
    }
    Ok(n)
}

/// Runs the configured estimators on a pool of `threads` workers.
pub fn execute(cfg: &RunConfig, threads: usize) -> Result<RunOutput, CliError> {
    let model = build_model(cfg, load_dataset(cfg)?)?;
    let scheme = build_scheme(cfg, &*model)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| run_estimators(&*model, &scheme, cfg.estimand(), &cfg.smc, cfg.seed, cfg.estimator))
        .map_err(CliError::from_engine)
}

/// Fold failures across all estimators, as `(estimator, fold, message)`.
pub fn fold_failures(out: &RunOutput) -> Vec<(&'static str, usize, String)> {
    let r = &out.report;
    [("asmc", &r.asmc), ("psis", &r.psis), ("mcmc-refit", &r.mcmc_refit)]
        .into_iter()
        .filter_map(|(name, res)| res.as_ref().map(|res| (name, res)))
        .flat_map(|(name, res)| res.failures.iter().map(move |f| (name, f.fold, f.error.clone())))
        .collect()
}

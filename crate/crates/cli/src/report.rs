//! Output files: `report.json`, `timings.json` and `traces.csv`.

use std::io::Write;
use std::path::Path;

use asmc_core::engine::{Action, CvReport, EstimatorResult, Timings};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

/// `report.json`: the configuration echo followed by the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: RunConfig,
    #[serde(flatten)]
    pub report: CvReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingsFile {
    pub threads: usize,
    /// Wall-clock seconds.
    pub seconds: Timings,
}

pub const TRACE_HEADER: [&str; 11] =
    ["fold", "step", "n", "exponent_min", "exponent_max", "ess", "bracket_ess", "action", "estimate", "k_hat", "checkpoint"];

fn action_name(a: Action) -> &'static str {
    match a {
        Action::Baseline => "baseline",
        Action::Rejuvenate => "rejuvenate",
        Action::Reweight => "reweight",
        Action::Psis => "psis",
        Action::PsisRejected => "psis-rejected",
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One row per accepted path step, baseline row included, so each fold
/// contributes `L_k + 1` rows.
pub fn write_traces<W: Write>(res: &EstimatorResult, dst: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(TRACE_HEADER)?;
    for f in &res.folds {
        for s in &f.trace {
            w.write_record([
                f.fold.to_string(),
                s.step.to_string(),
                s.n.to_string(),
                s.exponent_min.to_string(),
                s.exponent_max.to_string(),
                s.ess.to_string(),
                opt(s.bracket_ess),
                action_name(s.action).to_string(),
                opt(s.estimate),
                opt(s.k_hat),
                opt(s.checkpoint),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON. Floats use the shortest representation that
/// round-trips, so equal reports give equal bytes.
pub fn report_json(config: &RunConfig, report: &CvReport) -> String {
    let file = ReportFile { config: config.echo(), report: report.clone() };
    let mut s = serde_json::to_string_pretty(&file).expect("reports serialize");
    s.push('\n');
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

/// Writes the report files into `dir`, creating it if needed. `traces.csv`
/// follows the aSMC estimator and is omitted when it did not run.
pub fn emit_report(
    dir: &Path,
    config: &RunConfig,
    report: &CvReport,
    timings: &Timings,
    threads: usize,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("cannot create {}: {e}", dir.display())))?;
    write_file(&dir.join("report.json"), report_json(config, report).as_bytes())?;
    let t = TimingsFile { threads, seconds: timings.clone() };
    write_file(&dir.join("timings.json"), serde_json::to_string_pretty(&t).expect("timings serialize").as_bytes())?;
    if let Some(asmc) = &report.asmc {
        let mut buf = Vec::new();
        write_traces(asmc, &mut buf).map_err(|e| CliError::Output(e.to_string()))?;
        write_file(&dir.join("traces.csv"), &buf)?;
    }
    Ok(())
}

//! The adaptive SMC cross-validation engine and its reference estimators.

mod baseline;
mod cv;
mod fold;
pub mod rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, KernelStats};
use crate::path::PathKind;

pub use baseline::{run_baseline_mcmc, suggested_iterations, BaselineResult};
pub use cv::{
    run_cv, run_estimators, run_psis, run_refit, BaselineSummary, CvReport, EstimatorResult, FoldComparison, RunOutput,
    SchemeSummary, Timings,
};
pub use fold::{
    leo_multistep_log_predictive, run_fold, run_fold_state, run_leo, weighted_estimate, FoldContext, FoldState,
};

/// Baseline MCMC schedule. Retained draws: `(iterations - burn_in) / thin`,
/// of which the last `R` are kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Total iterations; `None` means `burn_in + R * thin`.
    pub iterations: Option<usize>,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { iterations: None, burn_in: 1000, thin: 3 }
    }
}

impl BaselineConfig {
    pub fn total_iterations(&self, r: usize) -> usize {
        self.iterations.unwrap_or(self.burn_in + r * self.thin)
    }
}

/// Which estimator(s) to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Asmc,
    Psis,
    McmcRefit,
    All,
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "asmc" => Ok(Self::Asmc),
            "psis" => Ok(Self::Psis),
            "mcmc-refit" => Ok(Self::McmcRefit),
            "all" => Ok(Self::All),
            o => Err(format!("unknown estimator '{o}' (expected asmc, psis, mcmc-refit or all)")),
        }
    }
}

/// Sampler settings shared by every fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmcConfig {
    /// Number of particles `R`.
    pub particles: usize,
    /// Target `ESS / R` at each adaptive step.
    pub ess_ratio: f64,
    /// PSIS is kept at the final step when `k̂ < khat_threshold`.
    #[serde(with = "crate::engine::serde_inf")]
    pub khat_threshold: f64,
    /// Deletion path; `None` picks ordered deletion for leave-end-out and
    /// tempering otherwise.
    pub path: Option<PathKind>,
    /// Bisection tolerance on `n`, relative to the path length.
    pub tol_fraction: f64,
    pub max_bisection: usize,
    pub kernel: KernelConfig,
    pub baseline: BaselineConfig,
    /// Resample before each rejuvenation. Disabling it is for testing only.
    #[serde(skip, default = "always")]
    pub resample: bool,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            ess_ratio: 0.5,
            khat_threshold: 0.7,
            path: None,
            tol_fraction: 1e-3,
            max_bisection: 60,
            kernel: KernelConfig::default(),
            baseline: BaselineConfig::default(),
            resample: true,
        }
    }
}

fn always() -> bool {
    true
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.particles < 25 {
            return bad(format!("particles must be >= 25 for Pareto smoothing, got {}", self.particles));
        }
        if !(self.ess_ratio > 0.0 && self.ess_ratio < 1.0) {
            return bad(format!("ess_ratio must lie in (0, 1), got {}", self.ess_ratio));
        }
        if self.khat_threshold.is_nan() {
            return bad("khat_threshold must not be NaN".into());
        }
        if !(self.tol_fraction > 0.0 && self.tol_fraction < 1.0) || self.max_bisection == 0 {
            return bad("tol_fraction must lie in (0, 1) and max_bisection be >= 1".into());
        }
        if self.baseline.thin == 0 {
            return bad("baseline.thin must be >= 1".into());
        }
        let total = self.baseline.total_iterations(self.particles);
        if total < self.baseline.burn_in || (total - self.baseline.burn_in) / self.baseline.thin < self.particles {
            return bad(format!(
                "baseline of {total} iterations (burn-in {}, thin {}) retains fewer than {} draws",
                self.baseline.burn_in, self.baseline.thin, self.particles
            ));
        }
        self.kernel.validate()
    }

    /// Keeps PSIS at the final step for this `k̂`.
    pub fn accept_psis(&self, k_hat: f64) -> bool {
        self.khat_threshold == f64::INFINITY || k_hat < self.khat_threshold
    }
}

/// What happened at one accepted step of a fold's path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    /// Step 0: baseline particles.
    Baseline,
    /// Interior step: reweight, resample, rejuvenate.
    Rejuvenate,
    /// Interior step without resampling (test configuration).
    Reweight,
    /// Checkpoint kept the Pareto-smoothed weights.
    Psis,
    /// Checkpoint rejected PSIS and rejuvenated.
    PsisRejected,
}

/// One accepted intermediate distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub n: f64,
    pub exponent_min: f64,
    pub exponent_max: f64,
    /// ESS of the reweighted particles at `n`, before any resampling.
    pub ess: f64,
    /// ESS at the far end of the last bisection bracket.
    pub bracket_ess: Option<f64>,
    pub action: Action,
    /// `ℓ̂_{k,ℓ}` from the particles and weights after this step.
    pub estimate: Option<f64>,
    #[serde(with = "crate::engine::serde_inf_opt")]
    pub k_hat: Option<f64>,
    /// Index into the fold's checkpoints when this step lands on one.
    pub checkpoint: Option<usize>,
    pub kernel_stats: Option<KernelStats>,
}

/// Leave-end-out estimate at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEstimate {
    /// Number of deletion stages at this checkpoint.
    pub deleted: usize,
    /// Last retained time index.
    pub retained_until: usize,
    /// Time index being predicted, if the horizon fits.
    pub target_time: Option<usize>,
    pub estimate: Option<f64>,
    pub mc_se: Option<f64>,
    /// Interior rejuvenations between the previous checkpoint and this one.
    pub sub_interventions: usize,
    /// Whether the checkpoint itself rejuvenated.
    pub rejuvenated: bool,
    #[serde(with = "crate::engine::serde_inf_opt")]
    pub k_hat: Option<f64>,
}

/// Outcome of one fold for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub size: usize,
    /// `ℓ̂_k`; the sum of checkpoint estimates for leave-end-out.
    pub estimate: f64,
    /// Delta-method Monte Carlo standard error of `ℓ̂_k`.
    pub mc_se: f64,
    #[serde(with = "crate::engine::serde_inf_opt")]
    pub k_hat: Option<f64>,
    pub final_action: Action,
    /// Rejuvenation events (interior and final).
    pub kernel_invocations: usize,
    pub kernel_stats: KernelStats,
    pub checkpoints: Vec<CheckpointEstimate>,
    pub trace: Vec<StepRecord>,
}

/// A fold that aborted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub error: String,
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub(crate) mod serde_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => other.parse().map_err(|_| serde::de::Error::custom(format!("expected a number or \"inf\"/\"-inf\", got \"{other}\""))),
            },
        }
    }
}

pub(crate) mod serde_inf_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => super::serde_inf::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "super::serde_inf")] f64);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = SmcConfig::default();
        assert!(c.validate().is_ok());
        c.ess_ratio = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("ess_ratio"));
        c = SmcConfig { particles: 10, ..SmcConfig::default() };
        assert!(c.validate().is_err());
        c = SmcConfig::default();
        c.baseline.iterations = Some(2000);
        assert!(c.validate().is_err());
        c.baseline.iterations = Some(4000);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn threshold_endpoints() {
        let mut c = SmcConfig { khat_threshold: f64::NEG_INFINITY, ..SmcConfig::default() };
        assert!(!c.accept_psis(f64::NEG_INFINITY));
        assert!(!c.accept_psis(-5.0));
        c.khat_threshold = f64::INFINITY;
        assert!(c.accept_psis(f64::INFINITY));
        c.khat_threshold = 0.7;
        assert!(c.accept_psis(0.69) && !c.accept_psis(0.7));
    }

    #[test]
    fn infinite_threshold_round_trips() {
        let c = SmcConfig { khat_threshold: f64::NEG_INFINITY, ..SmcConfig::default() };
        let j = serde_json::to_string(&c).unwrap();
        assert!(j.contains("\"-inf\""));
        let back: SmcConfig = serde_json::from_str(&j).unwrap();
        assert_eq!(back, c);
    }
}

//! Invariant Markov kernels used for particle rejuvenation.

pub mod dns;
pub mod hmc;
pub mod iw;
pub mod rwm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Exponents, Model};

pub use dns::{dns_gibbs_sweep, ffbs, DnsPriors, DnsState};
pub use hmc::{hmc_step, DualAveraging, HmcOutcome};
pub use iw::iw_sample;
pub use rwm::rwm_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Rwm,
    Hmc,
    Gibbs,
}

/// User-facing kernel settings. Unset fields are filled from the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// `None` picks Gibbs when the model provides it, else HMC when the model
    /// has gradients, else RWM.
    pub kind: Option<KernelKind>,
    /// Kernel applications per rejuvenation. `None`: 5 for Gibbs, otherwise
    /// 1 to 10 from the largest baseline lag-1 autocorrelation.
    pub iterations: Option<usize>,
    /// HMC step size; `None` tunes it on the baseline by dual averaging.
    pub step_size: Option<f64>,
    /// HMC leapfrog steps; `None` uses `ceil(trajectory / step_size)`.
    pub leapfrog: Option<usize>,
    pub trajectory: f64,
    pub max_leapfrog: usize,
    pub target_accept: f64,
    /// RWM proposal scale relative to baseline marginal standard deviations.
    pub rwm_scale: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: None,
            iterations: None,
            step_size: None,
            leapfrog: None,
            trajectory: 1.5,
            max_leapfrog: 50,
            target_accept: 0.9,
            rwm_scale: 0.5,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("kernel.{m}")));
        if self.iterations == Some(0) {
            return bad("iterations must be >= 1");
        }
        if self.step_size.is_some_and(|e| !(e > 0.0)) {
            return bad("step_size must be > 0");
        }
        if self.leapfrog == Some(0) || self.max_leapfrog == 0 {
            return bad("leapfrog must be >= 1");
        }
        if !(self.rwm_scale > 0.0) || !(self.trajectory > 0.0) {
            return bad("rwm_scale and trajectory must be > 0");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        Ok(())
    }

    /// Kind actually used for `model`.
    pub fn resolve_kind<M: Model + ?Sized>(&self, model: &M) -> KernelKind {
        self.kind.unwrap_or(if model.supports_gibbs() {
            KernelKind::Gibbs
        } else if model.supports_gradient() {
            KernelKind::Hmc
        } else {
            KernelKind::Rwm
        })
    }
}

/// A kernel with all tuning frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedKernel {
    pub kind: KernelKind,
    pub iterations: usize,
    pub step_size: f64,
    pub leapfrog: usize,
    /// Baseline marginal variances: HMC inverse mass.
    pub inv_mass: Vec<f64>,
    /// RWM per-coordinate proposal standard deviations.
    pub rwm_scales: Vec<f64>,
}

/// Counts from applying a kernel to one particle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    pub proposals: usize,
    pub accepted: usize,
    pub divergent: usize,
}

impl KernelStats {
    pub fn merge(&mut self, o: KernelStats) {
        self.proposals += o.proposals;
        self.accepted += o.accepted;
        self.divergent += o.divergent;
    }
}

impl TunedKernel {
    /// Applies `iterations` transitions targeting the tempered posterior
    /// with exponents `exps`.
    pub fn apply<M: Model + ?Sized, R: Rng>(
        &self,
        model: &M,
        theta: &mut [f64],
        exps: &Exponents,
        iterations: usize,
        rng: &mut R,
    ) -> Result<KernelStats> {
        let mut stats = KernelStats::default();
        for _ in 0..iterations {
            match self.kind {
                KernelKind::Gibbs => {
                    model.gibbs_sweep(theta, exps, rng).ok_or(Error::Unsupported {
                        model: model.name(),
                        what: "Gibbs sweep",
                    })??;
                    stats.proposals += 1;
                    stats.accepted += 1;
                }
                KernelKind::Hmc => {
                    let o = hmc_step(
                        theta,
                        |q, g| {
                            model.log_target_grad(q, exps, g).unwrap_or(f64::NAN)
                        },
                        &self.inv_mass,
                        self.step_size,
                        self.leapfrog,
                        rng,
                    );
                    stats.proposals += 1;
                    stats.accepted += o.accepted as usize;
                    stats.divergent += o.divergent as usize;
                }
                KernelKind::Rwm => {
                    let mut lp = model.log_target(theta, exps);
                    if !lp.is_finite() {
                        return Err(Error::NonFiniteInit);
                    }
                    let ok = rwm_step(theta, &mut lp, |q| model.log_target(q, exps), &self.rwm_scales, rng);
                    stats.proposals += 1;
                    stats.accepted += ok as usize;
                }
            }
        }
        Ok(stats)
    }
}

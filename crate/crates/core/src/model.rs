//! The contract every built-in model satisfies.

use std::ops::Range;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheme::UnitIndex;

/// Named index range inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub range: Range<usize>,
}

/// Model-owned description of the flat parameter layout.
///
/// Scale and covariance blocks are stored unconstrained (log scales,
/// log-Cholesky factors) so any finite vector of the right length is valid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let start = self.dim();
        let range = start..start + len;
        self.blocks.push(Block { name: name.into(), range: range.clone() });
        range
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.range.end)
    }

    pub fn block(&self, name: &str) -> Option<&Range<usize>> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.range)
    }
}

/// One joint parameter state `Θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDraw(pub Vec<f64>);

impl ParameterDraw {
    pub fn new(values: Vec<f64>, layout: &Layout) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::InvalidArgument(format!(
                "draw has {} values, layout expects {}",
                values.len(),
                layout.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("draw has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Per-unit likelihood exponents. Units default to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Exponents {
    values: Vec<Vec<f64>>,
}

impl Exponents {
    pub fn ones(sizes: &[usize]) -> Self {
        Self { values: sizes.iter().map(|&n| vec![1.0; n]).collect() }
    }

    #[inline]
    pub fn get(&self, unit: UnitIndex) -> f64 {
        self.values[unit.group - 1][unit.within - 1]
    }

    pub fn set(&mut self, unit: UnitIndex, e: f64) {
        self.values[unit.group - 1][unit.within - 1] = e;
    }

    /// Exponents of group `g` (1-based), indexed by `within - 1`.
    pub fn group(&self, g: usize) -> &[f64] {
        &self.values[g - 1]
    }

    pub fn all_ones(&self) -> bool {
        self.values.iter().flatten().all(|&e| e == 1.0)
    }
}

/// A Bayesian hierarchical model `p(φ) Π_g p(θ_g | φ) Π_i p(y_{g,i} | θ_g, φ)`
/// over a flat parameter vector.
pub trait Model: Send + Sync {
    fn name(&self) -> &'static str;

    fn layout(&self) -> &Layout;

    fn dim(&self) -> usize {
        self.layout().dim()
    }

    /// `N_1..N_G`.
    fn group_sizes(&self) -> &[usize];

    fn log_prior(&self, theta: &[f64]) -> f64;

    /// `log p(y_{g,i} | θ_g, φ)` at the observed value.
    fn unit_log_lik(&self, theta: &[f64], unit: UnitIndex) -> f64;

    /// Tempered log target `log p(Θ) + Σ e_u log p(y_u | Θ)`.
    fn log_target(&self, theta: &[f64], exps: &Exponents) -> f64 {
        let mut acc = self.log_prior(theta);
        if !acc.is_finite() {
            return acc;
        }
        for (g, &n) in self.group_sizes().iter().enumerate() {
            for i in 1..=n {
                let u = UnitIndex::new(g + 1, i);
                let e = exps.get(u);
                if e != 0.0 {
                    acc += e * self.unit_log_lik(theta, u);
                }
            }
        }
        acc
    }

    fn supports_gradient(&self) -> bool {
        false
    }

    fn supports_gibbs(&self) -> bool {
        false
    }

    /// Log target and its gradient, written into `grad`. `None` when the model
    /// has no analytic gradient.
    fn log_target_grad(&self, _theta: &[f64], _exps: &Exponents, _grad: &mut [f64]) -> Option<f64> {
        None
    }

    /// Starting point for baseline MCMC.
    fn initial_point(&self) -> Vec<f64>;

    /// One model-specific Gibbs sweep targeting the tempered posterior, in place.
    fn gibbs_sweep(&self, _theta: &mut [f64], _exps: &Exponents, _rng: &mut dyn RngCore) -> Option<Result<()>> {
        None
    }

    /// `log p(y_unit | Θ)` where the latent path between the last retained
    /// observation and `unit` spans `h` steps and is simulated forward when
    /// `h > 1`. `h = 1` is the plain one-step density.
    fn log_predictive_ahead(
        &self,
        theta: &[f64],
        unit: UnitIndex,
        h: usize,
        _rng: &mut dyn RngCore,
    ) -> Result<f64> {
        if h == 1 {
            Ok(self.unit_log_lik(theta, unit))
        } else {
            Err(Error::Unsupported { model: self.name(), what: "multi-step forward simulation" })
        }
    }
}

/// `Σ_{u ∈ units} log p(y_u | Θ)`: the joint predictive log density of a fold
/// whose units are conditionally independent given `Θ`.
pub fn joint_predictive_log_density<M: Model + ?Sized>(model: &M, theta: &[f64], units: &[UnitIndex]) -> f64 {
    units.iter().map(|&u| model.unit_log_lik(theta, u)).sum()
}

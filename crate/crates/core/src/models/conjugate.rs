//! `μ ~ N(0, κ²)`, `θ_g ~ N(μ, τ²)`, `y_{g,i} ~ N(θ_g, σ²)` with known
//! variances. Every case-deleted predictive has a closed form.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_cholesky, LN_2PI};
use crate::model::{Exponents, Layout, Model};
use crate::scheme::UnitIndex;

fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * LN_2PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateData {
    /// Observations per group.
    pub y: Vec<Vec<f64>>,
}

impl ConjugateData {
    pub fn from_rows(rows: &[(usize, f64)]) -> Result<Self> {
        let g_max = rows.iter().map(|r| r.0).max().ok_or(Error::EmptyInput)?;
        let mut y = vec![Vec::new(); g_max];
        for &(g, v) in rows {
            if g == 0 {
                return Err(Error::InvalidArgument("group ids are 1-based".into()));
            }
            y[g - 1].push(v);
        }
        if let Some(g) = y.iter().position(Vec::is_empty) {
            return Err(Error::EmptyGroup(g + 1));
        }
        Ok(Self { y })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConjugateParams {
    pub kappa: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl Default for ConjugateParams {
    fn default() -> Self {
        Self { kappa: 2.0, tau: 1.0, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConjugateShape {
    pub groups: usize,
    pub size: usize,
    #[serde(flatten)]
    pub params: ConjugateParams,
}

impl Default for ConjugateShape {
    fn default() -> Self {
        Self { groups: 10, size: 20, params: ConjugateParams::default() }
    }
}

#[derive(Debug, Clone)]
pub struct ConjugateGaussianModel {
    pub params: ConjugateParams,
    data: ConjugateData,
    sizes: Vec<usize>,
    layout: Layout,
}

impl ConjugateGaussianModel {
    pub fn new(data: ConjugateData, params: ConjugateParams) -> Result<Self> {
        if data.y.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(g) = data.y.iter().position(Vec::is_empty) {
            return Err(Error::EmptyGroup(g + 1));
        }
        if !(params.kappa > 0.0 && params.tau > 0.0 && params.sigma > 0.0) {
            return Err(Error::InvalidArgument("conjugate model scales must be > 0".into()));
        }
        let sizes = data.y.iter().map(Vec::len).collect();
        let mut layout = Layout::default();
        layout.push("mu", 1);
        layout.push("theta", data.y.len());
        Ok(Self { params, data, sizes, layout })
    }

    pub fn data(&self) -> &ConjugateData {
        &self.data
    }

    pub fn observation(&self, u: UnitIndex) -> f64 {
        self.data.y[u.group - 1][u.within - 1]
    }

    fn all_units(&self) -> Vec<UnitIndex> {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(g, &n)| (1..=n).map(move |i| UnitIndex::new(g + 1, i)))
            .collect()
    }

    fn marginal_log_density(&self, units: &[UnitIndex]) -> Result<f64> {
        if units.is_empty() {
            return Ok(0.0);
        }
        let ConjugateParams { kappa, tau, sigma } = self.params;
        let n = units.len();
        let cov = DMatrix::from_fn(n, n, |a, b| {
            let (ua, ub) = (units[a], units[b]);
            let mut c = kappa * kappa;
            if ua.group == ub.group {
                c += tau * tau;
            }
            if ua == ub {
                c += sigma * sigma;
            }
            c
        });
        let l = spd_cholesky(&cov, "marginal covariance")?;
        let y = DVector::from_iterator(n, units.iter().map(|&u| self.observation(u)));
        let z = l.solve_lower_triangular(&y).expect("triangular");
        let half_log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
        Ok(-0.5 * z.norm_squared() - half_log_det - 0.5 * n as f64 * LN_2PI)
    }

    /// `log p(y_A | y_{-A})` by Gaussian conditioning of the marginal law of
    /// all observations.
    pub fn oracle_joint(&self, fold: &[UnitIndex]) -> Result<f64> {
        let rest: Vec<UnitIndex> = self.all_units().into_iter().filter(|u| !fold.contains(u)).collect();
        let mut all = rest.clone();
        all.extend_from_slice(fold);
        Ok(self.marginal_log_density(&all)? - self.marginal_log_density(&rest)?)
    }

    /// `Σ_{u∈A} log p(y_u | y_{-A})`.
    pub fn oracle_pointwise(&self, fold: &[UnitIndex]) -> Result<f64> {
        let rest: Vec<UnitIndex> = self.all_units().into_iter().filter(|u| !fold.contains(u)).collect();
        let base = self.marginal_log_density(&rest)?;
        let mut acc = 0.0;
        for &u in fold {
            let mut with = rest.clone();
            with.push(u);
            acc += self.marginal_log_density(&with)? - base;
        }
        Ok(acc)
    }

    /// Exact posterior mean and variance of `μ` given all data.
    pub fn posterior_mu(&self) -> (f64, f64) {
        let ConjugateParams { kappa, tau, sigma } = self.params;
        // Integrating θ_g: group means ȳ_g ~ N(μ, τ² + σ²/N_g) independently.
        let mut prec = 1.0 / (kappa * kappa);
        let mut num = 0.0;
        for ys in &self.data.y {
            let v = tau * tau + sigma * sigma / ys.len() as f64;
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            prec += 1.0 / v;
            num += mean / v;
        }
        (num / prec, 1.0 / prec)
    }

    pub fn generate<R: Rng + ?Sized>(shape: &ConjugateShape, rng: &mut R) -> Result<(ConjugateData, Vec<(String, Vec<f64>)>)> {
        if shape.groups == 0 || shape.size == 0 {
            return Err(Error::InvalidArgument("groups and size must be >= 1".into()));
        }
        let p = shape.params;
        let mu = p.kappa * rng.sample::<f64, _>(StandardNormal);
        let theta: Vec<f64> = (0..shape.groups).map(|_| mu + p.tau * rng.sample::<f64, _>(StandardNormal)).collect();
        let y = theta
            .iter()
            .map(|&t| (0..shape.size).map(|_| t + p.sigma * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Ok((ConjugateData { y }, vec![("mu".into(), vec![mu]), ("theta".into(), theta)]))
    }
}

impl Model for ConjugateGaussianModel {
    fn name(&self) -> &'static str {
        "conjugate"
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn group_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let mu = theta[0];
        normal_lpdf(mu, 0.0, self.params.kappa)
            + theta[1..].iter().map(|&t| normal_lpdf(t, mu, self.params.tau)).sum::<f64>()
    }

    fn unit_log_lik(&self, theta: &[f64], unit: UnitIndex) -> f64 {
        normal_lpdf(self.observation(unit), theta[unit.group], self.params.sigma)
    }

    fn supports_gradient(&self) -> bool {
        true
    }

    fn supports_gibbs(&self) -> bool {
        true
    }

    fn log_target_grad(&self, theta: &[f64], exps: &Exponents, grad: &mut [f64]) -> Option<f64> {
        let ConjugateParams { kappa, tau, sigma } = self.params;
        let mu = theta[0];
        let mut lp = normal_lpdf(mu, 0.0, kappa);
        grad[0] = -mu / (kappa * kappa);
        for (g, ys) in self.data.y.iter().enumerate() {
            let t = theta[g + 1];
            lp += normal_lpdf(t, mu, tau);
            let d = (t - mu) / (tau * tau);
            grad[0] += d;
            grad[g + 1] = -d;
            for (i, &y) in ys.iter().enumerate() {
                let e = exps.group(g + 1)[i];
                if e != 0.0 {
                    lp += e * normal_lpdf(y, t, sigma);
                    grad[g + 1] += e * (y - t) / (sigma * sigma);
                }
            }
        }
        Some(lp)
    }

    fn initial_point(&self) -> Vec<f64> {
        let means: Vec<f64> = self.data.y.iter().map(|ys| ys.iter().sum::<f64>() / ys.len() as f64).collect();
        let mut out = vec![means.iter().sum::<f64>() / means.len() as f64];
        out.extend(means);
        out
    }

    fn gibbs_sweep(&self, theta: &mut [f64], exps: &Exponents, rng: &mut dyn RngCore) -> Option<Result<()>> {
        let ConjugateParams { kappa, tau, sigma } = self.params;
        let (t2, s2) = (tau * tau, sigma * sigma);
        let mu = theta[0];
        for (g, ys) in self.data.y.iter().enumerate() {
            let e = exps.group(g + 1);
            let w: f64 = e.iter().sum();
            let wy: f64 = ys.iter().zip(e).map(|(y, e)| y * e).sum();
            let prec = 1.0 / t2 + w / s2;
            let mean = (mu / t2 + wy / s2) / prec;
            theta[g + 1] = mean + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
        }
        let groups = self.data.y.len() as f64;
        let prec = 1.0 / (kappa * kappa) + groups / t2;
        let mean = theta[1..].iter().sum::<f64>() / t2 / prec;
        theta[0] = mean + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
        Some(Ok(()))
    }
}

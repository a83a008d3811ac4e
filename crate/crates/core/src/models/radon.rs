//! Varying-intercept, varying-slope multilevel normal model:
//! `y_i ~ N(β_{g,0} + β_{g,1} x_i, σ²)`, `β_g ~ MVN(Γ (1, u_g)ᵀ, Σ)`.
//!
//! Priors: `Γ_ab ~ N(0, 2.5²)`, log-Cholesky entries of `Σ ~ N(0, 1)`,
//! `σ ~ half-normal(1)` sampled on the log scale.
//!
//! Group effects are sampled non-centred, `β_g = Γ (1, u_g)ᵀ + L z_g` with
//! `z_g ~ N(0, I)` and `Σ = L Lᵀ`, which removes the funnel between `β` and
//! `Σ` for small groups. The density over `(Γ, Σ, σ, β)` is unchanged.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::LN_2PI;
use crate::model::{Exponents, Layout, Model};
use crate::scheme::UnitIndex;

const GAMMA_SD: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadonData {
    pub y: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    /// Group-level covariate `u_g`.
    pub u: Vec<f64>,
}

impl RadonData {
    /// Rows `(y, x, group, u)`. `u` must agree within a group.
    pub fn from_rows(rows: &[(f64, f64, usize, f64)]) -> Result<Self> {
        let g_max = rows.iter().map(|r| r.2).max().ok_or(Error::EmptyInput)?;
        let mut y = vec![Vec::new(); g_max];
        let mut x = vec![Vec::new(); g_max];
        let mut u: Vec<Option<f64>> = vec![None; g_max];
        for (k, &(yv, xv, g, uv)) in rows.iter().enumerate() {
            if g == 0 {
                return Err(Error::InvalidArgument(format!("row {}: group ids are 1-based", k + 1)));
            }
            match u[g - 1] {
                Some(prev) if prev != uv => {
                    return Err(Error::InvalidArgument(format!("row {}: u differs within group {g}", k + 1)))
                }
                _ => u[g - 1] = Some(uv),
            }
            y[g - 1].push(yv);
            x[g - 1].push(xv);
        }
        if let Some(g) = y.iter().position(Vec::is_empty) {
            return Err(Error::EmptyGroup(g + 1));
        }
        Ok(Self { y, x, u: u.into_iter().map(|v| v.unwrap_or(0.0)).collect() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadonShape {
    pub groups: usize,
    /// Largest group size; sizes are skewed towards 1.
    pub max_size: usize,
    pub x_prob: f64,
    pub sigma: f64,
}

impl Default for RadonShape {
    fn default() -> Self {
        Self { groups: 20, max_size: 30, x_prob: 0.6, sigma: 0.75 }
    }
}

#[derive(Debug, Clone)]
pub struct MultilevelNormalModel {
    data: RadonData,
    sizes: Vec<usize>,
    layout: Layout,
}

// Flat layout offsets.
const GAMMA: usize = 0;
const CHOL: usize = 4;
const LOG_SIGMA: usize = 7;
const Z: usize = 8;

impl MultilevelNormalModel {
    pub fn new(data: RadonData) -> Result<Self> {
        let groups = data.y.len();
        if groups == 0 {
            return Err(Error::EmptyInput);
        }
        if data.x.len() != groups || data.u.len() != groups {
            return Err(Error::InvalidArgument("radon data arrays disagree on group count".into()));
        }
        for g in 0..groups {
            if data.y[g].is_empty() {
                return Err(Error::EmptyGroup(g + 1));
            }
            if data.x[g].len() != data.y[g].len() {
                return Err(Error::InvalidArgument(format!("group {}: x and y lengths differ", g + 1)));
            }
        }
        let sizes = data.y.iter().map(Vec::len).collect();
        let mut layout = Layout::default();
        layout.push("gamma", 4);
        layout.push("sigma_beta_chol", 3);
        layout.push("log_sigma", 1);
        layout.push("beta_raw", 2 * groups);
        Ok(Self { data, sizes, layout })
    }

    pub fn data(&self) -> &RadonData {
        &self.data
    }

    /// Lower Cholesky factor `[l00, l10, l11]` of `Σ`.
    fn chol(theta: &[f64]) -> [f64; 3] {
        [theta[CHOL].exp(), theta[CHOL + 1], theta[CHOL + 2].exp()]
    }

    /// `β_g` for 0-based group `g`.
    pub fn beta(&self, theta: &[f64], g: usize) -> [f64; 2] {
        Self::beta_with(theta, &Self::chol(theta), self.data.u[g], g)
    }

    fn beta_with(theta: &[f64], l: &[f64; 3], u: f64, g: usize) -> [f64; 2] {
        let (z0, z1) = (theta[Z + 2 * g], theta[Z + 2 * g + 1]);
        [
            theta[GAMMA] + theta[GAMMA + 1] * u + l[0] * z0,
            theta[GAMMA + 2] + theta[GAMMA + 3] * u + l[1] * z0 + l[2] * z1,
        ]
    }

    pub fn generate<R: Rng + ?Sized>(shape: &RadonShape, rng: &mut R) -> Result<(RadonData, Vec<(String, Vec<f64>)>)> {
        if shape.groups == 0 || shape.max_size == 0 {
            return Err(Error::InvalidArgument("groups and max_size must be >= 1".into()));
        }
        let gamma = [1.5, 0.7, -0.6, 0.1];
        let sd = [0.35, 0.25];
        let corr = 0.3;
        let mut data = RadonData { y: vec![], x: vec![], u: vec![] };
        let mut betas = Vec::new();
        for g in 0..shape.groups {
            // Skewed sizes: the largest group always has max_size items.
            let n = if g == 0 {
                shape.max_size
            } else {
                1 + ((shape.max_size - 1) as f64 * rng.random::<f64>().powf(2.5)).floor() as usize
            };
            let u: f64 = rng.sample(StandardNormal);
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let b0 = gamma[0] + gamma[1] * u + sd[0] * z0;
            let b1 = gamma[2] + gamma[3] * u + sd[1] * (corr * z0 + (1.0 - corr * corr).sqrt() * z1);
            let mut ys = Vec::with_capacity(n);
            let mut xs = Vec::with_capacity(n);
            for _ in 0..n {
                let x = if rng.random::<f64>() < shape.x_prob { 1.0 } else { 0.0 };
                ys.push(b0 + b1 * x + shape.sigma * rng.sample::<f64, _>(StandardNormal));
                xs.push(x);
            }
            data.y.push(ys);
            data.x.push(xs);
            data.u.push(u);
            betas.extend([b0, b1]);
        }
        Ok((data, vec![("gamma".into(), gamma.to_vec()), ("sigma".into(), vec![shape.sigma]), ("beta".into(), betas)]))
    }
}

impl Model for MultilevelNormalModel {
    fn name(&self) -> &'static str {
        "radon"
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn group_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; theta.len()];
        self.prior_grad(theta, &mut g)
    }

    fn unit_log_lik(&self, theta: &[f64], unit: UnitIndex) -> f64 {
        let (g, i) = (unit.group - 1, unit.within - 1);
        let sigma = theta[LOG_SIGMA].exp();
        let b = self.beta(theta, g);
        let z = (self.data.y[g][i] - b[0] - b[1] * self.data.x[g][i]) / sigma;
        -0.5 * z * z - theta[LOG_SIGMA] - 0.5 * LN_2PI
    }

    fn supports_gradient(&self) -> bool {
        true
    }

    fn log_target_grad(&self, theta: &[f64], exps: &Exponents, grad: &mut [f64]) -> Option<f64> {
        let mut lp = self.prior_grad(theta, grad);
        let log_sigma = theta[LOG_SIGMA];
        let inv_var = (-2.0 * log_sigma).exp();
        let l = Self::chol(theta);
        let mut grad_l = [0.0; 3];
        for g in 0..self.sizes.len() {
            let e = exps.group(g + 1);
            let u = self.data.u[g];
            let [b0, b1] = Self::beta_with(theta, &l, u, g);
            let mut db = [0.0; 2];
            for (i, (&y, &x)) in self.data.y[g].iter().zip(&self.data.x[g]).enumerate() {
                if e[i] == 0.0 {
                    continue;
                }
                let r = y - b0 - b1 * x;
                lp += e[i] * (-0.5 * r * r * inv_var - log_sigma - 0.5 * LN_2PI);
                let d = e[i] * r * inv_var;
                db[0] += d;
                db[1] += d * x;
                grad[LOG_SIGMA] += e[i] * (r * r * inv_var - 1.0);
            }
            let (z0, z1) = (theta[Z + 2 * g], theta[Z + 2 * g + 1]);
            grad[GAMMA] += db[0];
            grad[GAMMA + 1] += db[0] * u;
            grad[GAMMA + 2] += db[1];
            grad[GAMMA + 3] += db[1] * u;
            grad[Z + 2 * g] += l[0] * db[0] + l[1] * db[1];
            grad[Z + 2 * g + 1] += l[2] * db[1];
            grad_l[0] += db[0] * z0;
            grad_l[1] += db[1] * z0;
            grad_l[2] += db[1] * z1;
        }
        // Chain rule through the exponentiated diagonal.
        grad[CHOL] += grad_l[0] * l[0];
        grad[CHOL + 1] += grad_l[1];
        grad[CHOL + 2] += grad_l[2] * l[2];
        Some(lp)
    }

    fn initial_point(&self) -> Vec<f64> {
        // Γ_0 at the grand mean, all groups at the population line.
        let mut out = vec![0.0; self.layout.dim()];
        let n: usize = self.sizes.iter().sum();
        out[GAMMA] = self.data.y.iter().flatten().sum::<f64>() / n as f64;
        out
    }
}

impl MultilevelNormalModel {
    /// Log prior, writing its gradient into `grad` (overwritten).
    fn prior_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut lp = 0.0;
        for k in 0..4 {
            let z = theta[GAMMA + k] / GAMMA_SD;
            lp += -0.5 * z * z - GAMMA_SD.ln() - 0.5 * LN_2PI;
            grad[GAMMA + k] = -theta[GAMMA + k] / (GAMMA_SD * GAMMA_SD);
        }
        for k in 0..3 {
            let c = theta[CHOL + k];
            lp += -0.5 * c * c - 0.5 * LN_2PI;
            grad[CHOL + k] = -c;
        }
        // σ ~ half-normal(1) on log σ: log(2 φ(σ)) + log σ.
        let s = theta[LOG_SIGMA];
        let sigma = s.exp();
        lp += -0.5 * sigma * sigma + std::f64::consts::LN_2 - 0.5 * LN_2PI + s;
        grad[LOG_SIGMA] = -sigma * sigma + 1.0;

        for (k, &z) in theta[Z..].iter().enumerate() {
            lp += -0.5 * z * z - 0.5 * LN_2PI;
            grad[Z + k] = -z;
        }
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_density_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (data, _) = MultilevelNormalModel::generate(&RadonShape { groups: 4, max_size: 6, ..Default::default() }, &mut rng).unwrap();
        let m = MultilevelNormalModel::new(data).unwrap();
        let theta: Vec<f64> = (0..m.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for g in 1..=4 {
            for i in 1..=m.group_sizes()[g - 1] {
                let (y, x) = (m.data.y[g - 1][i - 1], m.data.x[g - 1][i - 1]);
                let sigma = theta[LOG_SIGMA].exp();
                let b = m.beta(&theta, g - 1);
                let mean = b[0] + b[1] * x;
                let oracle = (-(y - mean).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                assert!((m.unit_log_lik(&theta, UnitIndex::new(g, i)) - oracle.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_reject_inconsistent_u() {
        assert!(RadonData::from_rows(&[(1.0, 0.0, 1, 0.5), (1.0, 1.0, 1, 0.6)]).is_err());
        let d = RadonData::from_rows(&[(1.0, 0.0, 2, 0.5), (2.0, 1.0, 1, 0.1)]).unwrap();
        assert_eq!(d.u, vec![0.1, 0.5]);
    }

    #[test]
    fn skewed_sizes_reach_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, _) = MultilevelNormalModel::generate(&RadonShape { groups: 20, max_size: 30, ..Default::default() }, &mut rng).unwrap();
        let sizes: Vec<usize> = d.y.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().max(), Some(&30));
        assert!(sizes.iter().all(|&n| (1..=30).contains(&n)));
        let small = sizes.iter().filter(|&&n| n <= 10).count();
        assert!(small >= 10, "{sizes:?}");
    }
}

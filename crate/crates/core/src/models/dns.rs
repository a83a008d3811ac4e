//! Dynamic Nelson–Siegel yield-curve model as a random-walk dynamic linear
//! model with a single series (`G = 1`) whose units are the monthly
//! `K`-variate yield vectors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::dns::{dns_gibbs_sweep, DnsPriors, DnsState};
use crate::linalg::{
    chain_log_chol, iw_log_chol_grad, iw_log_chol_logpdf, log_chol_from_lower, lower_from_log_chol, mvn_logpdf_chol,
    mvn_logpdf_chol_grad, spd_cholesky, tri_len,
};
use crate::model::{Exponents, Layout, Model};
use crate::scheme::UnitIndex;

pub const DEFAULT_LAMBDA: f64 = 0.0609;
pub const DEFAULT_MATURITIES: [f64; 5] = [2.0, 5.0, 10.0, 20.0, 30.0];

/// Level, slope and curvature loadings at maturity `tau`.
pub fn ns_loadings(tau: f64, lambda: f64) -> [f64; 3] {
    let lt = lambda * tau;
    let slope = (1.0 - (-lt).exp()) / lt;
    [1.0, slope, slope - (-lt).exp()]
}

/// `K × 3` design matrix.
pub fn ns_design(maturities: &[f64], lambda: f64) -> DMatrix<f64> {
    DMatrix::from_fn(maturities.len(), 3, |i, j| ns_loadings(maturities[i], lambda)[j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnsData {
    pub maturities: Vec<f64>,
    /// `y_1..y_T`, each of length `K`.
    pub y: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnsShape {
    pub months: usize,
    pub maturities: Vec<f64>,
    pub obs_sd: f64,
    pub state_sd: f64,
}

impl Default for DnsShape {
    fn default() -> Self {
        Self { months: 60, maturities: DEFAULT_MATURITIES.to_vec(), obs_sd: 0.3, state_sd: 0.15 }
    }
}

#[derive(Debug, Clone)]
pub struct DnsModel {
    data: DnsData,
    ys: Vec<DVector<f64>>,
    x: DMatrix<f64>,
    pub priors: DnsPriors,
    sizes: Vec<usize>,
    layout: Layout,
    k: usize,
}

impl DnsModel {
    pub fn new(data: DnsData, lambda: f64) -> Result<Self> {
        let k = data.maturities.len();
        let t = data.y.len();
        if k == 0 || t == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(i) = data.y.iter().position(|r| r.len() != k) {
            return Err(Error::InvalidArgument(format!("month {} has {} yields, expected {k}", i + 1, data.y[i].len())));
        }
        if !(lambda > 0.0) || data.maturities.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidArgument("decay and maturities must be > 0".into()));
        }
        let ys = data.y.iter().map(|r| DVector::from_column_slice(r)).collect();
        let x = ns_design(&data.maturities, lambda);
        let mut layout = Layout::default();
        layout.push("beta", 3 * (t + 1));
        layout.push("sigma_y_chol", tri_len(k));
        layout.push("sigma_beta_chol", 6);
        Ok(Self { priors: DnsPriors::standard(k, 3), data, ys, x, sizes: vec![t], layout, k })
    }

    pub fn horizon(&self) -> usize {
        self.ys.len()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn observations(&self) -> &[DVector<f64>] {
        &self.ys
    }

    pub fn data(&self) -> &DnsData {
        &self.data
    }

    fn sy_off(&self) -> usize {
        3 * (self.horizon() + 1)
    }

    fn sb_off(&self) -> usize {
        self.sy_off() + tri_len(self.k)
    }

    fn beta<'a>(&self, theta: &'a [f64], t: usize) -> &'a [f64] {
        &theta[3 * t..3 * t + 3]
    }

    pub fn decode(&self, theta: &[f64]) -> DnsState {
        let ly = lower_from_log_chol(&theta[self.sy_off()..self.sb_off()], self.k);
        let lb = lower_from_log_chol(&theta[self.sb_off()..], 3);
        DnsState {
            beta: (0..=self.horizon()).map(|t| DVector::from_column_slice(self.beta(theta, t))).collect(),
            sigma_y: &ly * ly.transpose(),
            sigma_beta: &lb * lb.transpose(),
        }
    }

    pub fn encode(&self, state: &DnsState, theta: &mut [f64]) -> Result<()> {
        for (t, b) in state.beta.iter().enumerate() {
            theta[3 * t..3 * t + 3].copy_from_slice(b.as_slice());
        }
        let (sy, sb) = (self.sy_off(), self.sb_off());
        log_chol_from_lower(&spd_cholesky(&state.sigma_y, "Sigma_y")?, &mut theta[sy..sb]);
        log_chol_from_lower(&spd_cholesky(&state.sigma_beta, "Sigma_beta")?, &mut theta[sb..]);
        Ok(())
    }

    fn residual(&self, theta: &[f64], t: usize) -> Vec<f64> {
        let b = DVector::from_column_slice(self.beta(theta, t));
        (&self.ys[t - 1] - &self.x * b).as_slice().to_vec()
    }

    pub fn generate<R: Rng + ?Sized>(shape: &DnsShape, rng: &mut R) -> Result<(DnsData, Vec<(String, Vec<f64>)>)> {
        if shape.months == 0 || shape.maturities.is_empty() {
            return Err(Error::InvalidArgument("months and maturities must be non-empty".into()));
        }
        let x = ns_design(&shape.maturities, DEFAULT_LAMBDA);
        let mut beta = DVector::from_column_slice(&[2.0, -1.5, 0.5]);
        let mut states = beta.as_slice().to_vec();
        let mut y = Vec::with_capacity(shape.months);
        for _ in 0..shape.months {
            beta += DVector::from_fn(3, |_, _| shape.state_sd * rng.sample::<f64, _>(StandardNormal));
            let noise = DVector::from_fn(shape.maturities.len(), |_, _| shape.obs_sd * rng.sample::<f64, _>(StandardNormal));
            y.push((&x * &beta + noise).as_slice().to_vec());
            states.extend_from_slice(beta.as_slice());
        }
        Ok((
            DnsData { maturities: shape.maturities.clone(), y },
            vec![("beta".into(), states), ("obs_sd".into(), vec![shape.obs_sd]), ("state_sd".into(), vec![shape.state_sd])],
        ))
    }
}

impl Model for DnsModel {
    fn name(&self) -> &'static str {
        "dns"
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn group_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let ly = lower_from_log_chol(&theta[self.sy_off()..self.sb_off()], self.k);
        let lb = lower_from_log_chol(&theta[self.sb_off()..], 3);
        let mut lp = iw_log_chol_logpdf(&ly, self.priors.nu_y, &self.priors.s_y)
            + iw_log_chol_logpdf(&lb, self.priors.nu_beta, &self.priors.s_beta);
        let p0 = spd_cholesky(&self.priors.p, "P").expect("prior precision");
        let r0 = DVector::from_column_slice(self.beta(theta, 0)) - &self.priors.m;
        let z = p0.transpose() * r0;
        lp += -0.5 * z.norm_squared() + p0.diagonal().iter().map(|v| v.ln()).sum::<f64>()
            - 1.5 * crate::linalg::LN_2PI;
        for t in 1..=self.horizon() {
            let d: Vec<f64> = (0..3).map(|j| theta[3 * t + j] - theta[3 * (t - 1) + j]).collect();
            lp += mvn_logpdf_chol(&lb, &d);
        }
        lp
    }

    fn unit_log_lik(&self, theta: &[f64], unit: UnitIndex) -> f64 {
        let ly = lower_from_log_chol(&theta[self.sy_off()..self.sb_off()], self.k);
        mvn_logpdf_chol(&ly, &self.residual(theta, unit.within))
    }

    fn log_target(&self, theta: &[f64], exps: &Exponents) -> f64 {
        let ly = lower_from_log_chol(&theta[self.sy_off()..self.sb_off()], self.k);
        let e = exps.group(1);
        let mut lp = self.log_prior(theta);
        for t in 1..=self.horizon() {
            if e[t - 1] != 0.0 {
                lp += e[t - 1] * mvn_logpdf_chol(&ly, &self.residual(theta, t));
            }
        }
        lp
    }

    fn supports_gradient(&self) -> bool {
        true
    }

    fn supports_gibbs(&self) -> bool {
        true
    }

    fn log_target_grad(&self, theta: &[f64], exps: &Exponents, grad: &mut [f64]) -> Option<f64> {
        grad.iter_mut().for_each(|v| *v = 0.0);
        let (sy, sb) = (self.sy_off(), self.sb_off());
        let ly = lower_from_log_chol(&theta[sy..sb], self.k);
        let lb = lower_from_log_chol(&theta[sb..], 3);
        let mut gly = DMatrix::zeros(self.k, self.k);
        let mut glb = DMatrix::zeros(3, 3);
        let mut lp = iw_log_chol_grad(&ly, self.priors.nu_y, &self.priors.s_y, &mut gly)
            + iw_log_chol_grad(&lb, self.priors.nu_beta, &self.priors.s_beta, &mut glb);
        // β_0 ~ N(m, P⁻¹).
        let r0 = DVector::from_column_slice(self.beta(theta, 0)) - &self.priors.m;
        let pr0 = &self.priors.p * &r0;
        let p0 = spd_cholesky(&self.priors.p, "P").ok()?;
        lp += -0.5 * r0.dot(&pr0) + p0.diagonal().iter().map(|v| v.ln()).sum::<f64>() - 1.5 * crate::linalg::LN_2PI;
        for j in 0..3 {
            grad[j] -= pr0[j];
        }
        for t in 1..=self.horizon() {
            let d: Vec<f64> = (0..3).map(|j| theta[3 * t + j] - theta[3 * (t - 1) + j]).collect();
            let mut gd = [0.0; 3];
            lp += mvn_logpdf_chol_grad(&lb, &d, 1.0, &mut gd, &mut glb);
            for j in 0..3 {
                grad[3 * t + j] += gd[j];
                grad[3 * (t - 1) + j] -= gd[j];
            }
        }
        let e = exps.group(1);
        for t in 1..=self.horizon() {
            let w = e[t - 1];
            if w == 0.0 {
                continue;
            }
            let r = self.residual(theta, t);
            let mut gr = vec![0.0; self.k];
            lp += w * mvn_logpdf_chol_grad(&ly, &r, w, &mut gr, &mut gly);
            // r = y - X β_t.
            for j in 0..3 {
                grad[3 * t + j] -= (0..self.k).map(|i| self.x[(i, j)] * gr[i]).sum::<f64>();
            }
        }
        chain_log_chol(&gly, &ly, &mut grad[sy..sb]);
        chain_log_chol(&glb, &lb, &mut grad[sb..]);
        Some(lp)
    }

    fn initial_point(&self) -> Vec<f64> {
        // Least-squares factors per month, flat start for β_0.
        let xtx = self.x.transpose() * &self.x;
        let solve = xtx.clone().cholesky().map(|c| c.inverse()).unwrap_or_else(|| DMatrix::identity(3, 3));
        let mut theta = vec![0.0; self.layout.dim()];
        for t in 1..=self.horizon() {
            let b = &solve * self.x.transpose() * &self.ys[t - 1];
            theta[3 * t..3 * t + 3].copy_from_slice(b.as_slice());
        }
        let first = theta[3..6].to_vec();
        theta[..3].copy_from_slice(&first);
        let state = DnsState {
            beta: (0..=self.horizon()).map(|t| DVector::from_column_slice(&theta[3 * t..3 * t + 3])).collect(),
            sigma_y: DMatrix::identity(self.k, self.k) * 0.1,
            sigma_beta: DMatrix::identity(3, 3) * 0.1,
        };
        self.encode(&state, &mut theta).expect("identity covariances");
        theta
    }

    fn gibbs_sweep(&self, theta: &mut [f64], exps: &Exponents, rng: &mut dyn RngCore) -> Option<Result<()>> {
        let mut state = self.decode(theta);
        let e = exps.group(1);
        let power = if e.iter().all(|&v| v == 1.0) { None } else { Some(e) };
        let res = dns_gibbs_sweep(&mut state, &self.ys, &self.x, &self.priors, power, rng)
            .and_then(|_| self.encode(&state, theta));
        Some(res)
    }

    /// For `h > 1` the states `β_{t-h+1..t}` are simulated forward from
    /// `β_{t-h}` before evaluating `y_t`.
    fn log_predictive_ahead(&self, theta: &[f64], unit: UnitIndex, h: usize, rng: &mut dyn RngCore) -> Result<f64> {
        let t = unit.within;
        if h == 0 || h > t {
            return Err(Error::InvalidArgument(format!("horizon {h} invalid for time {t}")));
        }
        if h == 1 {
            return Ok(self.unit_log_lik(theta, unit));
        }
        let lb = lower_from_log_chol(&theta[self.sb_off()..], 3);
        let ly = lower_from_log_chol(&theta[self.sy_off()..self.sb_off()], self.k);
        let mut b = DVector::from_column_slice(self.beta(theta, t - h));
        for _ in 0..h {
            let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            b += &lb * z;
        }
        let r = &self.ys[t - 1] - &self.x * b;
        Ok(mvn_logpdf_chol(&ly, r.as_slice()))
    }
}

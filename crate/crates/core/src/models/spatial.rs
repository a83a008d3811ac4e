//! Multivariate normal panel over `S` locations:
//! `y_k ~ MVN(μ + α_{g[k]} 1_S, Σ)` with `μ ~ MVN(0, I)`, `α_g ~ N(0, 1)`,
//! `Σ ~ IW(2S, I)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    chain_log_chol, half_log_det, iw_log_chol_grad, iw_log_chol_logpdf, lower_from_log_chol, lower_inverse,
    mvn_logpdf_chol, tri_len, LN_2PI,
};
use crate::model::{Exponents, Layout, Model};
use crate::scheme::UnitIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M5Data {
    /// Item vectors per department, each of length `S`.
    pub y: Vec<Vec<Vec<f64>>>,
}

impl M5Data {
    /// Rows `(department, y_s)`, in file order within a department.
    pub fn from_rows(rows: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        let g_max = rows.iter().map(|r| r.0).max().ok_or(Error::EmptyInput)?;
        let s = rows[0].1.len();
        let mut y = vec![Vec::new(); g_max];
        for (k, (g, v)) in rows.into_iter().enumerate() {
            if g == 0 {
                return Err(Error::InvalidArgument(format!("row {}: department ids are 1-based", k + 1)));
            }
            if v.len() != s {
                return Err(Error::InvalidArgument(format!("row {}: expected {s} values", k + 1)));
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
pub struct M5Shape {
    pub stores: usize,
    pub departments: usize,
    pub items: usize,
}

impl Default for M5Shape {
    fn default() -> Self {
        Self { stores: 10, departments: 7, items: 30 }
    }
}

#[derive(Debug, Clone)]
pub struct SpatialMvnModel {
    data: M5Data,
    s: usize,
    sizes: Vec<usize>,
    layout: Layout,
    psi: DMatrix<f64>,
}

impl SpatialMvnModel {
    pub fn new(data: M5Data) -> Result<Self> {
        if data.y.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(g) = data.y.iter().position(Vec::is_empty) {
            return Err(Error::EmptyGroup(g + 1));
        }
        let s = data.y[0][0].len();
        if s == 0 || data.y.iter().flatten().any(|v| v.len() != s) {
            return Err(Error::InvalidArgument("every item needs the same number of locations".into()));
        }
        let sizes = data.y.iter().map(Vec::len).collect();
        let mut layout = Layout::default();
        layout.push("mu", s);
        layout.push("alpha", data.y.len());
        layout.push("sigma_chol", tri_len(s));
        Ok(Self { s, sizes, layout, psi: DMatrix::identity(s, s), data })
    }

    pub fn data(&self) -> &M5Data {
        &self.data
    }

    fn chol_off(&self) -> usize {
        self.s + self.sizes.len()
    }

    fn nu(&self) -> f64 {
        2.0 * self.s as f64
    }

    fn residual(&self, theta: &[f64], u: UnitIndex) -> Vec<f64> {
        let a = theta[self.s + u.group - 1];
        self.data.y[u.group - 1][u.within - 1].iter().zip(&theta[..self.s]).map(|(y, m)| y - m - a).collect()
    }

    pub fn generate<R: Rng + ?Sized>(shape: &M5Shape, rng: &mut R) -> Result<(M5Data, Vec<(String, Vec<f64>)>)> {
        if shape.stores == 0 || shape.departments == 0 || shape.items == 0 {
            return Err(Error::InvalidArgument("stores, departments and items must be >= 1".into()));
        }
        let s = shape.stores;
        let mu: Vec<f64> = (0..s).map(|_| rng.sample(StandardNormal)).collect();
        let alpha: Vec<f64> = (0..shape.departments).map(|_| rng.sample(StandardNormal)).collect();
        // Exchangeable correlation across locations.
        let sigma = DMatrix::from_fn(s, s, |i, j| if i == j { 0.6 } else { 0.2 });
        let l = sigma.clone().cholesky().expect("SPD").l();
        let y = alpha
            .iter()
            .map(|&a| {
                (0..shape.items)
                    .map(|_| {
                        let z = DVector::from_fn(s, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let e = &l * z;
                        (0..s).map(|i| mu[i] + a + e[i]).collect()
                    })
                    .collect()
            })
            .collect();
        Ok((M5Data { y }, vec![("mu".into(), mu), ("alpha".into(), alpha), ("sigma".into(), sigma.as_slice().to_vec())]))
    }
}

impl Model for SpatialMvnModel {
    fn name(&self) -> &'static str {
        "m5"
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn group_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let l = lower_from_log_chol(&theta[self.chol_off()..], self.s);
        let normals: f64 = theta[..self.chol_off()].iter().map(|v| -0.5 * v * v - 0.5 * LN_2PI).sum();
        normals + iw_log_chol_logpdf(&l, self.nu(), &self.psi)
    }

    fn unit_log_lik(&self, theta: &[f64], unit: UnitIndex) -> f64 {
        let l = lower_from_log_chol(&theta[self.chol_off()..], self.s);
        mvn_logpdf_chol(&l, &self.residual(theta, unit))
    }

    fn log_target(&self, theta: &[f64], exps: &Exponents) -> f64 {
        let l = lower_from_log_chol(&theta[self.chol_off()..], self.s);
        let mut lp = self.log_prior(theta);
        for (g, &n) in self.sizes.iter().enumerate() {
            let e = exps.group(g + 1);
            for i in 1..=n {
                if e[i - 1] != 0.0 {
                    lp += e[i - 1] * mvn_logpdf_chol(&l, &self.residual(theta, UnitIndex::new(g + 1, i)));
                }
            }
        }
        lp
    }

    fn supports_gradient(&self) -> bool {
        true
    }

    fn log_target_grad(&self, theta: &[f64], exps: &Exponents, grad: &mut [f64]) -> Option<f64> {
        let (s, c) = (self.s, self.chol_off());
        let l = lower_from_log_chol(&theta[c..], s);
        let mut gl = DMatrix::zeros(s, s);
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut lp = iw_log_chol_grad(&l, self.nu(), &self.psi, &mut gl);
        for j in 0..c {
            lp += -0.5 * theta[j] * theta[j] - 0.5 * LN_2PI;
            grad[j] = -theta[j];
        }
        let Some(linv) = lower_inverse(&l) else {
            return Some(f64::NEG_INFINITY);
        };
        // Items share Σ, so the likelihood needs only the weighted scatter
        // T = Σ w r rᵀ, per-group residual sums and the total weight.
        let mut scatter = DMatrix::zeros(s, s);
        let mut sums = DMatrix::zeros(s, self.sizes.len());
        let mut total = 0.0;
        let mut r = vec![0.0; s];
        for (g, items) in self.data.y.iter().enumerate() {
            let e = exps.group(g + 1);
            let a = theta[s + g];
            for (y, &w) in items.iter().zip(e) {
                if w == 0.0 {
                    continue;
                }
                total += w;
                for j in 0..s {
                    r[j] = y[j] - theta[j] - a;
                    sums[(j, g)] += w * r[j];
                }
                for j in 0..s {
                    let wr = w * r[j];
                    for k in 0..=j {
                        scatter[(j, k)] += wr * r[k];
                    }
                }
            }
        }
        if total > 0.0 {
            scatter.fill_upper_triangle_with_lower_triangle();
            let prec = linv.transpose() * &linv;
            let ps = &prec * &scatter;
            lp += -0.5 * ps.trace() - total * (half_log_det(&l) + 0.5 * s as f64 * LN_2PI);
            // ∂/∂r_i = -w_i Σ⁻¹ r_i, and r = y - μ - α_g 1.
            let pr = &prec * &sums;
            for g in 0..self.sizes.len() {
                for j in 0..s {
                    grad[j] += pr[(j, g)];
                    grad[s + g] += pr[(j, g)];
                }
            }
            // ∂/∂L of -½ tr(Σ⁻¹ T) is Σ⁻¹ T L⁻ᵀ.
            gl += ps * linv.transpose();
            for j in 0..s {
                gl[(j, j)] -= total / l[(j, j)];
            }
        }
        chain_log_chol(&gl, &l, &mut grad[c..]);
        Some(lp)
    }

    fn initial_point(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.layout.dim()];
        let n: usize = self.sizes.iter().sum();
        for j in 0..self.s {
            theta[j] = self.data.y.iter().flatten().map(|v| v[j]).sum::<f64>() / n as f64;
        }
        theta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_density_at_zero() {
        let s = 4;
        let m = SpatialMvnModel::new(M5Data { y: vec![vec![vec![0.0; s]]] }).unwrap();
        let theta = vec![0.0; m.dim()];
        assert!((m.unit_log_lik(&theta, UnitIndex::new(1, 1)) + s as f64 / 2.0 * LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn generator_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, _) = SpatialMvnModel::generate(&M5Shape { stores: 10, departments: 7, items: 30 }, &mut rng).unwrap();
        assert_eq!(d.y.len(), 7);
        assert!(d.y.iter().all(|g| g.len() == 30 && g.iter().all(|v| v.len() == 10)));
    }

    #[test]
    fn rows_validate() {
        assert!(M5Data::from_rows(vec![(1, vec![0.0, 1.0]), (2, vec![0.0])]).is_err());
        assert!(M5Data::from_rows(vec![(2, vec![0.0])]).is_err());
    }
}

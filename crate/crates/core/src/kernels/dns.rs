//! Gibbs sampler for the random-walk dynamic linear model
//! `y_t = X β_t + ε_t`, `β_t = β_{t-1} + η_t`, with inverse-Wishart
//! covariances, under per-time likelihood exponents `e_t ∈ [0, 1]`.
//!
//! `e_t` scales the measurement precision at time `t`. With `power = None`
//! the unmodified sampler runs and no multiplications by `e_t` occur.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::iw::iw_sample;
use crate::linalg::{sample_mvn_precision, spd_cholesky};

#[derive(Debug, Clone, PartialEq)]
pub struct DnsPriors {
    /// Prior mean of `β_0`.
    pub m: DVector<f64>,
    /// Prior precision of `β_0`.
    pub p: DMatrix<f64>,
    pub nu_y: f64,
    pub s_y: DMatrix<f64>,
    pub nu_beta: f64,
    pub s_beta: DMatrix<f64>,
}

impl DnsPriors {
    /// `β_0 ~ N(0, 10 I)`, `Σ_y ~ IW(2K, I_K)`, `Σ_β ~ IW(2p, I_p)`.
    pub fn standard(k: usize, p: usize) -> Self {
        Self {
            m: DVector::zeros(p),
            p: DMatrix::identity(p, p) * 0.1,
            nu_y: 2.0 * k as f64,
            s_y: DMatrix::identity(k, k),
            nu_beta: 2.0 * p as f64,
            s_beta: DMatrix::identity(p, p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnsState {
    /// `β_0..β_T`.
    pub beta: Vec<DVector<f64>>,
    pub sigma_y: DMatrix<f64>,
    pub sigma_beta: DMatrix<f64>,
}

fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let l = spd_cholesky(m, what)?;
    let n = l.nrows();
    let linv = l.solve_lower_triangular(&DMatrix::identity(n, n)).ok_or_else(|| Error::NotPositiveDefinite(what.into()))?;
    Ok(linv.transpose() * linv)
}

fn std_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `(m̂, P̂)` of `β_0 | β_1, Σ_β`: `P̂ = P + Σ_β⁻¹`, `m̂ = P̂⁻¹ (P m + Σ_β⁻¹ β_1)`.
pub fn beta0_conditional(
    priors: &DnsPriors,
    sigma_beta: &DMatrix<f64>,
    beta1: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sb_inv = inverse_spd(sigma_beta, "Sigma_beta")?;
    let p_hat = &priors.p + &sb_inv;
    let rhs = &priors.p * &priors.m + &sb_inv * beta1;
    let m_hat = inverse_spd(&p_hat, "P_hat")? * rhs;
    Ok((m_hat, p_hat))
}

/// `(ν, S)` of `Σ_β | β_{0:T}`.
pub fn sigma_beta_conditional(priors: &DnsPriors, beta: &[DVector<f64>]) -> (f64, DMatrix<f64>) {
    let mut s = priors.s_beta.clone();
    for w in beta.windows(2) {
        let d = &w[1] - &w[0];
        s += &d * d.transpose();
    }
    (priors.nu_beta + (beta.len() - 1) as f64, s)
}

/// `(ν̂, Ŝ)` of `Σ_y | β, y` with `ν̂ = ν_0 + Σ e_t` and `Ŝ = S_0 + Σ e_t r_t r_tᵀ`.
pub fn sigma_y_conditional(
    priors: &DnsPriors,
    ys: &[DVector<f64>],
    x: &DMatrix<f64>,
    beta: &[DVector<f64>],
    power: Option<&[f64]>,
) -> (f64, DMatrix<f64>) {
    let mut s = priors.s_y.clone();
    let mut nu = priors.nu_y;
    for (t, y) in ys.iter().enumerate() {
        let r = y - x * &beta[t + 1];
        match power {
            None => {
                s += &r * r.transpose();
                nu += 1.0;
            }
            Some(e) if e[t] != 0.0 => {
                s += (&r * r.transpose()) * e[t];
                nu += e[t];
            }
            Some(_) => {}
        }
    }
    (nu, s)
}

/// Forward-filters `β_{1:T}` from `β_1 ~ N(a1, r1)` and samples the path
/// backwards. Filtering runs on precisions so `e_t → 0` is stable.
pub fn ffbs_from<R: Rng + ?Sized>(
    ys: &[DVector<f64>],
    x: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
    sigma_beta: &DMatrix<f64>,
    a1: &DVector<f64>,
    r1: &DMatrix<f64>,
    power: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let t_len = ys.len();
    let p = a1.len();
    let sy_inv = inverse_spd(sigma_y, "Sigma_y")?;
    let xt_sinv = x.transpose() * &sy_inv;
    let h = &xt_sinv * x;
    let sb_inv = inverse_spd(sigma_beta, "Sigma_beta")?;
    // Filtered precision and mean of β_t given y_{1:t}.
    let mut q_f: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);
    let mut m_f: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (a, r) = if t == 0 {
            (a1.clone(), r1.clone())
        } else {
            (m_f[t - 1].clone(), inverse_spd(&q_f[t - 1], "filtered precision")? + sigma_beta)
        };
        let r_inv = inverse_spd(&r, "predictive covariance")?;
        let mut q = r_inv.clone();
        let mut b = &r_inv * &a;
        match power {
            None => {
                q += &h;
                b += &xt_sinv * &ys[t];
            }
            Some(e) if e[t] != 0.0 => {
                q += &h * e[t];
                b += (&xt_sinv * &ys[t]) * e[t];
            }
            Some(_) => {}
        }
        let mean = inverse_spd(&q, "filtered precision")? * b;
        q_f.push(q);
        m_f.push(mean);
    }
    let mut out = vec![DVector::zeros(p); t_len];
    out[t_len - 1] = sample_mvn_precision(&q_f[t_len - 1], &m_f[t_len - 1], &std_normals(p, rng))?;
    for t in (0..t_len - 1).rev() {
        let q = &q_f[t] + &sb_inv;
        let b = &q_f[t] * &m_f[t] + &sb_inv * &out[t + 1];
        let mean = inverse_spd(&q, "smoothing precision")? * b;
        out[t] = sample_mvn_precision(&q, &mean, &std_normals(p, rng))?;
    }
    Ok(out)
}

/// Joint draw of `β_{0:T}` given the covariances, with `β_0 ~ N(m, P⁻¹)`.
pub fn ffbs<R: Rng + ?Sized>(
    ys: &[DVector<f64>],
    x: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
    sigma_beta: &DMatrix<f64>,
    priors: &DnsPriors,
    power: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let r1 = inverse_spd(&priors.p, "P")? + sigma_beta;
    let path = ffbs_from(ys, x, sigma_y, sigma_beta, &priors.m, &r1, power, rng)?;
    let (m_hat, p_hat) = beta0_conditional(priors, sigma_beta, &path[0])?;
    let b0 = sample_mvn_precision(&p_hat, &m_hat, &std_normals(priors.m.len(), rng))?;
    let mut out = Vec::with_capacity(path.len() + 1);
    out.push(b0);
    out.extend(path);
    Ok(out)
}

/// One sweep: `β_0`, then `Σ_β`, then `β_{1:T}` by FFBS, then `Σ_y`.
pub fn dns_gibbs_sweep<R: Rng + ?Sized>(
    state: &mut DnsState,
    ys: &[DVector<f64>],
    x: &DMatrix<f64>,
    priors: &DnsPriors,
    power: Option<&[f64]>,
    rng: &mut R,
) -> Result<()> {
    if let Some(e) = power {
        if e.len() != ys.len() || e.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("power exponents must lie in [0, 1], one per time".into()));
        }
    }
    let p = priors.m.len();
    let (m_hat, p_hat) = beta0_conditional(priors, &state.sigma_beta, &state.beta[1])?;
    state.beta[0] = sample_mvn_precision(&p_hat, &m_hat, &std_normals(p, rng))?;

    let (nu_b, s_b) = sigma_beta_conditional(priors, &state.beta);
    state.sigma_beta = iw_sample(nu_b, &s_b, rng)?;

    let path = ffbs_from(ys, x, &state.sigma_y, &state.sigma_beta, &state.beta[0], &state.sigma_beta, power, rng)?;
    for (t, b) in path.into_iter().enumerate() {
        state.beta[t + 1] = b;
    }

    let (nu_y, s_y) = sigma_y_conditional(priors, ys, x, &state.beta, power);
    state.sigma_y = iw_sample(nu_y, &s_y, rng)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(t_len: usize, k: usize, seed: u64) -> (Vec<DVector<f64>>, DMatrix<f64>, DnsState, DnsPriors) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(k, 3, |i, j| 1.0 / (1.0 + (i * j) as f64));
        let ys = (0..t_len).map(|_| DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let beta = (0..=t_len).map(|t| DVector::from_element(3, 0.1 * t as f64)).collect();
        let state = DnsState {
            beta,
            sigma_y: DMatrix::identity(k, k) * 0.5,
            sigma_beta: DMatrix::from_row_slice(3, 3, &[0.3, 0.05, 0.0, 0.05, 0.2, 0.01, 0.0, 0.01, 0.1]),
        };
        (ys, x, state, DnsPriors::standard(k, 3))
    }

    #[test]
    fn unit_power_is_bit_identical_to_unmodified() {
        let (ys, x, s0, pr) = toy(6, 3, 1);
        let ones = vec![1.0; 6];
        let mut a = s0.clone();
        let mut b = s0;
        let mut ra = ChaCha8Rng::seed_from_u64(77);
        let mut rb = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            dns_gibbs_sweep(&mut a, &ys, &x, &pr, None, &mut ra).unwrap();
            dns_gibbs_sweep(&mut b, &ys, &x, &pr, Some(&ones), &mut rb).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn zero_power_drops_last_observation() {
        let (ys, x, s0, pr) = toy(5, 2, 2);
        let mut e = vec![1.0; 5];
        e[4] = 0.0;
        let (nu, s) = sigma_y_conditional(&pr, &ys, &x, &s0.beta, Some(&e));
        let (nu_t1, s_t1) = sigma_y_conditional(&pr, &ys[..4], &x, &s0.beta[..5], None);
        assert_eq!(nu, pr.nu_y + 5.0 - 1.0);
        assert!((nu - nu_t1).abs() < 1e-10);
        assert!((&s - &s_t1).abs().max() < 1e-10);
        let rho = 0.3;
        e[4] = rho;
        let (nu, s) = sigma_y_conditional(&pr, &ys, &x, &s0.beta, Some(&e));
        assert!((nu - (pr.nu_y + 5.0 - (1.0 - rho))).abs() < 1e-12);
        let r = &ys[4] - &x * &s0.beta[5];
        assert!((s - (s_t1 + (&r * r.transpose()) * rho)).abs().max() < 1e-12);
    }

    #[test]
    fn beta0_conditional_matches_gaussian_algebra() {
        let (_, _, s0, pr) = toy(3, 2, 3);
        let (m_hat, p_hat) = beta0_conditional(&pr, &s0.sigma_beta, &s0.beta[1]).unwrap();
        // Joint of (β_0, β_1) is Gaussian: condition β_0 on β_1 by covariance blocks.
        let c00 = pr.p.clone().try_inverse().unwrap();
        let c11 = &c00 + &s0.sigma_beta;
        let gain = &c00 * c11.clone().try_inverse().unwrap();
        let mean = &pr.m + &gain * (&s0.beta[1] - &pr.m);
        let cov = &c00 - &gain * &c00;
        assert!((m_hat - mean).abs().max() < 1e-10);
        assert!((p_hat.try_inverse().unwrap() - cov).abs().max() < 1e-10);
        let (nu, s) = sigma_beta_conditional(&pr, &s0.beta);
        assert_eq!(nu, pr.nu_beta + 3.0);
        let mut oracle = pr.s_beta.clone();
        for t in 1..=3 {
            let d = &s0.beta[t] - &s0.beta[t - 1];
            oracle += &d * d.transpose();
        }
        assert!((s - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn scalar_single_step_law() {
        // T = 1, all variances 1, X = 1, m = 0, P = 1: β_1 | y_1 ~ N(2 y_1 / 3, 2/3).
        let y1 = 1.2;
        let ys = vec![DVector::from_element(1, y1)];
        let x = DMatrix::identity(1, 1);
        let one = DMatrix::identity(1, 1);
        let pr = DnsPriors {
            m: DVector::zeros(1),
            p: one.clone(),
            nu_y: 3.0,
            s_y: one.clone(),
            nu_beta: 3.0,
            s_beta: one.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| ffbs(&ys, &x, &one, &one, &pr, None, &mut rng).unwrap()[1][0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        let se = (2.0f64 / 3.0 / n as f64).sqrt();
        assert!((mean - 2.0 * y1 / 3.0).abs() < 3.0 * se, "{mean}");
        assert!((var - 2.0 / 3.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn vanishing_power_propagates_prior() {
        // e_T → 0: β_T | β_{T-1} ~ N(β_{T-1}, Σ_β), so β_T − β_{T−1} has mean 0 and covariance Σ_β.
        let (ys, x, s0, pr) = toy(3, 2, 4);
        let e = [1.0, 1.0, 1e-8];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 40_000;
        let mut sum = DVector::zeros(3);
        let mut sum2 = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let b = ffbs(&ys, &x, &s0.sigma_y, &s0.sigma_beta, &pr, Some(&e), &mut rng).unwrap();
            let d = &b[3] - &b[2];
            sum2 += &d * d.transpose();
            sum += d;
        }
        let mean = &sum / n as f64;
        let cov = &sum2 / n as f64 - &mean * mean.transpose();
        for i in 0..3 {
            let se = (s0.sigma_beta[(i, i)] / n as f64).sqrt();
            assert!(mean[i].abs() < 3.0 * se);
            for j in 0..3 {
                let se = ((s0.sigma_beta[(i, i)] * s0.sigma_beta[(j, j)] + s0.sigma_beta[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((cov[(i, j)] - s0.sigma_beta[(i, j)]).abs() < 3.0 * se, "({i},{j})");
            }
        }
    }

    #[test]
    fn invalid_power_rejected() {
        let (ys, x, mut s0, pr) = toy(3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(dns_gibbs_sweep(&mut s0, &ys, &x, &pr, Some(&[1.0, 2.0, 1.0]), &mut rng).is_err());
    }
}

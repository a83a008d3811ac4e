//! Log-domain weight arithmetic, effective sample size, generalized Pareto
//! tail fitting and Pareto-smoothed importance sampling.
//!
//! Everything stays in log space until [`normalize`]; reciprocal-likelihood
//! weights over whole groups underflow `f64` otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> Result<T> {
    let max = xs.iter().copied().fold(None, |m: Option<T>, x| match m {
        Some(m) if m >= x => Some(m),
        _ => Some(x),
    });
    let max = max.ok_or(Error::EmptyInput)?;
    if max == T::neg_infinity() {
        return Ok(max);
    }
    if max == T::infinity() {
        return Ok(max);
    }
    let s: T = xs.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

/// Unnormalized log-weights together with their self-normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector<T> {
    pub log_w: Vec<T>,
    pub normalized: Vec<T>,
}

impl<T: Real> WeightVector<T> {
    pub fn uniform(r: usize) -> Self {
        let w = T::one() / T::from_usize_lossy(r);
        Self { log_w: vec![T::zero(); r], normalized: vec![w; r] }
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    pub fn ess(&self) -> T {
        ess(&self.normalized)
    }
}

/// Self-normalize log-weights: `W_r = exp(lw_r - logsumexp(lw))`.
pub fn normalize<T: Real>(log_w: &[T]) -> Result<WeightVector<T>> {
    let lse = log_sum_exp(log_w)?;
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let normalized = log_w.iter().map(|&x| (x - lse).exp()).collect();
    Ok(WeightVector { log_w: log_w.to_vec(), normalized })
}

/// Effective sample size `1 / Σ W_r²` of normalized weights.
pub fn ess<T: Real>(normalized: &[T]) -> T {
    let s: T = normalized.iter().map(|&w| w * w).sum();
    let r = T::from_usize_lossy(normalized.len());
    (T::one() / s).min(r).max(T::one())
}

/// ESS of the weights `exp(lw)` without materializing a [`WeightVector`].
pub fn ess_of_log_weights<T: Real>(log_w: &[T]) -> T {
    let max = log_w.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return T::one();
    }
    let (mut s1, mut s2) = (T::zero(), T::zero());
    for &x in log_w {
        let w = (x - max).exp();
        s1 = s1 + w;
        s2 = s2 + w * w;
    }
    let r = T::from_usize_lossy(log_w.len());
    (s1 * s1 / s2).min(r).max(T::one())
}

/// `log Σ_r W_r exp(log_f_r)`.
pub fn weighted_log_estimand<T: Real>(w: &WeightVector<T>, log_f: &[T]) -> Result<T> {
    if w.len() != log_f.len() {
        return Err(Error::InvalidArgument(format!(
            "weight length {} does not match estimand length {}",
            w.len(),
            log_f.len()
        )));
    }
    let terms: Vec<T> = w.normalized.iter().zip(log_f).map(|(&wr, &f)| wr.ln() + f).collect();
    log_sum_exp(&terms)
}

/// Tail length used for Pareto smoothing: `ceil(min(0.2 R, 3 sqrt R))`.
pub fn tail_size(r: usize) -> usize {
    let rf = r as f64;
    (0.2 * rf).min(3.0 * rf.sqrt()).ceil() as usize
}

/// Generalized Pareto fit of positive exceedances (ascending order).
///
/// Profile-likelihood point estimate over a grid of proposals for
/// `theta = -k / sigma`, the grid weighted by the profile likelihood. No
/// shrinkage of `k` is applied.
pub fn gpd_fit<T: Real>(tail: &[T]) -> Result<(T, T)> {
    let n = tail.len();
    if n < 5 {
        return Err(Error::TailTooSmall(n));
    }
    let x_max = tail[n - 1];
    let x_q = tail[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    if !(x_max > T::zero()) || !(x_q > T::zero()) {
        return Err(Error::DegenerateWeights);
    }
    let grid = 30 + (n as f64).sqrt().floor() as usize;
    let prior = T::lit(3.0);
    let thetas: Vec<T> = (1..=grid)
        .map(|j| {
            let frac = (T::from_usize_lossy(grid) / (T::from_usize_lossy(j) - T::lit(0.5))).sqrt();
            T::one() / x_max + (T::one() - frac) / prior / x_q
        })
        .collect();
    let nf = T::from_usize_lossy(n);
    let profile: Vec<T> = thetas
        .iter()
        .map(|&theta| {
            let a = -theta;
            let k: T = tail.iter().map(|&x| (a * x).ln_1p()).sum::<T>() / nf;
            nf * ((a / k).ln() - k - T::one())
        })
        .collect();
    let lse = log_sum_exp(&profile)?;
    let theta_hat: T = thetas
        .iter()
        .zip(&profile)
        .map(|(&t, &l)| {
            let w = (l - lse).exp();
            if w.is_finite() { t * w } else { T::zero() }
        })
        .sum();
    let k: T = tail.iter().map(|&x| (-theta_hat * x).ln_1p()).sum::<T>() / nf;
    let sigma = -k / theta_hat;
    if !k.is_finite() || !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok((k, sigma))
}

/// Quantile function of GPD(k, sigma) at probability `p`.
pub fn gpd_quantile<T: Real>(p: T, k: T, sigma: T) -> T {
    if k.abs() < T::lit(1e-12) {
        -sigma * (-p).ln_1p()
    } else {
        sigma / k * ((-k * (-p).ln_1p()).exp() - T::one())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoDiagnostic<T> {
    /// Shape estimate. `-inf` when the tail is flat (nothing to smooth);
    /// `+inf` when the tail could not be fitted.
    pub k_hat: T,
    pub sigma_hat: T,
    pub tail_size: usize,
    pub smoothed: WeightVector<T>,
}

/// Pareto-smoothed importance weights.
///
/// The `M` largest raw weights are replaced by the expected order statistics
/// of a GPD fitted to their exceedances over the `(M+1)`-th largest weight,
/// capped at the raw maximum, then everything is renormalized.
pub fn pareto_smooth<T: Real>(log_w: &[T]) -> Result<ParetoDiagnostic<T>> {
    let r = log_w.len();
    let m = tail_size(r);
    if m < 5 || m >= r {
        return Err(Error::TailTooSmall(m));
    }
    let raw = normalize(log_w)?;
    let max = log_w.iter().copied().fold(T::neg_infinity(), T::max);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| log_w[a].partial_cmp(&log_w[b]).unwrap_or(std::cmp::Ordering::Equal));
    let tail_idx = &order[r - m..];
    let cutoff = log_w[order[r - m - 1]] - max;
    let exp_cut = cutoff.exp();
    let exceed: Vec<T> = tail_idx.iter().map(|&i| (log_w[i] - max).exp() - exp_cut).collect();

    if exceed.iter().all(|&x| !(x > T::zero())) {
        return Ok(ParetoDiagnostic { k_hat: T::neg_infinity(), sigma_hat: T::zero(), tail_size: m, smoothed: raw });
    }
    let (k_hat, sigma_hat) = match gpd_fit(&exceed) {
        Ok(fit) => fit,
        Err(_) => {
            return Ok(ParetoDiagnostic { k_hat: T::infinity(), sigma_hat: T::zero(), tail_size: m, smoothed: raw });
        }
    };
    let mut smoothed_lw = log_w.to_vec();
    let mf = T::from_usize_lossy(m);
    for (z, &i) in tail_idx.iter().enumerate() {
        let p = (T::from_usize_lossy(z + 1) - T::lit(0.5)) / mf;
        let q = exp_cut + gpd_quantile(p, k_hat, sigma_hat);
        let lw = q.ln().min(T::zero()) + max;
        smoothed_lw[i] = lw;
    }
    let smoothed = normalize(&smoothed_lw)?;
    Ok(ParetoDiagnostic { k_hat, sigma_hat, tail_size: m, smoothed })
}

/// Systematic resampling: a single uniform offset `u ∈ [0,1)` drives all `R`
/// strata `(u + j) / R`. Returns ancestor indices.
pub fn resample_systematic<T: Real>(normalized: &[T], u: T) -> Vec<usize> {
    let r = normalized.len();
    let rf = T::from_usize_lossy(r);
    let mut out = Vec::with_capacity(r);
    let mut cum = T::zero();
    let mut i = 0usize;
    for j in 0..r {
        let point = (u + T::from_usize_lossy(j)) / rf;
        while i < r - 1 && cum + normalized[i] <= point {
            cum = cum + normalized[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn lse_examples() {
        assert!(close(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), 1e-15));
        assert!(close(log_sum_exp(&[-1000.0, -1000.0]).unwrap(), -1000.0 + 2f64.ln(), 1e-12));
        assert_eq!(log_sum_exp(&[5.0]).unwrap(), 5.0);
        assert_eq!(log_sum_exp::<f64>(&[]), Err(Error::EmptyInput));
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn lse_f32() {
        assert!((log_sum_exp(&[0.0f32, 0.0]).unwrap() - 2f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn normalize_examples() {
        let w = normalize(&[0.0, 0.0, 0.0]).unwrap();
        for x in w.normalized {
            assert!(close(x, 1.0 / 3.0, 1e-15));
        }
        let w = normalize(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(w.normalized[0], 2.0 / 3.0, 1e-15));
        for c in [-700.0, 0.0, 300.0] {
            let w = normalize(&[c, c + 3f64.ln()]).unwrap();
            assert!(close(w.normalized[0], 0.25, 1e-12));
            assert!(close(w.normalized[1], 0.75, 1e-12));
        }
        assert_eq!(normalize(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), Err(Error::DegenerateWeights));
    }

    #[test]
    fn ess_examples() {
        assert_eq!(ess(&[0.25; 4]), 4.0);
        assert_eq!(ess(&[1.0, 0.0, 0.0, 0.0]), 1.0);
        assert_eq!(ess(&[0.5, 0.5, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn estimand_examples() {
        let w = WeightVector::<f64>::uniform(5);
        assert!(close(weighted_log_estimand(&w, &[-1.3; 5]).unwrap(), -1.3, 1e-14));
        let w = normalize(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!(close(weighted_log_estimand(&w, &[-3.7, 1.0, 2.0]).unwrap(), -3.7, 1e-15));
        let w = normalize(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(weighted_log_estimand(&w, &[0.0, 4f64.ln()]).unwrap(), 2f64.ln(), 1e-14));
        assert!(weighted_log_estimand(&w, &[0.0]).is_err());
    }

    #[test]
    fn tail_sizes() {
        assert_eq!(tail_size(25), 5);
        assert_eq!(tail_size(1000), 95);
        assert_eq!(tail_size(100), 20);
    }

    fn gpd_draws(n: usize, k: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..n).map(|_| gpd_quantile(rng.random::<f64>(), k, sigma)).collect();
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        x
    }

    #[test]
    fn gpd_recovers_shape() {
        for (k, lo, hi) in [(0.0, -0.1, 0.1), (0.5, 0.4, 0.6), (-0.2, -0.3, -0.1)] {
            let x = gpd_draws(2000, k, 1.0, 7);
            let (kh, sh) = gpd_fit(&x).unwrap();
            assert!(kh >= lo && kh <= hi, "k={k}: k_hat={kh}");
            assert!(sh > 0.0);
        }
    }

    #[test]
    fn gpd_exponential_oracle() {
        // exponential(1) exceedances, simulated by inverse CDF independently of gpd_quantile
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x: Vec<f64> = (0..2000).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        x.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (kh, _) = gpd_fit(&x).unwrap();
        assert!(kh.abs() <= 0.1, "k_hat={kh}");
    }

    #[test]
    fn gpd_tail_too_small() {
        assert_eq!(gpd_fit(&[1.0, 2.0, 3.0, 4.0]), Err(Error::TailTooSmall(4)));
    }

    #[test]
    fn gpd_scale_equivariant() {
        let x = gpd_draws(500, 0.3, 2.0, 3);
        let (k1, s1) = gpd_fit(&x).unwrap();
        let cx: Vec<f64> = x.iter().map(|v| v * 37.5).collect();
        let (k2, s2) = gpd_fit(&cx).unwrap();
        assert!(close(k1, k2, 1e-9));
        assert!(close(s2 / s1, 37.5, 1e-9));
    }

    #[test]
    fn psis_flat_weights() {
        let d = pareto_smooth(&[0.3; 100]).unwrap();
        for w in &d.smoothed.normalized {
            assert!(close(*w, 0.01, 1e-15));
        }
        assert_eq!(d.k_hat, f64::NEG_INFINITY);
    }

    #[test]
    fn psis_pulls_down_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lw: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() * 0.1).collect();
        lw[17] = 50.0;
        let raw = normalize(&lw).unwrap();
        let d = pareto_smooth(&lw).unwrap();
        let raw_max = raw.normalized.iter().copied().fold(0.0, f64::max);
        let sm_max = d.smoothed.normalized.iter().copied().fold(0.0, f64::max);
        assert!(sm_max < raw_max);
    }

    #[test]
    fn psis_recovers_tail_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lw: Vec<f64> = (0..20000).map(|_| (1.0 + gpd_quantile(rng.random::<f64>(), 0.3, 1.0)).ln()).collect();
        let d = pareto_smooth(&lw).unwrap();
        assert!(d.k_hat >= 0.2 && d.k_hat <= 0.4, "k_hat={}", d.k_hat);
    }

    #[test]
    fn psis_needs_25() {
        assert!(pareto_smooth(&[0.0; 20]).is_err());
    }

    #[test]
    fn resample_examples() {
        for u in [0.0, 0.3, 0.999] {
            assert_eq!(resample_systematic(&[0.25; 4], u), vec![0, 1, 2, 3]);
            assert_eq!(resample_systematic(&[0.0, 0.0, 1.0, 0.0], u), vec![2; 4]);
            let a = resample_systematic(&[0.75, 0.25], u);
            assert_eq!(a.len(), 2);
        }
        for u in [0.0, 0.1, 0.5, 0.9, 0.9999] {
            let a = resample_systematic(&[0.75, 0.25, 0.0, 0.0], u);
            assert_eq!(a.iter().filter(|&&i| i == 0).count(), 3);
            assert_eq!(a.iter().filter(|&&i| i == 1).count(), 1);
        }
    }

    proptest! {
        #[test]
        fn ess_bounds_and_invariance(lw in proptest::collection::vec(-30.0f64..30.0, 2..200), c in -500.0f64..500.0) {
            let w = normalize(&lw).unwrap();
            let e = w.ess();
            let r = lw.len() as f64;
            prop_assert!(e >= 1.0 && e <= r + 1e-9);
            let sum: f64 = w.normalized.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = lw.iter().map(|x| x + c).collect();
            let w2 = normalize(&shifted).unwrap();
            prop_assert!((w2.ess() - e).abs() < 1e-9 * r);
            prop_assert!((ess_of_log_weights(&lw) - e).abs() < 1e-9 * r);
            let mut rev = lw.clone();
            rev.reverse();
            prop_assert!((normalize(&rev).unwrap().ess() - e).abs() < 1e-9 * r);
        }

        #[test]
        fn uniform_estimand_is_mean(lf in proptest::collection::vec(-50.0f64..50.0, 2..100)) {
            let w = WeightVector::<f64>::uniform(lf.len());
            let a = weighted_log_estimand(&w, &lf).unwrap();
            let b = log_sum_exp(&lf).unwrap() - (lf.len() as f64).ln();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn psis_mass_and_cap(lw in proptest::collection::vec(-20.0f64..20.0, 25..400)) {
            let d = pareto_smooth(&lw).unwrap();
            let raw = normalize(&lw).unwrap();
            let sum: f64 = d.smoothed.normalized.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let raw_max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(d.smoothed.log_w.iter().all(|&x| x <= raw_max + 1e-12));
            let _ = raw;
        }

        #[test]
        fn resample_counts(lw in proptest::collection::vec(-5.0f64..5.0, 2..60), u in 0.0f64..1.0) {
            let w = normalize(&lw).unwrap();
            let a = resample_systematic(&w.normalized, u);
            let r = lw.len() as f64;
            for (i, wi) in w.normalized.iter().enumerate() {
                let c = a.iter().filter(|&&x| x == i).count() as f64;
                prop_assert!(c >= (r * wi - 1e-9).floor() && c <= (r * wi + 1e-9).ceil());
            }
        }
    }
}

use rand::Rng;
use rand_distr::StandardNormal;

/// One Gaussian random-walk Metropolis step. `lp` is the log target at
/// `theta` on entry and is updated on acceptance. Non-finite proposals are
/// rejected. Returns whether the proposal was accepted.
pub fn rwm_step<F, R>(theta: &mut [f64], lp: &mut f64, log_target: F, scales: &[f64], rng: &mut R) -> bool
where
    F: FnOnce(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let proposal: Vec<f64> = theta
        .iter()
        .zip(scales)
        .map(|(&x, &s)| x + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp_new = log_target(&proposal);
    let u: f64 = rng.random();
    if lp_new.is_finite() && u.ln() < lp_new - *lp {
        theta.copy_from_slice(&proposal);
        *lp = lp_new;
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = |x: &[f64]| -0.5 * x[0] * x[0];
        let mut x = [0.0];
        let mut lp = f(&x);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            rwm_step(&mut x, &mut lp, f, &[2.4], &mut rng);
            s += x[0];
            s2 += x[0] * x[0];
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() <= 0.03, "mean {mean}");
        assert!((0.94..=1.06).contains(&var), "var {var}");
    }

    #[test]
    fn tiny_scale_barely_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = |x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let mut x = [0.3, -1.2];
        let start = x;
        let mut lp = f(&x);
        let mut acc = 0;
        for _ in 0..1000 {
            acc += rwm_step(&mut x, &mut lp, f, &[1e-8, 1e-8], &mut rng) as usize;
        }
        assert!(acc >= 990);
        assert!(x.iter().zip(&start).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn symmetric_modes_balanced() {
        // Equal-weight mixture of N(-1.5, 0.6²) and N(1.5, 0.6²): occupancy of x > 0 is 1/2 by symmetry.
        let f = |x: &[f64]| {
            let a = -0.5 * ((x[0] + 1.5) / 0.6).powi(2);
            let b = -0.5 * ((x[0] - 1.5) / 0.6).powi(2);
            a.max(b) + (1.0 + (-(a - b).abs()).exp()).ln()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = [0.0];
        let mut lp = f(&x);
        let n = 400_000;
        let mut pos = 0usize;
        for _ in 0..n {
            rwm_step(&mut x, &mut lp, f, &[2.0], &mut rng);
            pos += (x[0] > 0.0) as usize;
        }
        let frac = pos as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn rejects_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = [0.0];
        let mut lp = 0.0;
        for _ in 0..100 {
            assert!(!rwm_step(&mut x, &mut lp, |_| f64::NAN, &[1.0], &mut rng));
        }
        assert_eq!(x[0], 0.0);
    }
}

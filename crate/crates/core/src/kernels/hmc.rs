use rand::Rng;
use rand_distr::StandardNormal;

/// Energy error above which a trajectory counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcOutcome {
    pub accepted: bool,
    pub divergent: bool,
    /// `min(1, exp(-ΔH))`, zero for non-finite energies.
    pub accept_prob: f64,
    /// `H(end) - H(start)`.
    pub energy_error: f64,
}

/// One fixed-length HMC transition with a diagonal metric. `inv_mass` holds
/// the inverse mass (target marginal variances). `f` writes the gradient of
/// the log target into its second argument and returns the log target.
pub fn hmc_step<F, R>(
    theta: &mut [f64],
    mut f: F,
    inv_mass: &[f64],
    eps: f64,
    n_leap: usize,
    rng: &mut R,
) -> HmcOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    R: Rng + ?Sized,
{
    let d = theta.len();
    let mut grad = vec![0.0; d];
    let lp0 = f(theta, &mut grad);
    let mut p: Vec<f64> = inv_mass.iter().map(|&m| rng.sample::<f64, _>(StandardNormal) / m.sqrt()).collect();
    let kinetic = |p: &[f64]| 0.5 * p.iter().zip(inv_mass).map(|(a, m)| a * a * m).sum::<f64>();
    let h0 = -lp0 + kinetic(&p);
    let mut q = theta.to_vec();
    let mut lp = lp0;
    for _ in 0..n_leap {
        for i in 0..d {
            p[i] += 0.5 * eps * grad[i];
            q[i] += eps * inv_mass[i] * p[i];
        }
        lp = f(&q, &mut grad);
        if !lp.is_finite() {
            break;
        }
        for i in 0..d {
            p[i] += 0.5 * eps * grad[i];
        }
    }
    let energy_error = -lp + kinetic(&p) - h0;
    let u: f64 = rng.random();
    if !energy_error.is_finite() {
        return HmcOutcome { accepted: false, divergent: true, accept_prob: 0.0, energy_error: f64::INFINITY };
    }
    let accept_prob = (-energy_error).exp().min(1.0);
    let divergent = energy_error > DIVERGENCE_THRESHOLD;
    let accepted = !divergent && u.ln() < -energy_error;
    if accepted {
        theta.copy_from_slice(&q);
    }
    HmcOutcome { accepted, divergent, accept_prob, energy_error }
}

/// Leapfrog count for a trajectory of length `span`, at most `max`.
pub fn leapfrog_steps(eps: f64, span: f64, max: usize) -> usize {
    ((span / eps).ceil() as usize).clamp(1, max)
}

/// Nesterov dual averaging of `log ε` towards a target acceptance rate.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(eps0: f64, target: f64) -> Self {
        Self { mu: (10.0 * eps0).ln(), target, h_bar: 0.0, log_eps: eps0.ln(), log_eps_bar: 0.0, t: 0.0 }
    }

    pub fn step_size(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Final adapted step size.
    pub fn final_step_size(&self) -> f64 {
        self.log_eps_bar.exp()
    }

    pub fn update(&mut self, accept_prob: f64) {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(sd: &[f64]) -> impl Fn(&[f64], &mut [f64]) -> f64 + '_ {
        move |x, g| {
            let mut lp = 0.0;
            for i in 0..x.len() {
                let z = x[i] / sd[i];
                lp -= 0.5 * z * z;
                g[i] = -x[i] / (sd[i] * sd[i]);
            }
            lp
        }
    }

    #[test]
    fn high_acceptance_on_gaussian() {
        let sd = [1.0, 2.0, 0.5];
        let var: Vec<f64> = sd.iter().map(|s| s * s).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = [0.1, 0.2, 0.3];
        let mut acc = 0;
        for _ in 0..10_000 {
            acc += hmc_step(&mut x, gauss(&sd), &var, 0.1, 10, &mut rng).accepted as usize;
        }
        assert!(acc as f64 / 10_000.0 > 0.9);
    }

    #[test]
    fn energy_conserved_for_tiny_steps() {
        let sd = [1.0, 3.0];
        let var = [1.0, 9.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = [0.5, -1.0];
        for _ in 0..200 {
            let o = hmc_step(&mut x, gauss(&sd), &var, 1e-3, 1000, &mut rng);
            assert!(o.energy_error.abs() < 1e-4, "{}", o.energy_error);
        }
    }

    #[test]
    fn preserves_moments_from_exact_draws() {
        // 10^5 exact N(0, diag(1, 4)) draws pushed through one transition.
        let sd = [1.0, 2.0];
        let var = [1.0, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for _ in 0..n {
            let mut x = [rng.sample::<f64, _>(StandardNormal), 2.0 * rng.sample::<f64, _>(StandardNormal)];
            hmc_step(&mut x, gauss(&sd), &var, 0.3, 5, &mut rng);
            for i in 0..2 {
                m[i] += x[i];
                v[i] += x[i] * x[i];
            }
        }
        for i in 0..2 {
            let mean = m[i] / n as f64;
            let second = v[i] / n as f64;
            let se_mean = sd[i] / (n as f64).sqrt();
            let se_second = (2.0f64).sqrt() * var[i] / (n as f64).sqrt();
            assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
            assert!((second - var[i]).abs() < 3.0 * se_second, "second {second}");
        }
    }

    #[test]
    fn dual_averaging_hits_target() {
        let sd = [1.0; 10];
        let var = [1.0; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = [0.0; 10];
        let mut da = DualAveraging::new(1.0, 0.8);
        for _ in 0..2000 {
            let eps = da.step_size();
            let o = hmc_step(&mut x, gauss(&sd), &var, eps, leapfrog_steps(eps, 1.5, 50), &mut rng);
            da.update(o.accept_prob);
        }
        let eps = da.final_step_size();
        let mut acc = 0.0;
        for _ in 0..4000 {
            acc += hmc_step(&mut x, gauss(&sd), &var, eps, leapfrog_steps(eps, 1.5, 50), &mut rng).accept_prob;
        }
        let rate = acc / 4000.0;
        assert!((0.7..0.95).contains(&rate), "{rate}");
    }

    #[test]
    fn divergence_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sd = [1e-3];
        let mut x = [0.0];
        let o = hmc_step(&mut x, gauss(&sd), &[1.0], 10.0, 10, &mut rng);
        assert!(o.divergent && !o.accepted);
        assert_eq!(x[0], 0.0);
    }
}

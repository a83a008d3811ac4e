use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SmcConfig;
use crate::error::{Error, Result};
use crate::kernels::hmc::{hmc_step, leapfrog_steps, DualAveraging};
use crate::kernels::{rwm_step, KernelKind, KernelStats, TunedKernel};
use crate::model::{Exponents, Model};

/// Baseline posterior draws and the kernel tuned on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    #[serde(skip)]
    pub draws: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Lag-1 autocorrelation of the retained (thinned) chain per coordinate.
    pub lag1: Vec<f64>,
    pub kernel: TunedKernel,
    pub stats: KernelStats,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
}

fn regularized_variance(samples: &[Vec<f64>], d: usize) -> Vec<f64> {
    let n = samples.len() as f64;
    (0..d)
        .map(|j| {
            let m = samples.iter().map(|s| s[j]).sum::<f64>() / n;
            let v = samples.iter().map(|s| (s[j] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            // Shrink towards 1e-3 as in standard windowed metric adaptation.
            (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))
        })
        .collect()
}

fn moments(draws: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = draws.len() as f64;
    let mut means = vec![0.0; d];
    let mut vars = vec![0.0; d];
    let mut lag1 = vec![0.0; d];
    for j in 0..d {
        let m = draws.iter().map(|s| s[j]).sum::<f64>() / n;
        let v = draws.iter().map(|s| (s[j] - m).powi(2)).sum::<f64>() / n;
        let c = draws.windows(2).map(|w| (w[0][j] - m) * (w[1][j] - m)).sum::<f64>() / n;
        means[j] = m;
        vars[j] = v;
        lag1[j] = if v > 0.0 { c / v } else { 0.0 };
    }
    (means, vars, lag1)
}

/// Transitions needed for the per-transition autocorrelation `rho` to decay
/// below 0.1, clamped to `1..=10`.
pub fn suggested_iterations(rho: f64) -> usize {
    if !(rho > 0.0) {
        return 1;
    }
    if rho >= 1.0 {
        return 10;
    }
    ((0.1f64.ln() / rho.ln()).ceil() as usize).clamp(1, 10)
}

/// Runs one MCMC chain on the tempered posterior with exponents `exps`
/// (all ones for the baseline; fold units zeroed for a brute-force refit).
///
/// HMC warm-up happens inside the burn-in: the step size is tuned by dual
/// averaging with a unit metric, the diagonal metric is estimated over a
/// middle window, and the step size is retuned against it.
pub fn run_baseline_mcmc<M: Model + ?Sized>(
    model: &M,
    exps: &Exponents,
    cfg: &SmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BaselineResult> {
    let r = cfg.particles;
    let total = cfg.baseline.total_iterations(r);
    let (burn, thin) = (cfg.baseline.burn_in, cfg.baseline.thin);
    if total < burn || (total - burn) / thin < r {
        return Err(Error::InvalidArgument(format!("baseline schedule retains fewer than {r} draws")));
    }
    let d = model.dim();
    let mut theta = model.initial_point();
    if !model.log_target(&theta, exps).is_finite() {
        return Err(Error::NonFiniteInit);
    }
    let kind = cfg.kernel.resolve_kind(model);
    let kc = &cfg.kernel;
    let mut stats = KernelStats::default();

    let mut inv_mass = vec![1.0; d];
    let mut eps = kc.step_size.unwrap_or(0.1);
    let mut rwm_scales = vec![0.1; d];
    let stage_a = burn * 15 / 100;
    let stage_b = burn * 75 / 100;
    let mut window: Vec<Vec<f64>> = Vec::new();
    let mut da = DualAveraging::new(eps, kc.target_accept);
    let n_leap = |e: f64| kc.leapfrog.unwrap_or_else(|| leapfrog_steps(e, kc.trajectory, kc.max_leapfrog));

    let mut retained = Vec::with_capacity((total - burn) / thin);
    for it in 0..total {
        let warm = it < burn;
        match kind {
            KernelKind::Gibbs => {
                model.gibbs_sweep(&mut theta, exps, rng).ok_or(Error::Unsupported {
                    model: model.name(),
                    what: "Gibbs sweep",
                })??;
                stats.proposals += 1;
                stats.accepted += 1;
            }
            KernelKind::Hmc => {
                let step = if warm && kc.step_size.is_none() { da.step_size() } else { eps };
                let o = hmc_step(
                    &mut theta,
                    |q, g| model.log_target_grad(q, exps, g).unwrap_or(f64::NAN),
                    &inv_mass,
                    step,
                    n_leap(step),
                    rng,
                );
                stats.proposals += 1;
                stats.accepted += o.accepted as usize;
                stats.divergent += o.divergent as usize;
                if warm && kc.step_size.is_none() {
                    da.update(o.accept_prob);
                }
            }
            KernelKind::Rwm => {
                let mut lp = model.log_target(&theta, exps);
                let ok = rwm_step(&mut theta, &mut lp, |q| model.log_target(q, exps), &rwm_scales, rng);
                stats.proposals += 1;
                stats.accepted += ok as usize;
            }
        }
        if warm {
            if it >= stage_a && it < stage_b {
                window.push(theta.clone());
            }
            if it + 1 == stage_b && window.len() >= 10 {
                let var = regularized_variance(&window, d);
                match kind {
                    KernelKind::Hmc => {
                        inv_mass = var;
                        if kc.step_size.is_none() {
                            da = DualAveraging::new(da.step_size(), kc.target_accept);
                        }
                    }
                    KernelKind::Rwm => {
                        let s = 2.38 / (d as f64).sqrt();
                        rwm_scales = var.iter().map(|v| s * v.sqrt()).collect();
                    }
                    KernelKind::Gibbs => {}
                }
            }
            if it + 1 == burn && kind == KernelKind::Hmc && kc.step_size.is_none() {
                eps = da.final_step_size();
            }
        } else if (it - burn + 1) % thin == 0 {
            retained.push(theta.clone());
        }
    }
    if burn == 0 && kind == KernelKind::Hmc && kc.step_size.is_none() {
        eps = da.step_size();
    }
    let draws = retained.split_off(retained.len() - r);
    let (means, variances, lag1) = moments(&draws, d);
    let iterations = kc.iterations.unwrap_or_else(|| match kind {
        KernelKind::Gibbs => 5,
        _ => {
            // The slowest-mixing coordinate sets the count.
            let rho = lag1.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max).powf(1.0 / thin as f64);
            suggested_iterations(rho)
        }
    });
    let scale = kc.rwm_scale;
    let kernel = TunedKernel {
        kind,
        iterations,
        step_size: eps,
        leapfrog: n_leap(eps),
        inv_mass: variances.iter().map(|v| v.max(1e-12)).collect(),
        rwm_scales: variances.iter().map(|v| scale * v.max(1e-12).sqrt()).collect(),
    };
    Ok(BaselineResult { draws, means, variances, lag1, kernel, stats, iterations: total, burn_in: burn, thin })
}

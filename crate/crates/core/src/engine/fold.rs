use rand::Rng;
use rayon::prelude::*;

use super::rng::{stream, FOLD, PREDICT, RESAMPLE};
use super::{Action, CheckpointEstimate, FoldResult, SmcConfig, StepRecord};
use crate::error::{Error, Result};
use crate::kernels::{KernelStats, TunedKernel};
use crate::model::Model;
use crate::path::{solve_next_n, DeletionPath, PathKind};
use crate::scheme::{EstimandSpec, Fold, UnitIndex};
use crate::weights::{ess_of_log_weights, normalize, pareto_smooth, resample_systematic, weighted_log_estimand, WeightVector};

/// Hard cap on accepted steps per fold; the solver always advances by at
/// least half a bisection tolerance, so this only trips on misconfiguration.
const MAX_STEPS: usize = 100_000;

/// Everything a fold reads but never mutates.
pub struct FoldContext<'a, M: Model + ?Sized> {
    pub model: &'a M,
    /// Uniform-weight baseline draws, shared by all folds.
    pub particles: &'a [Vec<f64>],
    pub kernel: &'a TunedKernel,
    pub config: &'a SmcConfig,
    pub seed: u64,
}

impl<M: Model + ?Sized> Clone for FoldContext<'_, M> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M: Model + ?Sized> Copy for FoldContext<'_, M> {}

/// Particle system at the end of a fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldState {
    pub particles: Vec<Vec<f64>>,
    /// Raw (unsmoothed) log-weights carried along the path.
    pub log_w: Vec<f64>,
    /// `unit_ll[r][j]`: log-likelihood of the fold's `j`-th unit under particle `r`.
    pub unit_ll: Vec<Vec<f64>>,
    /// Ancestors from the most recent resampling.
    pub ancestors: Option<Vec<usize>>,
    pub n: f64,
}

/// `(log Σ_r W_r exp(log_f_r), delta-method standard error)`.
pub fn weighted_estimate(w: &WeightVector<f64>, log_f: &[f64]) -> Result<(f64, f64)> {
    let est = weighted_log_estimand(w, log_f)?;
    let max = log_f
        .iter()
        .zip(&w.normalized)
        .filter(|(_, &wr)| wr > 0.0)
        .map(|(&f, _)| f)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok((est, f64::NAN));
    }
    let f: Vec<f64> = log_f.iter().map(|&x| (x - max).exp()).collect();
    let mean: f64 = w.normalized.iter().zip(&f).map(|(wr, fr)| wr * fr).sum();
    let var: f64 = w.normalized.iter().zip(&f).map(|(wr, fr)| wr * wr * (fr - mean).powi(2)).sum();
    Ok((est, var.sqrt() / mean))
}

/// Joint `h`-step-ahead log predictive density of `units` under weighted
/// draws. For `h > 1` each draw simulates its latent path from its own stream
/// `(seed, tags.., PREDICT, r)`.
pub fn leo_multistep_log_predictive<M: Model + ?Sized>(
    model: &M,
    draws: &[Vec<f64>],
    w: &WeightVector<f64>,
    units: &[UnitIndex],
    h: usize,
    seed: u64,
    tags: &[u64],
) -> Result<(f64, f64)> {
    let log_f: Vec<f64> = draws
        .par_iter()
        .enumerate()
        .map(|(r, theta)| {
            let mut path_tags = tags.to_vec();
            path_tags.extend([PREDICT, r as u64]);
            let mut rng = stream(seed, &path_tags);
            let mut acc = 0.0;
            for &u in units {
                let v = model.log_predictive_ahead(theta, u, h, &mut rng)?;
                if v.is_nan() {
                    return Err(Error::NonFiniteLogLik(u));
                }
                acc += v;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    weighted_estimate(w, &log_f)
}

fn unit_lls<M: Model + ?Sized>(model: &M, fold: &Fold, theta: &[f64]) -> Result<Vec<f64>> {
    fold.units
        .iter()
        .map(|&u| {
            let ll = model.unit_log_lik(theta, u);
            if ll.is_finite() {
                Ok(ll)
            } else {
                Err(Error::NonFiniteLogLik(u))
            }
        })
        .collect()
}

/// Slot sums accumulated in fold order from zero, so that the one-shot
/// tempering increment is exactly `-Σ_j ll_j`.
fn slot_sums(path: &DeletionPath, ll: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; path.slots()];
    for (j, &v) in ll.iter().enumerate() {
        sums[path.slot_of_unit(j)] += v;
    }
    sums
}

struct Runner<'a, M: Model + ?Sized> {
    ctx: FoldContext<'a, M>,
    fold_id: usize,
    fold: &'a Fold,
    path: DeletionPath,
    state: FoldState,
    sums: Vec<Vec<f64>>,
    stats: KernelStats,
    invocations: usize,
}

impl<M: Model + ?Sized> Runner<'_, M> {
    fn increments(&self, n_next: f64) -> Vec<f64> {
        let n = self.state.n;
        self.sums
            .iter()
            .zip(&self.state.log_w)
            .map(|(s, lw)| lw + self.path.increment_from_sums(s, n, n_next))
            .collect()
    }

    /// Resamples (unless disabled) and moves every particle with the kernel
    /// targeting the tempered posterior at `n`.
    fn rejuvenate(&mut self, step: usize, log_w: Vec<f64>) -> Result<KernelStats> {
        let cfg = self.ctx.config;
        let fold_tag = self.fold_id as u64;
        if cfg.resample {
            let w = normalize(&log_w)?;
            let u: f64 = stream(self.ctx.seed, &[FOLD, fold_tag, step as u64, RESAMPLE]).random();
            let anc = resample_systematic(&w.normalized, u);
            self.state.particles = anc.iter().map(|&a| self.state.particles[a].clone()).collect();
            self.state.unit_ll = anc.iter().map(|&a| self.state.unit_ll[a].clone()).collect();
            self.state.ancestors = Some(anc);
            self.state.log_w = vec![0.0; log_w.len()];
        } else {
            self.state.log_w = log_w;
        }
        let model = self.ctx.model;
        let kernel = self.ctx.kernel;
        let fold = self.fold;
        let exps = self.path.exponents(fold, self.state.n, model.group_sizes());
        let seed = self.ctx.seed;
        let iters = kernel.iterations;
        let outcomes: Vec<Result<KernelStats>> = self
            .state
            .particles
            .par_iter_mut()
            .zip(self.state.unit_ll.par_iter_mut())
            .enumerate()
            .map(|(r, (theta, ll))| {
                let mut rng = stream(seed, &[FOLD, fold_tag, step as u64, r as u64]);
                let s = kernel.apply(model, theta, &exps, iters, &mut rng)?;
                if iters > 0 {
                    *ll = unit_lls(model, fold, theta)?;
                }
                Ok(s)
            })
            .collect();
        let mut stats = KernelStats::default();
        for o in outcomes {
            stats.merge(o?);
        }
        self.sums = self.state.unit_ll.iter().map(|ll| slot_sums(&self.path, ll)).collect();
        self.stats.merge(stats);
        self.invocations += 1;
        Ok(stats)
    }

    /// Whole-fold estimand under the current draws and weights `w`.
    fn fold_estimate(&self, w: &WeightVector<f64>, estimand: EstimandSpec) -> Result<(f64, f64)> {
        match estimand {
            EstimandSpec::Pointwise => {
                let (mut est, mut var) = (0.0, 0.0);
                for j in 0..self.fold.len() {
                    let f: Vec<f64> = self.state.unit_ll.iter().map(|ll| ll[j]).collect();
                    let (e, s) = weighted_estimate(w, &f)?;
                    est += e;
                    var += s * s;
                }
                Ok((est, var.sqrt()))
            }
            _ => {
                let f: Vec<f64> = self.state.unit_ll.iter().map(|ll| ll.iter().fold(0.0, |a, v| a + v)).collect();
                weighted_estimate(w, &f)
            }
        }
    }

    /// Leave-end-out estimand at checkpoint stage `c`.
    fn leo_estimate(
        &self,
        w: &WeightVector<f64>,
        c: usize,
        estimand: EstimandSpec,
        step: usize,
    ) -> Result<(usize, Option<usize>, Option<(f64, f64)>)> {
        let h = estimand.horizon();
        let t_c = self.fold.units_at_rank(c).map(|u| u.within).min().ok_or(Error::EmptyInput)?;
        let retained = t_c - 1;
        if h > c {
            return Ok((retained, None, None));
        }
        let units: Vec<UnitIndex> = self.fold.units_at_rank(c + 1 - h).collect();
        let tags = [FOLD, self.fold_id as u64, step as u64];
        let model = self.ctx.model;
        let ps = &self.state.particles;
        let seed = self.ctx.seed;
        let est = if estimand == EstimandSpec::Pointwise {
            let (mut e, mut v) = (0.0, 0.0);
            for u in &units {
                let (a, s) = leo_multistep_log_predictive(model, ps, w, std::slice::from_ref(u), h, seed, &tags)?;
                e += a;
                v += s * s;
            }
            (e, v.sqrt())
        } else {
            leo_multistep_log_predictive(model, ps, w, &units, h, seed, &tags)?
        };
        Ok((retained, Some(retained + h), Some(est)))
    }

    fn run(&mut self, checkpoints: &[usize], estimand: EstimandSpec, leo: bool) -> Result<FoldResult> {
        let cfg = self.ctx.config;
        let r = self.state.particles.len();
        let rf = r as f64;
        let target = cfg.ess_ratio * rf;
        let tol = cfg.tol_fraction * self.path.length() as f64;
        let mut trace = Vec::new();
        let uniform = WeightVector::uniform(r);
        let base_est = if leo { None } else { Some(self.fold_estimate(&uniform, estimand)?.0) };
        trace.push(StepRecord {
            step: 0,
            n: 0.0,
            exponent_min: 1.0,
            exponent_max: 1.0,
            ess: rf,
            bracket_ess: None,
            action: Action::Baseline,
            estimate: base_est,
            k_hat: None,
            checkpoint: None,
            kernel_stats: None,
        });
        let mut cps = Vec::new();
        let mut step = 0;
        let mut last = (f64::NAN, f64::NAN, None, Action::Baseline);
        for (ci, &cp) in checkpoints.iter().enumerate() {
            let cap = cp as f64;
            let mut sub = 0;
            loop {
                if step >= MAX_STEPS {
                    return Err(Error::InvalidArgument(format!("fold exceeded {MAX_STEPS} steps")));
                }
                let sol = solve_next_n(
                    |m| ess_of_log_weights(&self.increments(m)),
                    self.state.n,
                    cap,
                    target,
                    tol,
                    cfg.max_bisection,
                )?;
                let new_lw = self.increments(sol.n);
                let ess = ess_of_log_weights(&new_lw);
                step += 1;
                self.state.n = sol.n;
                let (lo, hi) = self.path.exponent_range(sol.n);
                let mut rec = StepRecord {
                    step,
                    n: sol.n,
                    exponent_min: lo,
                    exponent_max: hi,
                    ess,
                    bracket_ess: sol.bracket_ess,
                    action: Action::Rejuvenate,
                    estimate: None,
                    k_hat: None,
                    checkpoint: None,
                    kernel_stats: None,
                };
                if sol.n < cap {
                    rec.kernel_stats = Some(self.rejuvenate(step, new_lw)?);
                    rec.action = if cfg.resample { Action::Rejuvenate } else { Action::Reweight };
                    if !leo {
                        let w = normalize(&self.state.log_w)?;
                        rec.estimate = Some(self.fold_estimate(&w, estimand)?.0);
                    }
                    sub += 1;
                    trace.push(rec);
                    continue;
                }
                let k_hat = match pareto_smooth(&new_lw) {
                    Ok(d) => (d.k_hat, Some(d.smoothed)),
                    Err(Error::TailTooSmall(_)) => (f64::INFINITY, None),
                    Err(e) => return Err(e),
                };
                rec.k_hat = Some(k_hat.0);
                rec.checkpoint = Some(ci);
                let w = match k_hat.1 {
                    Some(smoothed) if cfg.accept_psis(k_hat.0) => {
                        rec.action = Action::Psis;
                        self.state.log_w = new_lw;
                        smoothed
                    }
                    _ => {
                        rec.kernel_stats = Some(self.rejuvenate(step, new_lw)?);
                        rec.action = Action::PsisRejected;
                        normalize(&self.state.log_w)?
                    }
                };
                let (est, se) = if leo {
                    let (retained, target_time, est) = self.leo_estimate(&w, cp, estimand, step)?;
                    cps.push(CheckpointEstimate {
                        deleted: cp,
                        retained_until: retained,
                        target_time,
                        estimate: est.map(|e| e.0),
                        mc_se: est.map(|e| e.1),
                        sub_interventions: sub,
                        rejuvenated: rec.action == Action::PsisRejected,
                        k_hat: Some(k_hat.0),
                    });
                    est.unwrap_or((f64::NAN, f64::NAN))
                } else {
                    self.fold_estimate(&w, estimand)?
                };
                rec.estimate = if leo { cps.last().and_then(|c| c.estimate) } else { Some(est) };
                last = (est, se, Some(k_hat.0), rec.action);
                trace.push(rec);
                break;
            }
        }
        let (estimate, mc_se) = if leo {
            let done: Vec<_> = cps.iter().filter_map(|c| c.estimate.zip(c.mc_se)).collect();
            (done.iter().map(|c| c.0).sum(), done.iter().map(|c| c.1 * c.1).sum::<f64>().sqrt())
        } else {
            (last.0, last.1)
        };
        Ok(FoldResult {
            fold: self.fold_id,
            size: self.fold.len(),
            estimate,
            mc_se,
            k_hat: last.2,
            final_action: last.3,
            kernel_invocations: self.invocations,
            kernel_stats: self.stats,
            checkpoints: cps,
            trace,
        })
    }
}

/// Runs one fold and also returns the final particle system.
///
/// `checkpoints` are positions on the deletion path; `None` means the path
/// end only. Leave-end-out folds pass their stage checkpoints and get one
/// estimate per checkpoint.
pub fn run_fold_state<M: Model + ?Sized>(
    ctx: FoldContext<'_, M>,
    fold_id: usize,
    fold: &Fold,
    checkpoints: Option<&[usize]>,
    estimand: EstimandSpec,
) -> Result<(FoldState, FoldResult)> {
    let wrap = |e: Error| Error::Fold { fold: fold_id, source: Box::new(e) };
    if fold.is_empty() {
        return Err(wrap(Error::EmptyInput));
    }
    let leo = checkpoints.is_some();
    let kind = ctx.config.path.unwrap_or(if leo { PathKind::Ordered } else { PathKind::Tempering });
    if leo && kind != PathKind::Ordered {
        return Err(wrap(Error::InvalidArgument("leave-end-out requires the ordered deletion path".into())));
    }
    let path = DeletionPath::new(kind, fold);
    let end = [path.length()];
    let checkpoints = checkpoints.unwrap_or(&end);
    if checkpoints.last() != Some(&path.length()) || checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints[0] == 0 {
        return Err(wrap(Error::InvalidArgument("checkpoints must increase strictly and end at the path length".into())));
    }
    let unit_ll: Vec<Vec<f64>> =
        ctx.particles.par_iter().map(|theta| unit_lls(ctx.model, fold, theta)).collect::<Result<_>>().map_err(wrap)?;
    let sums = unit_ll.iter().map(|ll| slot_sums(&path, ll)).collect();
    let r = ctx.particles.len();
    let mut runner = Runner {
        ctx,
        fold_id,
        fold,
        path,
        state: FoldState { particles: ctx.particles.to_vec(), log_w: vec![0.0; r], unit_ll, ancestors: None, n: 0.0 },
        sums,
        stats: KernelStats::default(),
        invocations: 0,
    };
    let result = runner.run(checkpoints, estimand, leo).map_err(wrap)?;
    Ok((runner.state, result))
}

/// Transports the baseline particles to the posterior with `fold` deleted.
pub fn run_fold<M: Model + ?Sized>(
    ctx: FoldContext<'_, M>,
    fold_id: usize,
    fold: &Fold,
    estimand: EstimandSpec,
) -> Result<FoldResult> {
    run_fold_state(ctx, fold_id, fold, None, estimand).map(|s| s.1)
}

/// Backward leave-end-out along the ordered path, stopping at every checkpoint.
pub fn run_leo<M: Model + ?Sized>(
    ctx: FoldContext<'_, M>,
    fold_id: usize,
    fold: &Fold,
    checkpoints: &[usize],
    estimand: EstimandSpec,
) -> Result<FoldResult> {
    run_fold_state(ctx, fold_id, fold, Some(checkpoints), estimand).map(|s| s.1)
}

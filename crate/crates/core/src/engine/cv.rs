use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{run_baseline_mcmc, BaselineResult};
use super::fold::{leo_multistep_log_predictive, run_fold_state, weighted_estimate, FoldContext};
use super::rng::{stream, BASELINE, PSIS, REFIT};
use super::{Action, CheckpointEstimate, Estimator, FoldFailure, FoldResult, SmcConfig, StepRecord};
use crate::error::{Error, Result};
use crate::kernels::{KernelStats, TunedKernel};
use crate::model::{Exponents, Model};
use crate::scheme::{DeletionScheme, EstimandSpec, Fold, SchemeKind, UnitIndex};
use crate::weights::{normalize, pareto_smooth, WeightVector};

/// Shape of the deletion scheme, for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub kind: SchemeKind,
    pub folds: usize,
    pub fold_sizes: Vec<usize>,
    pub checkpoints: Vec<usize>,
    pub unbalanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub retained: usize,
    pub acceptance_rate: f64,
    pub divergences: usize,
    pub mean_lag1: f64,
    pub kernel: TunedKernel,
}

impl BaselineSummary {
    fn from_result(b: &BaselineResult) -> Self {
        Self {
            iterations: b.iterations,
            burn_in: b.burn_in,
            thin: b.thin,
            retained: b.draws.len(),
            acceptance_rate: b.stats.accepted as f64 / b.stats.proposals.max(1) as f64,
            divergences: b.stats.divergent,
            mean_lag1: b.lag1.iter().sum::<f64>() / b.lag1.len().max(1) as f64,
            kernel: b.kernel.clone(),
        }
    }
}

/// All folds of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    /// `ℓ̂ = Σ_k ℓ̂_k` over the folds that completed.
    pub aggregate: f64,
    pub mc_se: f64,
    pub kernel_invocations: usize,
    pub folds: Vec<FoldResult>,
    pub failures: Vec<FoldFailure>,
}

impl EstimatorResult {
    fn collect(outcomes: Vec<Result<FoldResult>>) -> Self {
        let mut folds = Vec::new();
        let mut failures = Vec::new();
        for (k, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(f) => folds.push(f),
                Err(e) => failures.push(FoldFailure { fold: k, error: e.to_string() }),
            }
        }
        let aggregate = folds.iter().fold(0.0, |a, f| a + f.estimate);
        let mc_se = folds.iter().map(|f| f.mc_se * f.mc_se).sum::<f64>().sqrt();
        let kernel_invocations = folds.iter().map(|f| f.kernel_invocations).sum();
        Self { aggregate, mc_se, kernel_invocations, folds, failures }
    }

    pub fn fold(&self, k: usize) -> Option<&FoldResult> {
        self.folds.iter().find(|f| f.fold == k)
    }
}

/// Error of the fast estimators against the brute-force refit, per fold
/// (and per checkpoint for leave-end-out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldComparison {
    pub fold: usize,
    pub checkpoint: Option<usize>,
    pub refit: f64,
    pub refit_se: f64,
    pub asmc: Option<f64>,
    pub asmc_se: Option<f64>,
    pub psis: Option<f64>,
    pub abs_err_asmc: Option<f64>,
    pub abs_err_psis: Option<f64>,
    pub rel_err_asmc: Option<f64>,
    pub rel_err_psis: Option<f64>,
}

/// Deterministic outcome of a cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub version: String,
    pub seed: u64,
    pub smc: SmcConfig,
    pub estimand: EstimandSpec,
    pub scheme: SchemeSummary,
    pub baseline: Option<BaselineSummary>,
    pub asmc: Option<EstimatorResult>,
    pub psis: Option<EstimatorResult>,
    pub mcmc_refit: Option<EstimatorResult>,
    pub comparison: Option<Vec<FoldComparison>>,
}

/// Wall-clock seconds; kept apart from [`CvReport`] so the report stays
/// byte-reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub baseline: f64,
    pub asmc: f64,
    pub asmc_folds: Vec<f64>,
    pub psis: f64,
    pub mcmc_refit: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub report: CvReport,
    pub timings: Timings,
}

fn checkpoints_for(scheme: &DeletionScheme) -> Option<&[usize]> {
    scheme.kind.is_leo().then_some(scheme.checkpoints.as_slice())
}

fn run_asmc<M: Model + ?Sized>(
    model: &M,
    base: &BaselineResult,
    scheme: &DeletionScheme,
    estimand: EstimandSpec,
    cfg: &SmcConfig,
    seed: u64,
) -> (EstimatorResult, Vec<f64>) {
    let ctx = FoldContext { model, particles: &base.draws, kernel: &base.kernel, config: cfg, seed };
    let cps = checkpoints_for(scheme);
    let outcomes: Vec<(Result<FoldResult>, f64)> = scheme
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            let t = Instant::now();
            let r = run_fold_state(ctx, k, fold, cps, estimand).map(|s| s.1);
            (r, t.elapsed().as_secs_f64())
        })
        .collect();
    let times = outcomes.iter().map(|o| o.1).collect();
    (EstimatorResult::collect(outcomes.into_iter().map(|o| o.0).collect()), times)
}

/// Fold-level log-weights `-Σ_{u} ll_u` summed in fold order, matching the
/// one-shot tempering increment bit for bit.
fn one_shot_log_weights<M: Model + ?Sized>(model: &M, draws: &[Vec<f64>], units: &[UnitIndex]) -> Result<Vec<f64>> {
    draws
        .par_iter()
        .map(|theta| {
            let mut s = 0.0;
            for &u in units {
                let ll = model.unit_log_lik(theta, u);
                if !ll.is_finite() {
                    return Err(Error::NonFiniteLogLik(u));
                }
                s += ll;
            }
            Ok(0.0 + -s)
        })
        .collect()
}

fn smoothed(log_w: &[f64]) -> Result<(WeightVector<f64>, f64)> {
    match pareto_smooth(log_w) {
        Ok(d) => Ok((d.smoothed, d.k_hat)),
        Err(Error::TailTooSmall(_)) => Ok((normalize(log_w)?, f64::INFINITY)),
        Err(e) => Err(e),
    }
}

fn non_leo_estimate<M: Model + ?Sized>(
    model: &M,
    draws: &[Vec<f64>],
    w: &WeightVector<f64>,
    units: &[UnitIndex],
    estimand: EstimandSpec,
) -> Result<(f64, f64)> {
    let ll: Vec<Vec<f64>> = draws.par_iter().map(|t| units.iter().map(|&u| model.unit_log_lik(t, u)).collect()).collect();
    if estimand == EstimandSpec::Pointwise {
        let (mut e, mut v) = (0.0, 0.0);
        for j in 0..units.len() {
            let f: Vec<f64> = ll.iter().map(|l| l[j]).collect();
            let (a, s) = weighted_estimate(w, &f)?;
            e += a;
            v += s * s;
        }
        Ok((e, v.sqrt()))
    } else {
        let f: Vec<f64> = ll.iter().map(|l| l.iter().fold(0.0, |a, v| a + v)).collect();
        weighted_estimate(w, &f)
    }
}

fn leo_estimate<M: Model + ?Sized>(
    model: &M,
    draws: &[Vec<f64>],
    w: &WeightVector<f64>,
    fold: &Fold,
    c: usize,
    estimand: EstimandSpec,
    seed: u64,
    tags: &[u64],
) -> Result<CheckpointEstimate> {
    let h = estimand.horizon();
    let t_c = fold.units_at_rank(c).map(|u| u.within).min().ok_or(Error::EmptyInput)?;
    let mut out = CheckpointEstimate {
        deleted: c,
        retained_until: t_c - 1,
        target_time: None,
        estimate: None,
        mc_se: None,
        sub_interventions: 0,
        rejuvenated: false,
        k_hat: None,
    };
    if h <= c {
        let units: Vec<UnitIndex> = fold.units_at_rank(c + 1 - h).collect();
        let (e, s) = if estimand == EstimandSpec::Pointwise {
            let (mut e, mut v) = (0.0, 0.0);
            for u in &units {
                let (a, s) = leo_multistep_log_predictive(model, draws, w, std::slice::from_ref(u), h, seed, tags)?;
                e += a;
                v += s * s;
            }
            (e, v.sqrt())
        } else {
            leo_multistep_log_predictive(model, draws, w, &units, h, seed, tags)?
        };
        out.target_time = Some(t_c - 1 + h);
        out.estimate = Some(e);
        out.mc_se = Some(s);
    }
    Ok(out)
}

fn summed(cps: &[CheckpointEstimate]) -> (f64, f64) {
    let done: Vec<_> = cps.iter().filter_map(|c| c.estimate.zip(c.mc_se)).collect();
    (done.iter().map(|c| c.0).sum(), done.iter().map(|c| c.1 * c.1).sum::<f64>().sqrt())
}

fn psis_fold<M: Model + ?Sized>(
    model: &M,
    draws: &[Vec<f64>],
    k: usize,
    fold: &Fold,
    checkpoints: Option<&[usize]>,
    estimand: EstimandSpec,
    seed: u64,
) -> Result<FoldResult> {
    let r = draws.len() as f64;
    let base_row = StepRecord {
        step: 0,
        n: 0.0,
        exponent_min: 1.0,
        exponent_max: 1.0,
        ess: r,
        bracket_ess: None,
        action: Action::Baseline,
        estimate: None,
        k_hat: None,
        checkpoint: None,
        kernel_stats: None,
    };
    let mut trace = vec![base_row];
    let mut cps = Vec::new();
    let (estimate, mc_se, k_hat) = match checkpoints {
        None => {
            let lw = one_shot_log_weights(model, draws, &fold.units)?;
            let (w, k_hat) = smoothed(&lw)?;
            let (e, s) = non_leo_estimate(model, draws, &w, &fold.units, estimand)?;
            trace.push(StepRecord {
                step: 1,
                n: fold.len() as f64,
                exponent_min: 0.0,
                exponent_max: 0.0,
                ess: w.ess(),
                action: Action::Psis,
                estimate: Some(e),
                k_hat: Some(k_hat),
                checkpoint: Some(0),
                ..trace[0].clone()
            });
            (e, s, k_hat)
        }
        Some(stages) => {
            let mut k_last = f64::NAN;
            for (ci, &c) in stages.iter().enumerate() {
                let units: Vec<UnitIndex> =
                    fold.units.iter().zip(&fold.ranks).filter(|(_, &rk)| rk <= c).map(|(u, _)| *u).collect();
                let lw = one_shot_log_weights(model, draws, &units)?;
                let (w, k_hat) = smoothed(&lw)?;
                let mut cp = leo_estimate(model, draws, &w, fold, c, estimand, seed, &[PSIS, k as u64, c as u64])?;
                cp.k_hat = Some(k_hat);
                trace.push(StepRecord {
                    step: ci + 1,
                    n: c as f64,
                    exponent_min: 0.0,
                    exponent_max: if c == fold.stages() { 0.0 } else { 1.0 },
                    ess: w.ess(),
                    action: Action::Psis,
                    estimate: cp.estimate,
                    k_hat: Some(k_hat),
                    checkpoint: Some(ci),
                    ..trace[0].clone()
                });
                cps.push(cp);
                k_last = k_hat;
            }
            let (e, s) = summed(&cps);
            (e, s, k_last)
        }
    };
    Ok(FoldResult {
        fold: k,
        size: fold.len(),
        estimate,
        mc_se,
        k_hat: Some(k_hat),
        final_action: Action::Psis,
        kernel_invocations: 0,
        kernel_stats: KernelStats::default(),
        checkpoints: cps,
        trace,
    })
}

/// PSIS applied directly to the baseline draws, one importance-sampling jump
/// per fold (per checkpoint for leave-end-out).
pub fn run_psis<M: Model + ?Sized>(
    model: &M,
    draws: &[Vec<f64>],
    scheme: &DeletionScheme,
    estimand: EstimandSpec,
    seed: u64,
) -> EstimatorResult {
    let cps = checkpoints_for(scheme);
    let outcomes = scheme
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            psis_fold(model, draws, k, fold, cps, estimand, seed).map_err(|e| Error::Fold { fold: k, source: Box::new(e) })
        })
        .collect();
    EstimatorResult::collect(outcomes)
}

/// `(log mean exp(f), batch-means standard error)` for a correlated chain.
fn chain_estimate(log_f: &[f64]) -> (f64, f64) {
    let n = log_f.len();
    let max = log_f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let f: Vec<f64> = log_f.iter().map(|v| (v - max).exp()).collect();
    let mean = f.iter().sum::<f64>() / n as f64;
    let batches = ((n as f64).sqrt() as usize).max(2);
    let size = n / batches;
    let bm: Vec<f64> = (0..batches).map(|b| f[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let bmean = bm.iter().sum::<f64>() / batches as f64;
    let var = bm.iter().map(|v| (v - bmean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (max + mean.ln(), (var / batches as f64).sqrt() / mean)
}

fn refit_fold<M: Model + ?Sized>(
    model: &M,
    k: usize,
    fold: &Fold,
    checkpoints: Option<&[usize]>,
    estimand: EstimandSpec,
    cfg: &SmcConfig,
    seed: u64,
) -> Result<FoldResult> {
    let deleted = |c: usize| {
        let mut e = Exponents::ones(model.group_sizes());
        for (u, &rk) in fold.units.iter().zip(&fold.ranks) {
            if rk <= c {
                e.set(*u, 0.0);
            }
        }
        e
    };
    let mut stats = KernelStats::default();
    let mut cps = Vec::new();
    let (estimate, mc_se) = match checkpoints {
        None => {
            let b = run_baseline_mcmc(model, &deleted(usize::MAX), cfg, &mut stream(seed, &[REFIT, k as u64]))?;
            stats.merge(b.stats);
            let est = if estimand == EstimandSpec::Pointwise {
                let (mut e, mut v) = (0.0, 0.0);
                for &u in &fold.units {
                    let f: Vec<f64> = b.draws.iter().map(|t| model.unit_log_lik(t, u)).collect();
                    let (a, s) = chain_estimate(&f);
                    e += a;
                    v += s * s;
                }
                (e, v.sqrt())
            } else {
                let f: Vec<f64> = b
                    .draws
                    .iter()
                    .map(|t| fold.units.iter().fold(0.0, |a, &u| a + model.unit_log_lik(t, u)))
                    .collect();
                chain_estimate(&f)
            };
            est
        }
        Some(stages) => {
            for &c in stages {
                let tags = [REFIT, k as u64, c as u64];
                let b = run_baseline_mcmc(model, &deleted(c), cfg, &mut stream(seed, &tags))?;
                stats.merge(b.stats);
                let w = WeightVector::uniform(b.draws.len());
                let mut cp = leo_estimate(model, &b.draws, &w, fold, c, estimand, seed, &tags)?;
                if let Some(h) = cp.target_time.map(|_| estimand.horizon()) {
                    // Replace the iid standard error with a batch-means one.
                    let units: Vec<UnitIndex> = fold.units_at_rank(c + 1 - h).collect();
                    if h == 1 {
                        let f: Vec<f64> =
                            b.draws.iter().map(|t| units.iter().fold(0.0, |a, &u| a + model.unit_log_lik(t, u))).collect();
                        cp.mc_se = Some(chain_estimate(&f).1);
                    }
                }
                cps.push(cp);
            }
            summed(&cps)
        }
    };
    Ok(FoldResult {
        fold: k,
        size: fold.len(),
        estimate,
        mc_se,
        k_hat: None,
        final_action: Action::Baseline,
        kernel_invocations: 0,
        kernel_stats: stats,
        checkpoints: cps,
        trace: Vec::new(),
    })
}

/// Brute-force reference: a fresh MCMC run per fold (and per checkpoint for
/// leave-end-out) on the case-deleted posterior.
pub fn run_refit<M: Model + ?Sized>(
    model: &M,
    scheme: &DeletionScheme,
    estimand: EstimandSpec,
    cfg: &SmcConfig,
    seed: u64,
) -> EstimatorResult {
    let cps = checkpoints_for(scheme);
    let outcomes = scheme
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            refit_fold(model, k, fold, cps, estimand, cfg, seed).map_err(|e| Error::Fold { fold: k, source: Box::new(e) })
        })
        .collect();
    EstimatorResult::collect(outcomes)
}

fn rel(err: f64, reference: f64) -> f64 {
    err / reference.abs()
}

fn compare(asmc: Option<&EstimatorResult>, psis: Option<&EstimatorResult>, refit: &EstimatorResult) -> Vec<FoldComparison> {
    let mut out = Vec::new();
    for rf in &refit.folds {
        let a = asmc.and_then(|r| r.fold(rf.fold));
        let p = psis.and_then(|r| r.fold(rf.fold));
        let mut row = |checkpoint: Option<usize>, refit: f64, refit_se: f64, av: Option<(f64, f64)>, pv: Option<f64>| {
            out.push(FoldComparison {
                fold: rf.fold,
                checkpoint,
                refit,
                refit_se,
                asmc: av.map(|v| v.0),
                asmc_se: av.map(|v| v.1),
                psis: pv,
                abs_err_asmc: av.map(|v| (v.0 - refit).abs()),
                abs_err_psis: pv.map(|v| (v - refit).abs()),
                rel_err_asmc: av.map(|v| rel((v.0 - refit).abs(), refit)),
                rel_err_psis: pv.map(|v| rel((v - refit).abs(), refit)),
            });
        };
        if rf.checkpoints.is_empty() {
            row(None, rf.estimate, rf.mc_se, a.map(|f| (f.estimate, f.mc_se)), p.map(|f| f.estimate));
        } else {
            for (ci, c) in rf.checkpoints.iter().enumerate() {
                let Some((e, s)) = c.estimate.zip(c.mc_se) else { continue };
                let av = a.and_then(|f| f.checkpoints.get(ci)).and_then(|c| c.estimate.zip(c.mc_se));
                let pv = p.and_then(|f| f.checkpoints.get(ci)).and_then(|c| c.estimate);
                row(Some(ci), e, s, av, pv);
            }
        }
    }
    out
}

fn summary(scheme: &DeletionScheme) -> SchemeSummary {
    SchemeSummary {
        kind: scheme.kind,
        folds: scheme.folds.len(),
        fold_sizes: scheme.fold_sizes(),
        checkpoints: scheme.checkpoints.clone(),
        unbalanced: scheme.unbalanced,
    }
}

/// Runs the requested estimators. Thread count is whatever rayon pool the
/// caller installs; results do not depend on it.
pub fn run_estimators<M: Model + ?Sized>(
    model: &M,
    scheme: &DeletionScheme,
    estimand: EstimandSpec,
    cfg: &SmcConfig,
    seed: u64,
    which: Estimator,
) -> Result<RunOutput> {
    let start = Instant::now();
    cfg.validate()?;
    scheme.validate(model.group_sizes())?;
    estimand.validate(scheme.kind)?;
    let all = which == Estimator::All;
    let mut timings = Timings::default();
    let mut report = CvReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        smc: cfg.clone(),
        estimand,
        scheme: summary(scheme),
        baseline: None,
        asmc: None,
        psis: None,
        mcmc_refit: None,
        comparison: None,
    };
    if all || matches!(which, Estimator::Asmc | Estimator::Psis) {
        let t = Instant::now();
        let base =
            run_baseline_mcmc(model, &Exponents::ones(model.group_sizes()), cfg, &mut stream(seed, &[BASELINE]))?;
        timings.baseline = t.elapsed().as_secs_f64();
        report.baseline = Some(BaselineSummary::from_result(&base));
        if all || which == Estimator::Asmc {
            let t = Instant::now();
            let (res, fold_times) = run_asmc(model, &base, scheme, estimand, cfg, seed);
            timings.asmc = t.elapsed().as_secs_f64();
            timings.asmc_folds = fold_times;
            report.asmc = Some(res);
        }
        if all || which == Estimator::Psis {
            let t = Instant::now();
            report.psis = Some(run_psis(model, &base.draws, scheme, estimand, seed));
            timings.psis = t.elapsed().as_secs_f64();
        }
    }
    if all || which == Estimator::McmcRefit {
        let t = Instant::now();
        report.mcmc_refit = Some(run_refit(model, scheme, estimand, cfg, seed));
        timings.mcmc_refit = t.elapsed().as_secs_f64();
    }
    if let Some(refit) = &report.mcmc_refit {
        if report.asmc.is_some() || report.psis.is_some() {
            report.comparison = Some(compare(report.asmc.as_ref(), report.psis.as_ref(), refit));
        }
    }
    timings.total = start.elapsed().as_secs_f64();
    Ok(RunOutput { report, timings })
}

/// aSMC cross-validation over every fold of `scheme`.
pub fn run_cv<M: Model + ?Sized>(
    model: &M,
    scheme: &DeletionScheme,
    estimand: EstimandSpec,
    cfg: &SmcConfig,
    seed: u64,
) -> Result<CvReport> {
    run_estimators(model, scheme, estimand, cfg, seed, Estimator::Asmc).map(|o| o.report)
}

//! A quick in-process invariant suite for `asmc selftest`.

use asmc_core::engine::rng::stream;
use asmc_core::engine::{run_estimators, Action, Estimator, SmcConfig};
use asmc_core::models::{generate_synthetic, ConjugateGaussianModel, ConjugateShape, DnsShape, M5Shape, ModelOptions, RadonShape, Shape};
use asmc_core::scheme::{build_lgo_scheme, build_loo_scheme};
use asmc_core::weights::{ess, gpd_fit, log_sum_exp, normalize};
use asmc_core::{EstimandSpec, Exponents, Model, UnitIndex};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Check = (&'static str, fn() -> Result<String, String>);

pub const CHECKS: [Check; 6] = [
    ("weights", weights),
    ("gpd", gpd),
    ("models", models),
    ("conjugate-oracle", conjugate_oracle),
    ("psis-reduction", psis_reduction),
    ("determinism", determinism),
];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn weights() -> Result<String, String> {
    let mut rng = stream(0, &[1]);
    for case in 0..200 {
        let n = rng.random_range(1..200);
        let lw: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let c: f64 = rng.random_range(-500.0..500.0);
        let shifted: Vec<f64> = lw.iter().map(|v| v + c).collect();
        let a = normalize(&lw).map_err(|e| e.to_string())?;
        let b = normalize(&shifted).map_err(|e| e.to_string())?;
        let drift = a.normalized.iter().zip(&b.normalized).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure(drift <= 1e-12, || format!("case {case}: shift changed normalized weights by {drift:e}"))?;
        let e = ess(&a.normalized);
        ensure(e >= 1.0 && e <= n as f64 + 1e-9, || format!("case {case}: ESS {e} outside [1, {n}]"))?;
        let mut p = lw.clone();
        p.reverse();
        let (x, y) = (log_sum_exp(&lw).map_err(|e| e.to_string())?, log_sum_exp(&p).map_err(|e| e.to_string())?);
        ensure((x - y).abs() <= 1e-12 * (1.0 + x.abs()), || format!("case {case}: order changed log-sum-exp"))?;
    }
    Ok("200 random weight vectors".into())
}

fn gpd() -> Result<String, String> {
    let mut rng = stream(0, &[2]);
    let mut out = Vec::new();
    for k in [-0.2, 0.0, 0.5] {
        let mut v: Vec<f64> = (0..2000)
            .map(|_| {
                let u: f64 = rng.random();
                if k == 0.0 {
                    -(-u).ln_1p()
                } else {
                    ((-k * (-u).ln_1p()).exp() - 1.0) / k
                }
            })
            .collect();
        v.sort_by(f64::total_cmp);
        let (kh, _) = gpd_fit(&v).map_err(|e| e.to_string())?;
        ensure((kh - k).abs() <= 0.1, || format!("k={k}: estimated {kh:.3}"))?;
        out.push(format!("k={k}: {kh:.3}"));
    }
    Ok(out.join(", "))
}

fn models() -> Result<String, String> {
    let mut rng = stream(0, &[3]);
    let shapes = [
        Shape::Radon(RadonShape { groups: 4, max_size: 5, ..Default::default() }),
        Shape::Dns(DnsShape { months: 4, maturities: vec![2.0, 10.0, 30.0], ..Default::default() }),
        Shape::M5(M5Shape { stores: 3, departments: 2, items: 3 }),
        Shape::Conjugate(ConjugateShape { groups: 3, size: 2, ..Default::default() }),
    ];
    for shape in &shapes {
        let m = generate_synthetic(shape, &mut rng)
            .and_then(|s| s.data.into_model(&ModelOptions::default()))
            .map_err(|e| e.to_string())?;
        let x: Vec<f64> = m.initial_point().iter().map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let ones = Exponents::ones(m.group_sizes());
        let mut sum = m.log_prior(&x);
        for (g, &n) in m.group_sizes().iter().enumerate() {
            for i in 1..=n {
                sum += m.unit_log_lik(&x, UnitIndex::new(g + 1, i));
            }
        }
        let lt = m.log_target(&x, &ones);
        ensure((lt - sum).abs() <= 1e-9 * (1.0 + sum.abs()), || format!("{}: log target {lt} vs {sum}", m.name()))?;
        if m.supports_gradient() {
            let mut g = vec![0.0; x.len()];
            m.log_target_grad(&x, &ones, &mut g).ok_or("missing gradient")?;
            for j in 0..x.len() {
                let h = 1e-5 * (1.0 + x[j].abs());
                let (mut a, mut b) = (x.clone(), x.clone());
                a[j] += h;
                b[j] -= h;
                let num = (m.log_target(&a, &ones) - m.log_target(&b, &ones)) / (2.0 * h);
                ensure((num - g[j]).abs() <= 1e-5 * (1.0 + num.abs()), || {
                    format!("{} coordinate {j}: gradient {} vs finite difference {num}", m.name(), g[j])
                })?;
            }
        }
    }
    Ok("densities and gradients of all built-in models".into())
}

fn conjugate(seed: u64, groups: usize, size: usize) -> Result<ConjugateGaussianModel, String> {
    let shape = ConjugateShape { groups, size, ..Default::default() };
    let (d, _) = ConjugateGaussianModel::generate(&shape, &mut stream(seed, &[99])).map_err(|e| e.to_string())?;
    ConjugateGaussianModel::new(d, shape.params).map_err(|e| e.to_string())
}

fn conjugate_oracle() -> Result<String, String> {
    let m = conjugate(1, 5, 10)?;
    let scheme = build_lgo_scheme(m.group_sizes()).map_err(|e| e.to_string())?;
    let cfg = SmcConfig::default();
    let out = run_estimators(&m, &scheme, EstimandSpec::Joint, &cfg, 1, Estimator::Asmc).map_err(|e| e.to_string())?;
    let asmc = out.report.asmc.ok_or("no aSMC result")?;
    let mut worst = 0.0f64;
    for f in &asmc.folds {
        let o = m.oracle_joint(&scheme.folds[f.fold].units).map_err(|e| e.to_string())?;
        worst = worst.max((f.estimate - o).abs());
    }
    ensure(asmc.folds.len() == 5, || format!("{} of 5 folds completed", asmc.folds.len()))?;
    ensure(worst <= 0.25, || format!("worst fold error {worst:.3} nats"))?;
    Ok(format!("worst LGO fold error {worst:.3} nats"))
}

fn psis_reduction() -> Result<String, String> {
    let m = conjugate(2, 4, 5)?;
    let scheme = build_loo_scheme(m.group_sizes()).map_err(|e| e.to_string())?;
    let cfg = SmcConfig { particles: 500, ..SmcConfig::default() };
    let run = |e| run_estimators(&m, &scheme, EstimandSpec::Joint, &cfg, 2, e).map_err(|e| e.to_string());
    let asmc = run(Estimator::Asmc)?.report.asmc.ok_or("no aSMC result")?;
    let psis = run(Estimator::Psis)?.report.psis.ok_or("no PSIS result")?;
    let mut checked = 0;
    for f in asmc.folds.iter().filter(|f| f.trace.len() == 2 && f.final_action == Action::Psis) {
        let p = psis.fold(f.fold).ok_or("missing PSIS fold")?;
        ensure(f.estimate.to_bits() == p.estimate.to_bits(), || {
            format!("fold {}: aSMC {} vs PSIS {}", f.fold, f.estimate, p.estimate)
        })?;
        checked += 1;
    }
    ensure(checked > 0, || "no single-step PSIS folds to compare".into())?;
    Ok(format!("{checked} single-step folds bit-identical"))
}

fn determinism() -> Result<String, String> {
    let m = conjugate(3, 4, 5)?;
    let scheme = build_lgo_scheme(m.group_sizes()).map_err(|e| e.to_string())?;
    let cfg = SmcConfig { particles: 200, ..SmcConfig::default() };
    let mut outs = Vec::new();
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        let rep = pool
            .install(|| run_estimators(&m, &scheme, EstimandSpec::Joint, &cfg, 3, Estimator::Asmc))
            .map_err(|e| e.to_string())?
            .report;
        outs.push(serde_json::to_string(&rep).map_err(|e| e.to_string())?);
    }
    ensure(outs[0] == outs[1], || "reports differ between 1 and 3 threads".into())?;
    Ok("identical reports at 1 and 3 threads".into())
}

/// Runs every check, printing one line each. Returns whether all passed.
pub fn run_all(mut out: impl std::io::Write) -> bool {
    let mut ok = true;
    for (name, check) in CHECKS {
        let (tag, msg) = match check() {
            Ok(m) => ("PASS", m),
            Err(m) => {
                ok = false;
                ("FAIL", m)
            }
        };
        let _ = writeln!(out, "{tag} {name}: {msg}");
    }
    ok
}

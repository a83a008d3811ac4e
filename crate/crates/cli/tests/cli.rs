use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asmc_cli::report::{ReportFile, TRACE_HEADER};
use asmc_cli::{parse_config, THREADS_ENV};

fn asmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asmc")).args(args).env_remove(THREADS_ENV).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path, model: &str, shape: &str) -> PathBuf {
    let csv = dir.join(format!("{model}.csv"));
    ok(&asmc(&["synth", "--model", model, "--shape", shape, "--out", csv.to_str().unwrap(), "--seed", "3"]));
    csv
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn conjugate_config(dir: &Path, extra: &str) -> PathBuf {
    let csv = synth(dir, "conjugate", "groups=4,size=5");
    let body = format!(
        "seed = 11\n{extra}\n[model]\nkind = \"conjugate\"\n[data]\npath = {:?}\n[scheme]\nkind = \"lgo\"\n[smc]\nparticles = 200\n",
        csv.to_str().unwrap()
    );
    write_config(dir, "run.toml", &body)
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    asmc(&args)
}

fn read_report(dir: &Path) -> ReportFile {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn trace_rows(dir: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(dir.join("traces.csv")).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), TRACE_HEADER);
    r.records().map(Result::unwrap).collect()
}

#[test]
fn synth_then_run_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = conjugate_config(tmp.path(), "");
    assert!(tmp.path().join("conjugate.truth.json").exists());
    let out = tmp.path().join("out");
    let res = run(&cfg, &out, &["--threads", "2"]);
    ok(&res);
    assert!(String::from_utf8_lossy(&res.stdout).contains("asmc: elpd"));
    let rep = read_report(&out);
    let asmc = rep.report.asmc.as_ref().unwrap();
    assert_eq!(asmc.folds.len(), 4);
    assert!(asmc.aggregate.is_finite());
    let timings: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("timings.json")).unwrap()).unwrap();
    assert_eq!(timings["threads"], 2);

    let rows = trace_rows(&out);
    let expected: usize = asmc.folds.iter().map(|f| f.trace.len()).sum();
    assert_eq!(rows.len(), expected);
    for f in &asmc.folds {
        let n = rows.iter().filter(|r| r[0].parse::<usize>().unwrap() == f.fold).count();
        assert_eq!(n, f.trace.len());
        let first = rows.iter().find(|r| r[0].parse::<usize>().unwrap() == f.fold).unwrap();
        assert_eq!(&first[7], "baseline");
    }
}

#[test]
fn report_bytes_do_not_depend_on_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = conjugate_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let mut seen = Vec::new();
    for threads in ["1", "4"] {
        ok(&run(&cfg, &out, &["--threads", threads]));
        seen.push((std::fs::read(out.join("report.json")).unwrap(), std::fs::read(out.join("traces.csv")).unwrap()));
    }
    assert!(seen[0].0 == seen[1].0, "report.json differs between 1 and 4 threads");
    assert!(seen[0].1 == seen[1].1, "traces.csv differs between 1 and 4 threads");
}

#[test]
fn config_echo_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = conjugate_config(tmp.path(), "");
    let out = tmp.path().join("out");
    ok(&run(&cfg_path, &out, &[]));
    let rep = read_report(&out);
    let mut cfg = parse_config(&cfg_path).unwrap();
    cfg.output = out.clone();
    assert_eq!(rep.config, cfg.echo());
    let again = write_config(tmp.path(), "echo.toml", &rep.config.to_toml());
    assert_eq!(parse_config(&again).unwrap(), rep.config);
}

#[test]
fn all_estimators_produce_a_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = conjugate_config(tmp.path(), "");
    let out = tmp.path().join("out");
    ok(&run(&cfg, &out, &["--estimator", "all"]));
    let rep = read_report(&out).report;
    assert!(rep.asmc.is_some() && rep.psis.is_some() && rep.mcmc_refit.is_some());
    let cmp = rep.comparison.unwrap();
    assert_eq!(cmp.len(), 4);
    assert!(cmp.iter().all(|c| c.abs_err_asmc.is_some() && c.abs_err_psis.is_some()));
}

#[test]
fn psis_only_run_omits_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = conjugate_config(tmp.path(), "");
    let out = tmp.path().join("out");
    ok(&run(&cfg, &out, &["--estimator", "psis"]));
    assert!(out.join("report.json").exists());
    assert!(!out.join("traces.csv").exists());
}

#[test]
fn leave_end_out_traces_carry_checkpoint_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "seed = 2\n[model]\nkind = \"dns\"\n[data.synthetic]\nmonths = 8\nmaturities = [2.0, 10.0, 30.0]\n\
                [scheme]\nkind = \"leo-within\"\ngroup = 1\nt_min = 5\n[smc]\nparticles = 200\n";
    let cfg = write_config(tmp.path(), "leo.toml", body);
    let out = tmp.path().join("out");
    ok(&run(&cfg, &out, &[]));
    let rep = read_report(&out);
    let fold = &rep.report.asmc.as_ref().unwrap().folds[0];
    assert_eq!(fold.checkpoints.len(), 3);
    let rows = trace_rows(&out);
    let cps: Vec<_> = rows.iter().filter(|r| !r[10].is_empty()).collect();
    assert_eq!(cps.len(), 3);
    for (row, cp) in cps.iter().zip(&fold.checkpoints) {
        assert_eq!(row[8].parse::<f64>().unwrap(), cp.estimate.unwrap());
    }
}

#[test]
fn bad_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "seed = 0\n[model]\nkind = \"radon\"\n[scheme]\nkind = \"lgo\"\n[smc]\ness_ratio = 2.0\n");
    let res = run(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("smc.ess_ratio"));
    let res = run(&tmp.path().join("missing.toml"), &tmp.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn bad_data_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("broken.csv");
    std::fs::write(&csv, "group,y\n1,0.5\n1,abc\n").unwrap();
    let body = format!(
        "seed = 0\n[model]\nkind = \"conjugate\"\n[data]\npath = {:?}\n[scheme]\nkind = \"lgo\"\n",
        csv.to_str().unwrap()
    );
    let cfg = write_config(tmp.path(), "run.toml", &body);
    let res = run(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 3"));
}

#[test]
fn thread_environment_variable_is_honoured() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = conjugate_config(tmp.path(), "threads = 1");
    let out = tmp.path().join("out");
    let res = Command::new(env!("CARGO_BIN_EXE_asmc"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env(THREADS_ENV, "3")
        .output()
        .unwrap();
    ok(&res);
    let timings: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("timings.json")).unwrap()).unwrap();
    assert_eq!(timings["threads"], 3);
    let res = Command::new(env!("CARGO_BIN_EXE_asmc"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env(THREADS_ENV, "zero")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let res = asmc(&["selftest"]);
    ok(&res);
    let text = String::from_utf8_lossy(&res.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS ")).count(), 6, "{text}");
}

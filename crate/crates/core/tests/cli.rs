use std::path::Path;
use std::process::Command as Proc;

use mpamp_core::allocation::AllocationPlan;
use mpamp_core::cli::*;
use mpamp_core::Error;
use serde_json::{json, Value};

fn base(eps: f64, mode: &str, dir: &Path) -> Value {
    json!({
        "name": format!("{mode}-{eps}"),
        "problem": { "n": 2000, "m": 600, "p": 30, "snr_db": 20.0, "seed": 3 },
        "prior": { "epsilon": eps, "mu_s": 0.0, "sigma_s": 1.0 },
        "mode": mode,
        "rd": { "kind": "gaussian" },
        "output_dir": dir.join(mode).to_str().unwrap(),
    })
}

fn cfg(v: Value) -> ExperimentConfig {
    ExperimentConfig::from_value(v).unwrap()
}

fn field_of(err: Error) -> String {
    match err {
        Error::Config { field, .. } => field,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn defaults_and_special_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(base(0.05, "dp", dir.path()));
    assert_eq!(c.iterations, Iterations::Auto);
    assert_eq!(c.dp.r_total, Budget::TwoT);
    assert_eq!(c.dp.delta_r, 0.1);
    assert_eq!(c.steady_tol_db, 0.1);
    assert_eq!(c.resolve_iterations().unwrap(), 10);
    assert_eq!(c.dp.r_total.resolve(10), 20.0);
    let mut v = base(0.05, "dp", dir.path());
    v["iterations"] = json!(4);
    v["dp"] = json!({ "r_total": 7.5 });
    let c = cfg(v);
    assert_eq!(c.iterations, Iterations::Fixed(4));
    assert_eq!(c.dp.r_total, Budget::Bits(7.5));
    // Serialization round-trips the tokens.
    let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn validation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(0.05, "dp", dir.path());
    v["dp"] = json!({ "delta_r": -0.1 });
    assert_eq!(
        field_of(ExperimentConfig::from_value(v).unwrap_err()),
        "dp.delta_r"
    );

    let mut v = base(0.05, "bt", dir.path());
    v["bt_policy"] = json!({ "gamma": 0.9 });
    assert_eq!(
        field_of(ExperimentConfig::from_value(v).unwrap_err()),
        "bt_policy"
    );

    let mut v = base(0.05, "bt", dir.path());
    v["problem"]["m"] = json!(601);
    assert_eq!(
        field_of(ExperimentConfig::from_value(v).unwrap_err()),
        "problem"
    );

    let mut v = base(0.05, "bt", dir.path());
    v["prior"]["epsilon"] = json!(1.5);
    assert_eq!(
        field_of(ExperimentConfig::from_value(v).unwrap_err()),
        "prior"
    );

    for bad in [json!("3T"), json!(-1.0)] {
        let mut v = base(0.05, "dp", dir.path());
        v["dp"] = json!({ "r_total": bad });
        assert!(ExperimentConfig::from_value(v).is_err());
    }
    let mut v = base(0.05, "dp", dir.path());
    v["iterations"] = json!(0);
    assert!(ExperimentConfig::from_value(v).is_err());
    let mut v = base(0.05, "dp", dir.path());
    v["unexpected"] = json!(1);
    assert!(ExperimentConfig::from_value(v).is_err());
    let mut v = base(0.05, "dp", dir.path());
    v["mode"] = json!("fast");
    assert!(ExperimentConfig::from_value(v).is_err());
}

#[test]
fn overrides_replace_file_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, base(0.05, "bt", dir.path()).to_string()).unwrap();
    let c = ExperimentConfig::load(
        &path,
        &[
            "problem.seed=11".into(),
            "bt_policy.gamma=1.02".into(),
            "iterations=auto".into(),
            "coder=ideal".into(),
        ],
    )
    .unwrap();
    assert_eq!(c.problem.seed, 11);
    assert_eq!(c.bt_policy.gamma, 1.02);
    assert_eq!(c.iterations, Iterations::Auto);
    assert_eq!(c.coder, mpamp_core::mpamp::Coder::Ideal);
    let mut v = json!({ "a": 1 });
    assert!(apply_override(&mut v, "no-equals").is_err());
    assert!(apply_override(&mut v, "a.b=2").is_err());
    assert!(ExperimentConfig::load(&dir.path().join("missing.json"), &[]).is_err());
}

#[test]
fn uncompressed_matches_centralized() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(0.05, "mp-uncompressed", dir.path());
    v["iterations"] = json!(8);
    let r = run_experiment(&cfg(v)).unwrap();
    for row in &r.trace {
        let (c, d) = (row.sdr_c_db, row.sdr_d_db);
        assert!(
            c == d || ((c - d) / c).abs() < 1e-8,
            "t={}: {c} vs {d}",
            row.t
        );
    }
    let mut v = base(0.05, "centralized", dir.path());
    v["iterations"] = json!(8);
    let c = run_experiment(&cfg(v)).unwrap();
    assert_eq!(c.summary.total_bits, 0.0);
    for (a, b) in c.trace.iter().zip(&r.trace) {
        assert_eq!(a.sdr_c_db, b.sdr_c_db);
    }
}

#[test]
fn dp_ideal_total_is_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(0.03, "dp", dir.path());
    v["coder"] = json!("ideal");
    let r = run_experiment(&cfg(v)).unwrap();
    assert_eq!(r.summary.iterations, 8);
    assert!((r.summary.total_bits - 16.0).abs() < 1e-9);
    assert_eq!(r.summary.plan_total_bits, Some(r.summary.total_bits));
    assert_eq!(r.summary.config.iterations, Iterations::Fixed(8));
    assert_eq!(r.summary.config.dp.r_total, Budget::Bits(16.0));
}

#[test]
fn dp_ecsq_plan_convention_total() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(0.1, "dp", dir.path());
    v["iterations"] = json!(20);
    // Coarser budget grid keeps this test quick; the acceptance suite uses 0.1.
    v["dp"] = json!({ "delta_r": 0.5 });
    let r = run_experiment(&cfg(v)).unwrap();
    let plan = r.summary.plan_ecsq_total_bits.unwrap();
    assert!((plan - 45.10).abs() < 0.01, "{plan}");
    // Measured coded bits sit near the convention.
    assert!((r.summary.total_bits - plan).abs() < 0.05 * 20.0);
}

#[test]
fn report_files_and_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(0.05, "bt", dir.path());
    v["iterations"] = json!(6);
    let c = cfg(v);
    let r = run_experiment(&c).unwrap();
    write_report(&r, &c.output_dir).unwrap();
    let trace = std::fs::read_to_string(c.output_dir.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), TRACE_HEADER);
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.len() == 9));
    // Totals equal trace sums exactly.
    let sum: f64 = r.trace.iter().map(|t| t.rate_bits).sum();
    assert_eq!(r.summary.total_bits, sum);
    assert_eq!(r.trace.last().unwrap().cum_bits, sum);
    assert!(r.trace.windows(2).all(|w| w[1].cum_bits >= w[0].cum_bits));
    let summary: Summary =
        serde_json::from_str(&std::fs::read_to_string(c.output_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary, r.summary);
    assert_eq!(summary.code_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(cached_summary(&c), Some(summary));

    // Byte-identical reruns.
    let again = run_experiment(&c).unwrap();
    assert_eq!(trace_csv(&again.trace), trace);
}

#[test]
fn dp_run_writes_a_readable_plan() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base(0.05, "dp", dir.path());
    v["iterations"] = json!(4);
    v["dp"] = json!({ "delta_r": 0.25 });
    let c = cfg(v);
    let r = run_experiment(&c).unwrap();
    write_report(&r, &c.output_dir).unwrap();
    let plan = AllocationPlan::read(&c.output_dir.join("plan.csv")).unwrap();
    assert_eq!(Some(plan), r.plan);
}

#[test]
fn number_formatting() {
    assert_eq!(fmt9(f64::INFINITY), "inf");
    assert_eq!(fmt9(1.0), "1.00000000e0");
    let x = 0.123456789123;
    assert_eq!(fmt9(x).parse::<f64>().unwrap(), 0.123456789);
}

fn summary(eps: f64, mode: &str, dir: &Path) -> Summary {
    let mut v = base(eps, mode, dir);
    v["iterations"] = json!(3);
    v["dp"] = json!({ "delta_r": 0.5 });
    run_experiment(&cfg(v)).unwrap().summary
}

#[test]
fn totals_table_marks_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let s = [
        summary(0.05, "dp", dir.path()),
        summary(0.05, "bt", dir.path()),
    ];
    let table = totals_table(&s);
    assert_eq!(table.epsilons, vec![0.03, 0.05, 0.10]);
    assert!(!table.is_complete());
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.rows[2].1, vec![None, Some(6.0), None]);
    assert_eq!(table.rows[3].1[1], Some(6.0 + 3.0 * 0.255));
    assert!(table.rows[0].1[1].is_some() && table.rows[1].1[1].is_some());
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.contains("DP-MP-AMP (RD prediction),-,6.00,-,16.00,20.00,40.00"));
    assert!(csv.contains("BT-MP-AMP (ECSQ simulation)"));
    assert!(totals_table(&[])
        .rows
        .iter()
        .all(|(_, v)| v.iter().all(Option::is_none)));
}

#[test]
fn binary_verbs() {
    let exe = env!("CARGO_BIN_EXE_mpamp");
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = Proc::new(exe).arg("table1").arg(&empty).output().unwrap();
    assert!(!out.status.success());

    let cfgs = dir.path().join("cfgs");
    std::fs::create_dir(&cfgs).unwrap();
    let mut v = base(0.05, "dp", dir.path());
    v["iterations"] = json!(3);
    v["dp"] = json!({ "delta_r": 0.5 });
    std::fs::write(cfgs.join("dp.json"), v.to_string()).unwrap();
    let path = cfgs.join("dp.json");

    let se = Proc::new(exe)
        .arg("se")
        .arg(&path)
        .arg("--iterations")
        .arg("auto")
        .output()
        .unwrap();
    assert!(
        se.status.success(),
        "{}",
        String::from_utf8_lossy(&se.stderr)
    );
    assert!(String::from_utf8_lossy(&se.stdout).contains("T = 10"));
    let se_csv = std::fs::read_to_string(dir.path().join("dp/se.csv")).unwrap();
    assert!(se_csv.starts_with("t,sigma2,sdr_db\n"));

    let alloc = Proc::new(exe).arg("allocate").arg(&path).output().unwrap();
    assert!(alloc.status.success());
    assert!(dir.path().join("dp/plan.csv").exists());
    assert!(dir.path().join("dp/plan_ecsq.csv").exists());

    let run = Proc::new(exe)
        .arg("run")
        .arg(&path)
        .arg("--seed")
        .arg("5")
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let s: Summary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("dp/summary.json")).unwrap())
            .unwrap();
    assert_eq!(s.config.problem.seed, 5);

    let table = Proc::new(exe)
        .arg("table1")
        .arg(&cfgs)
        .arg("--out")
        .arg(dir.path().join("t.csv"))
        .output()
        .unwrap();
    assert!(table.status.success());
    let t = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(t.contains("DP-MP-AMP (RD prediction),-,6.00,-"));

    let bad = Proc::new(exe)
        .arg("run")
        .arg(dir.path().join("nope.json"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bpagg::testing::{no_offspring_model, scalar_model};

fn bpagg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpagg"))
        .args(args)
        .output()
        .unwrap()
}

fn model_file(dir: &Path, name: &str, model: &bpagg::model::BranchingModel) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(model).unwrap()).unwrap();
    path
}

#[test]
fn moments_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let m = model_file(dir.path(), "m.json", &scalar_model());
    let out = bpagg(&["moments", "--model", m.to_str().unwrap(), "--order", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["sigma"][0][0].as_f64().unwrap(), 6.0);
    assert!(rep["kron3"].is_null());
    assert!(
        rep["residuals"]["help6"].as_f64().unwrap() <= rep["tolerances"]["help6"].as_f64().unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"p":1,"offspring":[{"kind":"finite","support":[{"v":[0],"p":0.7}]}],"immigration":{"kind":"independent","marginals":[{"dist":"poisson","lambda":1}]}}"#).unwrap();
    let out = bpagg(&["moments", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sum to"));

    let critical = dir.path().join("crit.json");
    std::fs::write(&critical, r#"{"p":1,"offspring":[{"kind":"independent","marginals":[{"dist":"point","c":1}]}],"immigration":{"kind":"independent","marginals":[{"dist":"poisson","lambda":1}]}}"#).unwrap();
    let out = bpagg(&["moments", "--model", critical.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("subcritical"));

    assert_eq!(bpagg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bpagg(&["--help"]).status.code(), Some(0));
}

#[test]
fn exit_code_tracks_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let m = model_file(dir.path(), "m.json", &no_offspring_model());
    let out = dir.path().join("e.json");
    let code = bpagg(&[
        "verify",
        "ergodic",
        "--model",
        m.to_str().unwrap(),
        "--n",
        "150",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .code();
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(
        code,
        Some(if rep["pass"].as_bool().unwrap() { 0 } else { 3 })
    );
    assert!(rep["notes"][0]
        .as_str()
        .unwrap()
        .starts_with("insufficient_n"));
}

#[test]
fn clt_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = model_file(dir.path(), "m.json", &scalar_model());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = bpagg(&[
            "verify",
            "clt",
            "--model",
            m.to_str().unwrap(),
            "--n",
            "200",
            "--copies",
            "50",
            "--reps",
            "2000",
            "--grid",
            "0.5,1.0",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ])
        .status;
        assert_eq!(status.code(), Some(0));
        (
            std::fs::read(&out).unwrap(),
            std::fs::read(out.with_extension("csv")).unwrap(),
        )
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn threads_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let m = model_file(dir.path(), "m.json", &scalar_model());
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_bpagg"))
            .env("BPAGG_THREADS", threads)
            .args([
                "aggregate",
                "--model",
                m.to_str().unwrap(),
                "--copies",
                "30",
                "--seed",
                "3",
            ])
            .output()
            .unwrap()
    };
    let (a, b) = (run("1"), run("3"));
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn simulate_and_aggregate_csv() {
    let dir = tempfile::tempdir().unwrap();
    let m = model_file(dir.path(), "m.json", &scalar_model());
    let paths = dir.path().join("paths.csv");
    let out = bpagg(&[
        "simulate",
        "--model",
        m.to_str().unwrap(),
        "--n",
        "10",
        "--copies",
        "3",
        "--seed",
        "5",
        "--out",
        paths.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&paths).unwrap();
    assert!(text.starts_with("copy,k,x_1\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 11);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("paths.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["master_seed"], 5);
    assert_eq!(meta["burnin"], 100);

    let out = bpagg(&[
        "aggregate",
        "--model",
        m.to_str().unwrap(),
        "--n",
        "10",
        "--copies",
        "3",
        "--grid",
        "0,0.5,1",
        "--unscaled",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,s_1"));
    assert_eq!(lines.next(), Some("0,0"));

    let out = bpagg(&[
        "aggregate",
        "--model",
        m.to_str().unwrap(),
        "--n",
        "10",
        "--grid",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ginar_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("g.json");
    std::fs::write(&spec, r#"{"order":1,"offspring":[{"dist":"bernoulli","q":0.5}],"immigration":{"dist":"poisson","lambda":1.0}}"#).unwrap();
    let out = bpagg(&["ginar", "--spec", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let c = rep["scalar_limit_std"].as_f64().unwrap();
    assert!((c * c - 6.0).abs() < 1e-12);
    assert_eq!(rep["polynomial"]["regime"], "subcritical");
}

#[test]
fn short_horizon_near_criticality_fails_with_3() {
    // at n = 5 the aggregate of a ρ = 0.95 chain is far from its limit variance
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("slow.json");
    let out = bpagg(&[
        "ginar",
        "--means",
        "0.95",
        "--embed-out",
        m.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = bpagg(&[
        "verify",
        "clt",
        "--model",
        m.to_str().unwrap(),
        "--n",
        "5",
        "--copies",
        "20",
        "--reps",
        "1000",
        "--grid",
        "1.0",
        "--format",
        "csv",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL"));
}

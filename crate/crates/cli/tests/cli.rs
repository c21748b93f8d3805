use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_switchcert"))
        .args(args)
        .env_remove("SWITCHCERT_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn check_sos_writes_a_verifiable_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("cert.json");
    let out = run(&["check-sos", p(&corpus("square_binomial.json")), "--out", p(&cert)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["verdict"], "feasible");
    let out = run(&["verify", p(&cert)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["passed"], true);
}

#[test]
fn nonconvex_v_is_rejected_by_every_formulation() {
    for f in ["hessian", "gradient", "lambda"] {
        let out = run(&[
            "check-sosconvex",
            p(&corpus("product_pair_nonconvex_v.json")),
            "--formulation",
            f,
        ]);
        assert_eq!(out.status.code(), Some(2), "{f}");
    }
    let out = run(&["check-sosconvex", p(&corpus("quadratic_pair_reference_v.json"))]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn shipped_certificates_verify() {
    for (cert, system) in [
        ("quadratic_pair_roa.json", "quadratic_pair.json"),
        ("quadratic_pair_roa_joint.json", "quadratic_pair.json"),
        ("product_pair_roa.json", "product_pair.json"),
    ] {
        let out = run(&["verify", p(&corpus(cert)), "--system", p(&corpus(system))]);
        assert_eq!(out.status.code(), Some(0), "{cert}: {}", String::from_utf8_lossy(&out.stdout));
    }
}

#[test]
fn tampered_certificate_fails() {
    let text = std::fs::read_to_string(corpus("product_pair_roa.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["certificate"]["beta"] = serde_json::json!(4.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = run(&["verify", p(&path), "--system", p(&corpus("product_pair.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["passed"], false);
}

#[test]
fn verify_without_system_is_an_input_error() {
    let out = run(&["verify", p(&corpus("product_pair_roa.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_half_weights_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("traj.csv");
    let out = run(&[
        "simulate",
        p(&corpus("product_pair.json")),
        "--x0",
        "3,3",
        "--policy",
        "fixed:0.5,0.5",
        "--monitor",
        p(&corpus("product_pair_nonconvex_v.json")),
        "--out",
        p(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let s = stdout_json(&out);
    assert_eq!(s["termination"], "diverged");
    assert_eq!(s["strict_decrease"], false);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,x1,x2,V"));
    assert!(lines.next().unwrap().starts_with("0,3,3,"));
    assert!(lines.next().unwrap().starts_with("1,4.5,4.5,"));
}

#[test]
fn simulate_is_reproducible() {
    let sys = corpus("quadratic_pair.json");
    let args = [
        "simulate",
        p(&sys),
        "--x0",
        "0.2,0.4",
        "--policy",
        "hull2",
        "--seed",
        "11",
    ];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout_json(&a)["termination"], "converged_below");
}

#[test]
fn negative_initial_states_parse() {
    let out = run(&["simulate", p(&corpus("contraction.json")), "--x0", "-1,2", "--policy", "fixed:1"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["termination"], "converged_below");
}

#[test]
fn synth_and_jsr_certificates_verify() {
    let dir = tempfile::tempdir().unwrap();
    let sys = corpus("ando_shih_0.5.json");
    let cert = dir.path().join("lyap.json");
    let out = run(&["synth", p(&sys), "--degree", "2", "--convex", "--out", p(&cert)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(run(&["verify", p(&cert), "--system", p(&sys)]).status.code(), Some(0));

    let cert = dir.path().join("jsr.json");
    let out = run(&["jsr", p(&sys), "--degree", "2", "--out", p(&cert)]);
    assert_eq!(out.status.code(), Some(0));
    let upper = stdout_json(&out)["upper"].as_f64().unwrap();
    assert!((upper - 0.5 * 2f64.sqrt()).abs() < 0.01, "{upper}");
    assert_eq!(run(&["verify", p(&cert), "--system", p(&sys)]).status.code(), Some(0));
}

#[test]
fn synth_reports_infeasible_quadratic() {
    let out = run(&["synth", p(&corpus("ando_shih_0.9.json")), "--degree", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn multi_enumerates_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let sys = corpus("ando_shih_0.9.json");
    let cert = dir.path().join("multi.json");
    let out = run(&["multi", p(&sys), "--k", "2", "--degree", "2", "--out", p(&cert)]);
    assert_eq!(out.status.code(), Some(0));
    let s = stdout_json(&out);
    assert_eq!(s["assignment"]["k"], 2);
    assert_eq!(run(&["verify", p(&cert), "--system", p(&sys)]).status.code(), Some(0));

    // the certified assignment again, given explicitly
    let table = dir.path().join("assignment.json");
    std::fs::write(&table, s["assignment"].to_string()).unwrap();
    let out = run(&["multi", p(&sys), "--k", "2", "--degree", "2", "--assignment", p(&table)]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn multi_refuses_huge_enumerations() {
    let out = run(&[
        "--json-errors",
        "multi",
        p(&corpus("ando_shih_0.5.json")),
        "--k",
        "4",
        "--degree",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "enumeration_too_large");
}

#[test]
fn roa_with_levelset() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("level.csv");
    let cert = dir.path().join("roa.json");
    let sys = corpus("product_pair.json");
    let out = run(&[
        "roa",
        p(&sys),
        "--v",
        p(&corpus("unit_disk_v.json")),
        "--deg-mult",
        "2",
        "--beta",
        "1",
        "--levelset",
        p(&csv),
        "--out",
        p(&cert),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 721);
    assert_eq!(text.lines().next(), Some("angle,x1,x2"));
    assert_eq!(run(&["verify", p(&cert), "--system", p(&sys)]).status.code(), Some(0));
}

#[test]
fn roa_on_unstable_linearization() {
    let dir = tempfile::tempdir().unwrap();
    let sys = dir.path().join("expanding.json");
    std::fs::write(&sys, r#"{"n": 2, "modes": [{"matrix": [[1.1, 0], [0, 1.1]]}]}"#).unwrap();
    let out = run(&["--json-errors", "roa", p(&sys), "--deg-v", "2", "--deg-mult", "2"]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "linearization_not_certified_stable");
}

#[test]
fn malformed_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = run(&["--json-errors", "check-sos", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "malformed_json");
    assert_eq!(err["exit_code"], 1);

    let out = run(&["check-sos", p(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["simulate", p(&corpus("product_pair.json")), "--x0", "1", "--policy", "hull"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["--json-errors", "synth", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn thread_count_from_environment() {
    let sys = corpus("ando_shih_0.5.json");
    let ok = Command::new(env!("CARGO_BIN_EXE_switchcert"))
        .args(["synth", p(&sys), "--degree", "2"])
        .env("SWITCHCERT_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let bad = Command::new(env!("CARGO_BIN_EXE_switchcert"))
        .args(["synth", p(&sys), "--degree", "2"])
        .env("SWITCHCERT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn output_is_byte_stable() {
    let v = corpus("quadratic_pair_reference_v.json");
    let args = ["check-sosconvex", p(&v)];
    assert_eq!(run(&args).stdout, run(&args).stdout);
}

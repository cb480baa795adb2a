use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfa_core::action::action;
use mfa_core::ot_hjb::EulerianField1D;
use mfa_core::potentials::PotentialSpec;
use mfa_core::{PathEnsemble, TimeGrid};
use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn mfa(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mfa"));
    cmd.args(args).env_remove("MFA_THREADS");
    if let Some(t) = threads {
        cmd.env("MFA_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn run(command: &str, cfg: &Path, out: &Path) -> Output {
    mfa(
        &[
            command,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    )
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn error_kind(o: &Output) -> String {
    let v: Value = serde_json::from_slice(&o.stderr).expect("stderr is JSON");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn read_ensemble(path: &Path, grid: TimeGrid, d: usize) -> PathEnsemble {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(&headers[0], "t");
    assert_eq!(&headers[1], "path_id");
    assert_eq!(&headers[2], "weight");
    assert_eq!(headers.len(), 3 + 2 * d);
    let mut paths: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut weights = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let k: usize = rec[1].parse().unwrap();
        if k == paths.len() {
            paths.push(Vec::new());
            weights.push(rec[2].parse().unwrap());
        }
        paths[k].push((0..d).map(|c| rec[3 + c].parse().unwrap()).collect());
    }
    PathEnsemble::new(grid, paths, weights).unwrap()
}

#[test]
fn optimize_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("optimize", &config("figure1.json"), &a)
        .status
        .success());
    let single = mfa(
        &[
            "optimize",
            "--config",
            config("figure1.json").to_str().unwrap(),
            "--out",
            b.to_str().unwrap(),
        ],
        Some("1"),
    );
    assert!(single.status.success());
    for f in ["trajectories.csv", "report.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let r = report(&a);
    assert!(r["final_action"].as_f64().unwrap() < r["straight_line_action"].as_f64().unwrap());
    let ens = read_ensemble(
        &a.join("trajectories.csv"),
        TimeGrid::new(1.0, 40).unwrap(),
        2,
    );
    let value = action(
        &ens,
        &PotentialSpec::quadratic_kinetic(),
        &PotentialSpec::quadratic_position(50.0),
    )
    .unwrap()
    .total;
    assert!((value - r["final_action"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn relax_split_statistic_gives_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("relax", &config("relax_split.json"), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = report(dir.path())["result"]["value"].as_f64().unwrap();
    assert!((v - 1.0).abs() < 1e-2);
}

#[test]
fn audit_records_failure_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("audit", &config("audit_alpha.json"), dir.path());
    assert!(o.status.success());
    assert_eq!(report(dir.path())["audit"]["pass"], Value::Bool(false));
}

#[test]
fn vlasov_reports_small_residual() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run("vlasov", &config("vlasov_newton.json"), dir.path())
        .status
        .success());
    let r = report(dir.path());
    assert!(r["weak_residual"].as_f64().unwrap() < 1e-4);
    assert!(r["momentum_drift"].as_f64().unwrap() < 1e-8);
    let text = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert!(text.starts_with("t,path_id,weight,x0,v0\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 501);
}

#[test]
fn hjb_field_reimports() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("hjb", &config("hjb.json"), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    let grid = TimeGrid::new(1.0, 40).unwrap();
    let text = fs::read_to_string(dir.path().join("field.csv")).unwrap();
    let field = EulerianField1D::from_csv(&text, grid, -1.5, 1.5, f64::INFINITY).unwrap();
    assert!((field.continuity_residual - r["continuity_residual"].as_f64().unwrap()).abs() < 1e-12);
    let e = mfa_core::ot_hjb::eulerian_action(
        &field,
        &PotentialSpec::quadratic_kinetic(),
        &PotentialSpec::quadratic_position(1.0),
    )
    .unwrap();
    assert!((e - r["eulerian_action"].as_f64().unwrap()).abs() < 1e-9);
    assert!(r["hjb"]["max_deviation"].as_f64().unwrap() < 1e-3);
}

#[test]
fn converge_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: Value =
        serde_json::from_str(&fs::read_to_string(config("converge.json")).unwrap()).unwrap();
    let mut small = cfg.clone();
    small["converge"]["particles"] = serde_json::json!([2, 4]);
    let path = dir.path().join("c.json");
    fs::write(&path, small.to_string()).unwrap();
    let out = dir.path().join("out");
    assert!(run("converge", &path, &out).status.success());
    let text = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert!(text.starts_with("n,n_ref,distance,action_n,action_ref\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"psi": {"kind": "quadratic_kinetic"}, "grid": {"horizon": 1, "steps": 4}, "colour": 3}"#).unwrap();
    let o = run("optimize", &path, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "config");

    fs::write(
        &path,
        r#"{"psi": {"kind": "quadratic_kinetic"}, "grid": {"horizon": 1, "steps": 4}}"#,
    )
    .unwrap();
    let o = run("optimize", &path, dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = run("relax", &config("relax_split.json"), dir.path());
    assert!(o.status.success());
    let o = mfa(
        &[
            "relax",
            "--config",
            config("relax_split.json").to_str().unwrap(),
        ],
        Some("zero"),
    );
    assert_eq!(o.status.code(), Some(2));

    fs::write(
        &path,
        r#"{"psi": {"kind": "two_well"}, "grid": {"horizon": 1, "steps": 4},
        "coupling": {"pairs": [{"x0": [0], "x_t": [1]}]}}"#,
    )
    .unwrap();
    let o = run("optimize", &path, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "non_smooth");
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value =
        serde_json::from_str(&fs::read_to_string(config("vlasov_newton.json")).unwrap()).unwrap();
    cfg["vlasov"]["options"] = serde_json::json!({ "fptol": 1e-14, "max_picard": 1 });
    let path = dir.path().join("v.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = run("vlasov", &path, dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_kind(&o), "picard_non_convergence");
}

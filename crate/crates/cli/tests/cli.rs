use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn labelshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelshift")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_requires_seed() {
    let out = labelshift(&["simulate", "--phi", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn simulate_writes_tables_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let args = [
        "simulate", "--seed", "3", "--phi", "0,1", "--replications", "2", "--n", "500", "--bootstrap-b", "10",
        "--model-kind", "naive-bayes", "--out", path(&out_dir),
    ];
    stdout(&labelshift(&args));
    let estimates = fs::read_to_string(out_dir.join("estimates.csv")).unwrap();
    let mut lines = estimates.lines();
    assert_eq!(lines.next().unwrap(), "phi,seed,method,point,ci_low,ci_high,abs_error,calibrated");
    assert_eq!(lines.count(), 2 * 2 * 8);
    let coherence = fs::read_to_string(out_dir.join("coherence.csv")).unwrap();
    assert_eq!(coherence.lines().count(), 1 + 2 * 2 * 2);
    assert_eq!(fs::read_to_string(out_dir.join("errors.csv")).unwrap().trim(), "phi,seed,error");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["links"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["cells"].as_array().unwrap().len(), 4);
    assert!(manifest["cells"][0]["run"]["outcome_platt"]["params"]["inv_temperature"].is_number());

    let again = dir.path().join("again");
    let mut args2 = args.to_vec();
    let last = args2.len() - 1;
    args2[last] = path(&again);
    stdout(&labelshift(&args2));
    for file in ["estimates.csv", "coherence.csv", "summary.csv", "coherence_summary.csv", "manifest.json"] {
        assert_eq!(fs::read(out_dir.join(file)).unwrap(), fs::read(again.join(file)).unwrap(), "{file} differs");
    }
}

#[test]
fn induce_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let complete = dir.path().join("complete.csv");
    let mut text = String::from("m,y,x0,x1,x2\n");
    for i in 0..400u32 {
        let y = u32::from(i % 3 == 0);
        let x = |k: u32| u32::from((i * 7 + k * 13 + y * 5) % 10 < 4 + 3 * y);
        text.push_str(&format!("0,{y},{},{},{}\n", x(0), x(1), x(2)));
    }
    fs::write(&complete, text).unwrap();
    let induced = dir.path().join("induced.csv");
    let out = labelshift(&[
        "induce", "--input", path(&complete), "--phi", "1", "--seed", "5", "--output", path(&induced),
        "--with-oracle", "--mu0-target", "0.25", "--mu1-target", "0.45",
    ]);
    assert!(stdout(&out).contains("beta0="));
    let header = fs::read_to_string(&induced).unwrap();
    assert!(header.starts_with("m,y,x0,x1,x2,y_oracle"));

    let results = dir.path().join("results");
    let out = labelshift(&[
        "estimate", "--input", path(&induced), "--seed", "1", "--bootstrap-b", "10", "--out", path(&results),
    ]);
    let text = stdout(&out);
    assert!(text.contains("cproxy"));
    assert!(text.contains("oracle missing-case prevalence"));
    let estimates = fs::read_to_string(results.join("estimates.csv")).unwrap();
    assert_eq!(estimates.lines().count(), 1 + 7);
    assert!(estimates.lines().nth(1).unwrap().starts_with(",1,cc,"));
    assert!(results.join("manifest.json").exists());
}

#[test]
fn estimate_reports_validation_row() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "m,y,x0\n0,1,1\n1,1,0\n").unwrap();
    let out = labelshift(&["estimate", "--input", path(&bad), "--out", path(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn oracle_grid_agrees_with_em() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.txt");
    fs::write(&scores, "0.9\n0.8\n0.1\n").unwrap();
    let text = stdout(&labelshift(&["oracle", "grid", "--scores", path(&scores), "--source-prevalence", "0.5"]));
    let gap: f64 = text.lines().find_map(|l| l.strip_prefix("gap=")).unwrap().parse().unwrap();
    assert!(gap <= 1e-4);
}

#[test]
fn oracle_joint_identity_at_phi_one() {
    let text = stdout(&labelshift(&["oracle", "joint", "--phi", "1"]));
    let gap: f64 = text.lines().find_map(|l| l.strip_prefix("max_gap=")).unwrap().parse().unwrap();
    assert!(gap <= 1e-10);
    assert_eq!(text.lines().filter(|l| l.split(' ').count() == 4 && !l.starts_with('x')).count(), 8);
}

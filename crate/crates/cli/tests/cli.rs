use std::path::PathBuf;
use std::process::{Command, Output};

fn edft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edft")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn fixtures_list_names_every_fixture() {
    let out = edft(&["fixtures", "list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ensemble_dft::fixtures::names() {
        assert!(text.contains(name), "{name} missing");
    }
}

#[test]
fn validate_accepts_shown_fixture_and_reports_all_violations() {
    let dir = scratch("validate");
    let shown = edft(&["fixtures", "show", "toy-metal"]);
    assert!(shown.status.success());
    let good = dir.join("good.toml");
    std::fs::write(&good, &shown.stdout).unwrap();
    assert!(edft(&["validate", "--config", good.to_str().unwrap()]).status.success());

    let text = String::from_utf8(shown.stdout).unwrap()
        .replace("weights = [1.0, 1.0]", "weights = [1.0, 0.7]")
        .replace("sigma = 0.025", "sigma = -0.025");
    let bad = dir.join("bad.toml");
    std::fs::write(&bad, text).unwrap();
    let out = edft(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("weights") && err.contains("smearing"), "{err}");
}

#[test]
fn unknown_inputs_exit_with_input_code() {
    assert_eq!(edft(&["run", "--fixture", "nope"]).status.code(), Some(2));
    assert_eq!(edft(&["run", "--fixture", "free-electron", "--algo", "pcg-s4"]).status.code(), Some(2));
    assert_eq!(edft(&["validate", "--config", "/nonexistent/x.toml"]).status.code(), Some(3));
}

fn last_error(csv: &str) -> f64 {
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "error").unwrap();
    csv.lines().last().unwrap().split(',').nth(col).unwrap().parse().unwrap()
}

#[test]
fn runs_are_byte_identical_and_summary_matches_log() {
    let a = scratch("det-a");
    let b = scratch("det-b");
    for d in [&a, &b] {
        let out = edft(&["run", "--fixture", "free-electron", "--algo", "pcg-s3", "--seed", "4", "--out-dir", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["free-electron-pcg-s3.csv", "free-electron-pcg-s3.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let csv = std::fs::read_to_string(a.join("free-electron-pcg-s3.csv")).unwrap();
    assert!(csv.starts_with(ensemble_dft::report::PCG_CSV_HEADER));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("free-electron-pcg-s3.json")).unwrap()).unwrap();
    assert_eq!(json["error"].as_f64().unwrap(), last_error(&csv));
    assert_eq!(json["seed"].as_u64(), Some(4));
    let ha = json["energy"]["total_ha"].as_f64().unwrap();
    assert_eq!(json["energy"]["total_ry"].as_f64().unwrap(), 2.0 * ha);
}

#[test]
fn scf_run_and_non_convergence_exit_code() {
    let d = scratch("scf");
    let out = edft(&["run", "--fixture", "smooth-potential", "--algo", "scf", "--out-dir", d.to_str().unwrap()]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(d.join("smooth-potential-scf.csv")).unwrap();
    assert!(csv.starts_with(ensemble_dft::report::SCF_CSV_HEADER));
    let out = edft(&["run", "--fixture", "smooth-potential", "--max-iter", "3", "--out-dir", d.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn compare_writes_each_run_and_a_combined_plot() {
    let d = scratch("compare");
    let out = edft(&["compare", "--fixture", "free-electron", "--algo", "pcg-s1,scf", "--out-dir", d.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["free-electron-pcg-s1.csv", "free-electron-scf.csv", "free-electron-compare_plot.py"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let plot = std::fs::read_to_string(d.join("free-electron-compare_plot.py")).unwrap();
    assert!(plot.contains("free-electron-pcg-s1.csv") && plot.contains("free-electron-scf.csv"));
}

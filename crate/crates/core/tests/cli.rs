use std::path::Path;
use std::process::{Command, Output};

use polyreg::grid::Grid;
use polyreg::io::{read_certificate, read_field_csv, read_pgm};

fn polyreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyreg"))
        .args(args)
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "grid": {"nx": 16, "ny": 16},
  "experiment": {"levels": 3, "fit_levels": 3, "seeds": [1]},
  "certificate": {"trials": 50, "seed": 2, "radius": 0.1}
}
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn check_gradient_passes() {
    let out = polyreg(&["check-gradient", "--fields", "2", "--n", "8"]);
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn verify_subgradient_writes_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let bundle = dir.path().join("cert");
    let out = polyreg(&["verify-subgradient", "--config", &cfg, "--out", bundle.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");
    assert!(String::from_utf8(out.stdout).unwrap().contains("0 violations"));
    let grid = Grid::new([-1.0, -1.0], [1.0, 1.0], 16, 16)
        .unwrap()
        .with_disk([0.0, 0.0], 1.0)
        .unwrap();
    let (w, protocol) = read_certificate(&bundle, &grid).unwrap();
    assert_eq!(protocol.trials, 50);
    assert_eq!(w.v2().len(), grid.cell_count());
}

#[test]
fn register_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("reg");
    let out = polyreg(&[
        "register", "--config", &cfg, "--delta", "0.01", "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["alpha"].as_f64().unwrap(), 0.1 * 0.01);
    assert!(summary["D_poly"].as_f64().unwrap() >= 0.0);
    let grid = Grid::new([-1.0, -1.0], [1.0, 1.0], 16, 16).unwrap();
    let u = read_field_csv(&out_dir.join("field.csv"), &grid, 2).unwrap();
    assert_eq!(u.values().len(), 2 * grid.node_count());
    let img = read_pgm(&out_dir.join("warped.pgm"), &grid).unwrap();
    assert_eq!(img.samples().len(), grid.node_count());
}

#[test]
fn rates_writes_csv_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let csv = dir.path().join("out/rates.csv");
    let out = polyreg(&["rates", "--config", &cfg, "--out", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("delta,alpha,seed,D_poly,residual,objective,iters,converged\n"));
    // Three noisy levels and one exact-data row.
    assert_eq!(text.lines().count(), 1 + 3 + 1);
    let slopes: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/slopes.json")).unwrap()).unwrap();
    assert!(slopes.get("d_poly").is_some());
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"grid": {"nx": 16}, "typo": 1}"#).unwrap();
    let out = polyreg(&["verify-subgradient", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("error"));

    std::fs::write(&path, r#"{"experiment": {"q": 0.5}}"#).unwrap();
    let out = polyreg(&["rates", "--config", path.to_str().unwrap(), "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));

    let out = polyreg(&["verify-subgradient", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
}

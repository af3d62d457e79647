use std::path::{Path, PathBuf};
use std::process::Command;

use agecurve::basis::BasisSpec;
use agecurve::quadrature::linspace;
use agecurve::smooth::fit_penalized;
use agecurve::PlayerSeries;

const FIXTURE: &str = "\
player_id,season_year,age,value,pa,group
a,2001,24,0.30,500,x
a,2002,25,0.34,510,x
a,2003,26,0.35,520,x
a,2004,27,0.33,530,x
b,1999,24,0.28,400,y
b,2000,25,0.29,420,y
b,2001,26,0.31,430,y
b,2002,27,0.27,450,y
c,2010,24,0.36,600,x
c,2011,25,0.38,610,x
c,2012,26,0.37,620,x
c,2013,27,0.34,630,x
";

fn agecurve(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_agecurve"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("seasons.csv"), FIXTURE).unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, config).unwrap();
    (dir, cfg)
}

const BASE: &str = r#"{
  "input": {"path": "seasons.csv"},
  "smooth": {
    "basis": {"degree": 3, "interior_knots": [25.5], "endpoints": [24, 27]},
    "lambda": {"mode": "fixed", "value": 0.1},
    "grid_size": 7
  }
}"#;

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn summary_mean_curve_is_pointwise_average() {
    let (dir, _) = setup(BASE);
    let (code, _, err) = agecurve(dir.path(), &["summary", "--config", "run.json", "--out", "out"]);
    assert_eq!(code, 0, "{err}");

    let spec = BasisSpec::new(3, &[25.5], (24.0, 27.0)).unwrap();
    let rows = [
        [0.30, 0.34, 0.35, 0.33],
        [0.28, 0.29, 0.31, 0.27],
        [0.36, 0.38, 0.37, 0.34],
    ];
    let curves: Vec<_> = rows
        .iter()
        .map(|y| {
            let s = PlayerSeries::new("p", vec![24.0, 25.0, 26.0, 27.0], y.to_vec()).unwrap();
            fit_penalized(&spec, &s, 0.1).unwrap()
        })
        .collect();
    let grid = linspace(24.0, 27.0, 7);
    let table = read_csv(&dir.path().join("out/summary/mean_curve.csv"));
    assert_eq!(table.len(), 7);
    for (row, t) in table.iter().zip(&grid) {
        let expected: f64 = curves.iter().map(|c| c.eval(*t, 0).unwrap()).sum::<f64>() / 3.0;
        let got: f64 = row[1].parse().unwrap();
        assert!((got - expected).abs() < 1e-12, "t={t}: {got} vs {expected}");
    }
    let summaries = read_csv(&dir.path().join("out/summary/summaries.csv"));
    assert_eq!(summaries.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    let groups = read_csv(&dir.path().join("out/summary/group_means.csv"));
    assert_eq!(groups.len(), 14);
}

#[test]
fn manifest_echoes_resolved_config() {
    let (dir, _) = setup(BASE);
    let (code, _, err) = agecurve(
        dir.path(),
        &["smooth", "--config", "run.json", "--out", "out", "--seed", "99", "--set", "smooth.grid_size=5"],
    );
    assert_eq!(code, 0, "{err}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/smooth/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["config"]["seed"], 99);
    assert_eq!(manifest["config"]["smooth"]["grid_size"], 5);
    assert_eq!(manifest["config"]["permtest"]["replications"], 5000);
    assert_eq!(manifest["subcommand"], "smooth");
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"curves.csv") && outputs.contains(&"coefficients.csv"));
    assert_eq!(read_csv(&dir.path().join("out/smooth/curves.csv")).len(), 15);
    // no staging directories left behind
    let leftovers = std::fs::read_dir(dir.path().join("out")).unwrap().count();
    assert_eq!(leftovers, 1);
}

#[test]
fn exit_codes() {
    let (dir, _) = setup(r#"{"input": {"path": "seasons.csv"}, "smoth": {}}"#);
    let (code, _, err) = agecurve(dir.path(), &["smooth", "--config", "run.json"]);
    assert_eq!(code, 2);
    let report: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(report["exit_code"], 2);

    let (dir, _) = setup(r#"{"input": {"path": "missing.csv"}, "permtest": {"replications": 0}}"#);
    let (code, _, err) = agecurve(dir.path(), &["permtest", "--config", "run.json"]);
    assert_eq!(code, 2);
    let report: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(report["errors"].as_array().unwrap().len(), 2, "{err}");

    let (dir, _) = setup(r#"{"input": {"path": "seasons.csv", "schema": {"value": "woba"}}}"#);
    let (code, _, _) = agecurve(dir.path(), &["smooth", "--config", "run.json"]);
    assert_eq!(code, 3);
    assert!(!dir.path().join("out/smooth").exists());

    // eight basis functions, four points each, no penalty
    let (dir, _) = setup(
        r#"{"input": {"path": "seasons.csv"},
            "smooth": {"basis": {"knot_count": 4}, "lambda": {"mode": "fixed", "value": 0.0}}}"#,
    );
    let (code, _, err) = agecurve(dir.path(), &["smooth", "--config", "run.json"]);
    assert_eq!(code, 4, "{err}");

    let (dir, _) = setup(BASE);
    let (code, _, _) = agecurve(dir.path(), &["smooth", "--config", "run.json", "--set", "smooth.grid_size=\"many\""]);
    assert_eq!(code, 2);
}

#[test]
fn fpca_and_permtest_reruns_are_identical() {
    let config = r#"{
      "input": {"path": "seasons.csv"},
      "smooth": {"basis": {"interior_knots": [25.5], "endpoints": [24, 27]}},
      "fpca": {"grid_size": 31, "num_components": 2},
      "permtest": {"replications": 500, "num_pcs": 2}
    }"#;
    let (dir, _) = setup(config);
    for out in ["one", "two"] {
        for sub in ["fpca", "permtest"] {
            let (code, _, err) = agecurve(dir.path(), &[sub, "--config", "run.json", "--out", out]);
            assert_eq!(code, 0, "{sub}: {err}");
        }
    }
    for f in ["fpca/scores.csv", "fpca/eigenfunctions.csv", "permtest/permtest.json", "permtest/manifest.json"] {
        let a = std::fs::read(dir.path().join("one").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("two").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let perm: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("one/permtest/permtest.json")).unwrap()).unwrap();
    // three subjects: every relabeling is enumerated
    assert_eq!(perm["exact"], true);
    assert_eq!(perm["group_sizes"], serde_json::json!([2, 1]));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fbsde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .env_remove("FBSDE_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// `(t, x, W, rest...)` rows of a field dump.
fn rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

const SMALL: [&str; 4] = ["--dx", "0.05", "-T", "0.05"];

#[test]
fn validate_linear_preset_reports_declared_constants() {
    let dir = TempDir::new().unwrap();
    let o = fbsde(dir.path(), &["validate", "--preset", "example_5_1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("beta1 = 2,"));
    let v = json(&dir.path().join("validation.json"));
    assert_eq!(v["declared"]["beta1"], 2.0);
    assert_eq!(v["passed"], true);
    assert_eq!(
        v["provenance"]["config"]["problem"]["preset"],
        "example_5_1"
    );
}

#[test]
fn validate_z_coupled_preset() {
    let dir = TempDir::new().unwrap();
    let o = fbsde(
        dir.path(),
        &["validate", "--preset", "example_5_2", "--l-sigma", "0.05"],
    );
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn validate_rejects_vanishing_monotonicity_constants() {
    let dir = TempDir::new().unwrap();
    let o = fbsde(dir.path(), &["validate", "--preset", "zero"]);
    assert_ne!(code(&o), 0);
    let v = json(&dir.path().join("validation.json"));
    assert_eq!(v["passed"], false);
}

#[test]
fn solve_both_pipelines_writes_fields_and_discrepancy() {
    let dir = TempDir::new().unwrap();
    let o = fbsde(
        dir.path(),
        &[
            "solve",
            "--preset",
            "example_5_1",
            "--pipeline",
            "both",
            "-T",
            "0.25",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "dpp_fields.csv",
        "dpp_policy.csv",
        "dpp_report.json",
        "hjb_fields.csv",
        "hjb_report.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let dpp = rows(&dir.path().join("dpp_fields.csv"));
    let hjb = rows(&dir.path().join("hjb_fields.csv"));
    assert_eq!(dpp.len(), hjb.len());
    let cv = json(&dir.path().join("cross_validation.json"));
    assert_eq!(cv["check"]["passed"], true);
    assert!(cv["check"]["measured"].as_f64().unwrap() <= 0.05);
}

#[test]
fn zero_coefficients_replicate_the_terminal_field() {
    let dir = TempDir::new().unwrap();
    let o = fbsde(
        dir.path(),
        &["solve", "--preset", "zero", "--pipeline", "both"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["dpp_fields.csv", "hjb_fields.csv"] {
        let r = rows(&dir.path().join(name));
        assert!(!r.is_empty());
        for row in r {
            assert!((row[2] - row[1]).abs() <= 1e-12, "{name}: {row:?}");
        }
    }
}

#[test]
fn z_coupled_hjb_dump_carries_small_residuals() {
    let dir = TempDir::new().unwrap();
    let o = fbsde(
        dir.path(),
        &["solve", "--preset", "example_5_2", "--pipeline", "hjb"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("hjb_fields.csv")).unwrap();
    assert!(text.lines().any(|l| l == "t,x,W,V,residual"));
    let r = rows(&dir.path().join("hjb_fields.csv"));
    let worst = r.iter().map(|row| row[4].abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-10, "residual {worst:e}");
}

#[test]
fn flipped_sign_diffusion_fails_verification() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("flipped.toml");
    fs::write(
        &cfg,
        r#"horizon = 0.05
dx = 0.05

[problem]
drift = "-pos(x) - 4*y + u"
diffusion = "x + 0.05*z"
driver = "2*x - pos(y) - z + u"
beta1 = 1.0
beta2 = 0.05
mu1 = 1.0
lipschitz = 4.0
growth = 5.05
sigma_lipschitz_z = 0.05
"#,
    )
    .unwrap();
    let o = fbsde(dir.path(), &["verify", "--config", cfg.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    let v = json(&dir.path().join("verify.json"));
    assert_eq!(v["passed"], false);
    assert_eq!(v["checks"][0]["check"], "assumptions");
    assert_eq!(v["checks"][0]["passed"], false);
}

#[test]
fn verify_small_linear_preset() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["verify", "--preset", "example_5_1"];
    args.extend(SMALL);
    let o = fbsde(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let v = json(&dir.path().join("verify.json"));
    let names: Vec<&str> = v["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["check"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "assumptions",
            "comparison",
            "regularity",
            "flow",
            "cross_validation"
        ]
    );
}

#[test]
fn empty_check_selection_warns_and_succeeds() {
    let dir = TempDir::new().unwrap();
    let o = fbsde(
        dir.path(),
        &["verify", "--preset", "example_5_1", "--checks", ""],
    );
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no checks selected"));
}

#[test]
fn identical_configuration_gives_identical_files() {
    let dir = TempDir::new().unwrap();
    let mut args = vec![
        "solve",
        "--preset",
        "example_5_2",
        "--pipeline",
        "both",
        "--emit-plot-data",
    ];
    args.extend(SMALL);
    let snapshot = || {
        let o = fbsde(dir.path(), &args);
        assert_eq!(code(&o), 0);
        let mut files: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| (p.clone(), fs::read(p).unwrap()))
            .collect::<Vec<_>>()
    };
    let first = snapshot();
    assert!(first.iter().any(|(p, _)| p.ends_with("dpp_plot.csv")));
    assert_eq!(first, snapshot());
}

#[test]
fn every_output_embeds_the_configuration() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["solve", "--preset", "example_5_2", "--pipeline", "both"];
    args.extend(SMALL);
    assert_eq!(code(&fbsde(dir.path(), &args)), 0);
    for entry in fs::read_dir(dir.path()).unwrap() {
        let text = fs::read_to_string(entry.unwrap().path()).unwrap();
        assert!(
            text.contains("\"preset\":\"example_5_2\"")
                || text.contains("\"preset\": \"example_5_2\"")
        );
    }
}

#[test]
fn malformed_configuration_exits_with_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\n  \"horizon\": 0.25,\n  \"space_bx\": [0, 1]\n}\n").unwrap();
    let o = fbsde(dir.path(), &["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("space_bx"), "{err}");

    let o = fbsde(
        dir.path(),
        &["solve", "--preset", "example_5_1", "--dx", "-1"],
    );
    assert_eq!(code(&o), 2);
    let o = fbsde(dir.path(), &["solve", "--preset", "no_such_problem"]);
    assert_eq!(code(&o), 2);
    let o = fbsde(dir.path(), &["solve", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn oversized_step_needs_opt_in_shrinking() {
    let dir = TempDir::new().unwrap();
    let o = fbsde(
        dir.path(),
        &[
            "solve",
            "--preset",
            "example_5_1",
            "--delta",
            "0.01",
            "-T",
            "0.05",
            "--dx",
            "0.05",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("exceeds admissible contraction step"));

    let o = fbsde(
        dir.path(),
        &[
            "solve",
            "--preset",
            "example_5_1",
            "--delta",
            "0.01",
            "-T",
            "0.05",
            "--dx",
            "0.05",
            "--auto-delta",
        ],
    );
    assert_eq!(code(&o), 0);
    let report = json(&dir.path().join("dpp_report.json"));
    let step = &report["provenance"]["step"];
    assert_eq!(step["requested"], 0.01);
    assert!(step["delta"].as_f64().unwrap() <= step["delta0"].as_f64().unwrap());
}

#[test]
fn output_directory_from_environment() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(["validate", "--preset", "example_5_1", "--threads", "1"])
        .env("FBSDE_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("validation.json").exists());
}

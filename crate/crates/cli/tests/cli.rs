use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn cft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cft"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(format!("{name}.schema.json"));
    let text = std::fs::read_to_string(path).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, doc: &Value) {
    let v = schema(schema_name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:?}");
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Shorter distillation loop so toy runs stay quick.
const FAST_TOY: &str = "tracer_iters = 200\nn_eval = 512\n";

fn csv_rows(bytes: &[u8]) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(bytes)
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn default_verify_passes_at_least_twelve_checks() {
    let out = cft(&["verify"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("verify", &doc);
    let checks = doc["seeds"][0]["checks"].as_array().unwrap();
    assert!(checks.len() >= 12);
    assert!(checks.iter().all(|c| c["pass"] == true));
    assert_eq!(doc["pass"], true);
}

#[test]
fn oversized_gradient_step_fails_the_stability_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gd_step_fraction = 2.5\n");
    let out = cft(&["verify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gd_stability"), "{stderr}");
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("verify", &doc);
    assert_eq!(doc["failed"], serde_json::json!(["0:gd_stability"]));
}

#[test]
fn each_seed_gets_its_own_report_block() {
    let out = cft(&["verify", "--seeds", "1,2,3"]);
    assert!(out.status.success());
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let seeds: Vec<u64> = doc["seeds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, [1, 2, 3]);

    let csv = cft(&["verify", "--seeds", "1,2", "--format", "csv"]);
    let rows = csv_rows(&csv.stdout);
    let per_seed = doc["seeds"][0]["checks"].as_array().unwrap().len();
    assert_eq!(rows.len(), 2 * per_seed);
    assert!(rows.iter().all(|r| &r[4] == "true"));
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for text in [
        "lambda = []\n",
        "beta = []\n",
        "lamda = 1.0\n",
        "tau = -1.0\n",
        "seeds = [",
    ] {
        let cfg = write_config(dir.path(), text);
        let out = cft(&["sweep", "--config", cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{text}");
    }
    assert_eq!(cft(&["sweep", "--lambda", ""]).status.code(), Some(2));
    assert_eq!(cft(&["toy", "--lambda", "1,2"]).status.code(), Some(2));
    assert_eq!(cft(&["frobnicate"]).status.code(), Some(2));
    let missing = cft(&["verify", "--config", "/nonexistent/run.toml"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn csv_uses_lf_line_endings_and_a_header_row() {
    let out = cft(&["teacher-dynamics", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.starts_with("seed,step,omega,contraction_factor,"));
    assert_eq!(text.lines().count(), 1 + 501);
}

#[test]
fn toy_emits_six_rows_per_seed_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FAST_TOY);
    let out_path = dir.path().join("toy.csv");
    let out = cft(&[
        "toy",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "3,4",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = csv_rows(&std::fs::read(&out_path).unwrap());
    assert_eq!(rows.len(), 6 * 2);
    let summary_path = dir.path().join("toy.csv.summary.json");
    let summary: Value = serde_json::from_slice(&std::fs::read(summary_path).unwrap()).unwrap();
    assert_valid("toy_summary", &summary);

    let ordering = &summary["ordering"];
    let strategies = summary["strategies"].as_array().unwrap();
    let forgetting = |name: &str| {
        strategies.iter().find(|s| s["strategy"] == name).unwrap()["mean_forgetting"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(
        ordering["static_over_dynamic"].as_bool().unwrap(),
        forgetting("static_sd") >= forgetting("dynamic_sd")
    );
    assert_eq!(
        ordering["direct_over_l2"].as_bool().unwrap(),
        forgetting("direct_ft") > forgetting("l2_reg")
    );
    let order: Vec<f64> = ordering["forgetting_order"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| forgetting(s.as_str().unwrap()))
        .collect();
    assert!(order.windows(2).all(|w| w[0] >= w[1]));

    let json = cft(&[
        "toy",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "3",
        "--format",
        "json",
    ]);
    let doc: Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_valid("toy", &doc);
    assert_eq!(doc["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn sweep_axes_move_in_the_expected_direction() {
    let out = cft(&["sweep", "--seeds", "0,1", "--format", "json"]);
    assert!(out.status.success());
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("sweep", &doc);
    let rows = doc.as_array().unwrap();
    assert_eq!(rows.len(), 2 * 9);
    for seed in [0, 1] {
        let axis = |name: &str, field: &str| -> Vec<f64> {
            rows.iter()
                .filter(|r| r["axis"] == name && r["seed"] == seed)
                .map(|r| r[field].as_f64().unwrap())
                .collect()
        };
        let shift = axis("lambda", "task_shift");
        assert_eq!(shift.len(), 3);
        assert!(shift.windows(2).all(|w| w[1] <= w[0]), "{shift:?}");
        let omega0 = axis("beta", "omega0");
        assert!(omega0.windows(2).all(|w| w[1] < w[0]), "{omega0:?}");
    }
}

#[test]
fn frozen_teacher_gap_is_the_distance_from_pretraining() {
    let out = cft(&[
        "teacher-dynamics",
        "--update-freq",
        "2500",
        "--format",
        "json",
    ]);
    assert!(out.status.success());
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("teacher_dynamics", &doc);
    for row in &doc.as_array().unwrap()[1..] {
        assert_eq!(row["omega"].as_f64(), Some(0.0));
        assert_eq!(row["initial_weight"].as_f64(), Some(1.0));
        assert_eq!(row["wma_gap"], row["persistence_bound"]);
    }
}

#[test]
fn identical_seeds_give_identical_bytes() {
    for args in [
        &["teacher-dynamics", "--seeds", "5"][..],
        &["sweep", "--seeds", "2", "--beta", "0.3,0.7"][..],
    ] {
        let a = cft(args);
        let b = cft(args);
        assert!(a.status.success());
        assert_eq!(a.stdout, b.stdout);
    }
}

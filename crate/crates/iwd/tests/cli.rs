use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iwd_core::engine::RunReport;
use serde_json::Value;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json")
}

fn iwd(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iwd"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("IWD_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], config: &Path, out: &Path) {
    let o = iwd(args, config, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Writes a copy of the smoke config with `edit` applied.
fn edited_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v = json(&smoke_config());
    edit(&mut v);
    let p = dir.join("edited.json");
    fs::write(&p, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    p
}

#[test]
fn distill_artifacts_exist_and_reparse() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["distill"], &smoke_config(), dir.path());
    let s = iwd::io::read_synthetic(&dir.path().join("synthetic.json")).unwrap();
    assert_eq!((s.len(), s.dim()), (4, 2));
    let report: RunReport = serde_json::from_slice(&fs::read(dir.path().join("run_report.json")).unwrap()).unwrap();
    assert_eq!(report.objective.len(), 6);
    // the f32 file carries the report's synthetic set rounded to f32
    for (a, b) in s.x.data.iter().zip(&report.synthetic.x.data) {
        assert_eq!(*a, *b as f32 as f64);
    }
    let rows = csv_rows(&dir.path().join("objective.csv"));
    assert_eq!(rows.len(), 6);
    assert!(fs::read_to_string(dir.path().join("curve.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn influence_table_and_histogram_cover_every_instance() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["influence"], &smoke_config(), dir.path());
    let rows = csv_rows(&dir.path().join("influence.csv"));
    assert_eq!(rows.len(), 24);
    let flipped = rows.iter().filter(|r| &r[2] == "1").count();
    assert_eq!(flipped, 6);
    let summary = json(&dir.path().join("influence_summary.json"));
    let counts: u64 = summary["histogram"]["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 24);
    let svg = fs::read_to_string(dir.path().join("histogram.svg")).unwrap();
    assert_eq!(svg.matches("<rect x=").count(), 20);
    let weights: f64 = rows.iter().map(|r| r[7].parse::<f64>().unwrap()).sum();
    assert!((weights - 1.0).abs() <= 1e-12);
    assert_eq!(csv_rows(&dir.path().join("dataset.csv")).len(), 24);
}

#[test]
fn evaluate_ablate_sweep_and_loo_tables_have_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    ok(&["distill"], &cfg, dir.path());
    ok(&["evaluate"], &cfg, dir.path());
    assert_eq!(csv_rows(&dir.path().join("eval.csv")).len(), 2);
    ok(&["ablate"], &cfg, dir.path());
    let ablation = csv_rows(&dir.path().join("ablation.csv"));
    assert_eq!(ablation.len(), 4 * 2);
    ok(&["tau-sweep"], &cfg, dir.path());
    assert_eq!(csv_rows(&dir.path().join("tau_sweep.csv")).len(), 3);
    assert_eq!(csv_rows(&dir.path().join("tau_sweep_runs.csv")).len(), 3);
    ok(&["loo-oracle"], &cfg, dir.path());
    assert_eq!(csv_rows(&dir.path().join("loo.csv")).len(), 24);
    let rho = json(&dir.path().join("loo_summary.json"))["spearman"].as_f64().unwrap();
    assert!(rho >= 0.9, "spearman {rho}");
    let model = iwd::io::read_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(model.theta.dim(), 6);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for out in [a.path(), b.path()] {
        ok(&["distill"], &smoke_config(), out);
        ok(&["influence"], &smoke_config(), out);
    }
    for name in ["synthetic.bin", "synthetic.json", "run_report.json", "objective.csv", "influence.csv", "histogram.svg"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&["distill"], &smoke_config(), a.path());
    ok(&["distill", "--seed", "77"], &smoke_config(), b.path());
    assert_ne!(fs::read(a.path().join("synthetic.bin")).unwrap(), fs::read(b.path().join("synthetic.bin")).unwrap());
}

#[test]
fn missing_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = iwd(&["distill"], &dir.path().join("absent.json"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    let bare = Command::new(env!("CARGO_BIN_EXE_iwd")).arg("distill").output().unwrap();
    assert_eq!(bare.status.code(), Some(2));
}

#[test]
fn invalid_fields_exit_with_2_and_are_named() {
    let dir = tempfile::tempdir().unwrap();
    type Edit = Box<dyn FnOnce(&mut Value)>;
    let cases: Vec<(Edit, &str)> = vec![
        (Box::new(|v| v["distill"]["batch_size"] = 0.into()), "distill.batch_size"),
        (Box::new(|v| v["distill"]["arch"]["input_dim"] = 5.into()), "distill.arch.input_dim"),
        (Box::new(|v| v["dataset"]["per_class"] = "many".into()), "dataset.per_class"),
        (Box::new(|v| v["distill"]["outer_steps"] = (-1).into()), "distill.outer_steps"),
        (Box::new(|v| v["schema_version"] = 3.into()), "schema_version"),
        (Box::new(|v| v["eval"]["n_repeats"] = 0.into()), "eval.n_repeats"),
    ];
    for (edit, field) in cases {
        let cfg = edited_config(dir.path(), edit);
        let out = dir.path().join("out");
        let o = iwd(&["distill"], &cfg, &out);
        assert_eq!(o.status.code(), Some(2), "{field}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(&format!("`{field}`")), "{field}: {err}");
        assert!(!out.join("synthetic.bin").exists(), "{field}: wrote artifacts");
    }
}

#[test]
fn command_specific_sections_are_required() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_config(dir.path(), |v| {
        v.as_object_mut().unwrap().remove("loo");
    });
    let o = iwd(&["loo-oracle"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`loo`"));
}

#[test]
fn corrupt_artifact_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["distill"], &smoke_config(), dir.path());
    let bin = dir.path().join("synthetic.bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
    let o = iwd(&["evaluate"], &smoke_config(), dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn thread_count_comes_from_the_environment_too() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&["influence", "--threads", "1"], &smoke_config(), a.path());
    let o = Command::new(env!("CARGO_BIN_EXE_iwd"))
        .args(["influence", "--config"])
        .arg(smoke_config())
        .arg("--out")
        .arg(b.path())
        .env("IWD_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(a.path().join("influence.csv")).unwrap(), fs::read(b.path().join("influence.csv")).unwrap());
    let zero = iwd(&["influence", "--threads", "0"], &smoke_config(), a.path());
    assert_eq!(zero.status.code(), Some(2));
}

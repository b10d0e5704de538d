use std::fs;
use std::path::Path;
use std::process::Command;

use qmargin::ansatz::{build, readout_measurements, AnsatzSpec, Family};
use qmargin::cli::{cmd_embed, cmd_generate, cmd_sweep, cmd_train, exit_code, ExperimentConfig, RunManifest, SchemeReport};
use qmargin::margin::{margin_report, MarginReport};
use qmargin::qpr::load_dataset;
use qmargin::train::RunRecord;
use sha2::{Digest, Sha256};

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(text).unwrap()
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

const GENERATE: &str = r#"{"seed": 5, "dataset": {"kind": "qpr", "m": 20, "noise_fraction": 0.5, "pool_per_class": 10}}"#;

#[test]
fn generate_records_randomized_indices_and_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_generate(&config(GENERATE), dir.path()).unwrap();
    let summary: serde_json::Value = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["randomized_indices"].as_array().unwrap().len(), 10);
    for f in &m.files {
        let bytes = fs::read(dir.path().join(&f.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), f.sha256, "{}", f.path);
    }
    assert!(m.files.iter().any(|f| f.path == "dataset/amplitudes.bin"));
    assert_eq!(load_dataset(&dir.path().join("dataset")).unwrap().len(), 20);

    let again = tempfile::tempdir().unwrap();
    let m2 = cmd_generate(&config(GENERATE), again.path()).unwrap();
    assert_eq!(m.files, m2.files);
}

fn train_config(dataset: &Path, lr: f64) -> ExperimentConfig {
    config(&format!(
        r#"{{"seed": 2,
            "dataset": {{"kind": "qpr", "path": {:?}, "test_size": 8, "pool_per_class": 10}},
            "train": {{"max_iters": 30, "learning_rate": {lr}}}}}"#,
        dataset.to_str().unwrap()
    ))
}

#[test]
fn train_writes_all_reports() {
    let data = tempfile::tempdir().unwrap();
    cmd_generate(&config(GENERATE), data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let m = cmd_train(&train_config(&data.path().join("dataset"), 0.01), out.path()).unwrap();
    let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["bound.json", "loss.csv", "margin_report.json", "margins.csv", "run.json"]);
    let report: MarginReport = read_json(&out.path().join("margin_report.json"));
    assert_eq!(report.margins.len(), 20);
    let run: RunRecord = read_json(&out.path().join("run.json"));
    assert!(run.dataset_manifest.is_some());
    assert!(run.test_accuracy.is_some());
    let on_disk: RunManifest = read_json(&out.path().join("manifest.json"));
    assert_eq!(on_disk.files, m.files);
}

#[test]
fn zero_learning_rate_keeps_initial_model() {
    let data = tempfile::tempdir().unwrap();
    cmd_generate(&config(GENERATE), data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    cmd_train(&train_config(&data.path().join("dataset"), 0.0), out.path()).unwrap();
    let run: RunRecord = read_json(&out.path().join("run.json"));
    assert_eq!(run.theta_init, run.theta_final);
    let report: MarginReport = read_json(&out.path().join("margin_report.json"));
    let spec = AnsatzSpec::new(Family::Qcnn, 8, 1, 4).unwrap();
    let d = load_dataset(&data.path().join("dataset")).unwrap();
    let initial = margin_report(
        &build(&spec).unwrap(),
        &readout_measurements(&spec).unwrap(),
        &run.theta_init,
        &d.samples,
        &[],
    )
    .unwrap();
    assert_eq!(report.margins, initial.margins);
}

#[test]
fn missing_dataset_fails_without_outputs() {
    let out = tempfile::tempdir().unwrap();
    let target = out.path().join("run");
    let e = cmd_train(&train_config(Path::new("/nonexistent/qpr"), 0.01), &target).unwrap_err();
    assert_eq!(exit_code(&e), 3);
    assert!(!target.exists());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"dataset": {"kind": "qpr", "noise_fraction": 1.5}}"#).unwrap();
    let run = |cfg: &Path| {
        Command::new(env!("CARGO_BIN_EXE_qmargin"))
            .args(["generate", "--config", cfg.to_str().unwrap(), "--out"])
            .arg(dir.path().join("out"))
            .output()
            .unwrap()
    };
    let o = run(&bad);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset.noise_fraction"));

    let good = dir.path().join("good.json");
    fs::write(&good, GENERATE).unwrap();
    let o = run(&good);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/manifest.json").exists());
}

#[test]
fn sweep_resumes_and_writes_metric_columns() {
    let cfg = config(
        r#"{"sweep": {"layers": [1], "noise_fractions": [0.0, 1.0], "families": ["qcnn"], "seeds_per_cell": 2,
                      "train": {"max_iters": 5, "learning_rate": 0.01},
                      "data": {"pool_per_class": 5, "test_size": 8}}}"#,
    );
    let out = tempfile::tempdir().unwrap();
    let first = cmd_sweep(&cfg, out.path()).unwrap();
    let log = fs::read_to_string(out.path().join("sweep.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let second = cmd_sweep(&cfg, out.path()).unwrap();
    assert_eq!(fs::read_to_string(out.path().join("sweep.jsonl")).unwrap(), log);
    assert_eq!(first.files, second.files);
    let header = fs::read_to_string(out.path().join("records.csv")).unwrap();
    let header = header.lines().next().unwrap();
    for m in qmargin::analyze::METRICS {
        assert!(header.contains(m), "{m}");
    }
}

#[test]
fn embed_single_scheme_report() {
    let cfg = config(&format!(
        r#"{{"embed": {{"schemes": ["zz-fixed"],
                       "data": {{"dir": {:?}, "train_per_class": 6, "test_per_class": 4}},
                       "classifier": {{"train": {{"max_iters": 10, "batch": {{"size": 4}}}}}}}}}}"#,
        concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/mnist")
    ));
    let out = tempfile::tempdir().unwrap();
    cmd_embed(&cfg, out.path()).unwrap();
    let reports: Vec<SchemeReport> = read_json(&out.path().join("embed_report.json"));
    assert_eq!(reports.len(), 1);
    assert!(reports[0].certificate_holds);
    assert_eq!(reports[0].trace_distance, reports[0].initial_trace_distance);
    assert!(out.path().join("margins_zz-fixed.csv").exists());
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"));
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_str().unwrap().to_string();
        let command = name.split('_').next().unwrap();
        let cfg = ExperimentConfig::from_path(&path).unwrap();
        cfg.validate(command).unwrap_or_else(|e| panic!("{name}: {e}"));
        if let Some(a) = &cfg.ansatz {
            let derived = AnsatzSpec::qcnn(a.n_qubits, a.n_layers, a.n_classes, a.family == Family::QcnnShared).unwrap();
            assert_eq!(a.readout_wires, derived.readout_wires, "{name}");
        }
        seen += 1;
    }
    assert_eq!(seen, 5);
}

use std::fs;
use std::path::Path;

use mimcfr::cli::{self, RunConfig};
use mimcfr::data::{load_csv, save_csv, CsvSchema, OutcomeType, SyntheticSpec};
use mimcfr::losses::MiMode;
use mimcfr::training::{Architecture, TrainConfig};
use mimcfr::Error;
use serde_json::Value;

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 64,
        architecture: Architecture {
            factor_dim: Some(4),
            shared_layers: vec![16],
            head_layers: vec![],
            classifier_layers: vec![8],
            outcome_layers: vec![8],
            q_layers: vec![8],
        },
        ..TrainConfig::default()
    }
}

fn config(dir: &Path, spec: SyntheticSpec) -> RunConfig {
    RunConfig {
        synthetic: spec,
        train: quick_train(),
        out: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

fn small_spec(outcome_type: OutcomeType) -> SyntheticSpec {
    SyntheticSpec {
        n: 240,
        m_gamma: 2,
        m_delta: 2,
        m_upsilon: 2,
        outcome_type,
        seed: 5,
        ..SyntheticSpec::default()
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Generates data and trains a checkpoint in `dir`.
fn trained(dir: &Path, outcome_type: OutcomeType) -> RunConfig {
    let mut cfg = config(dir, small_spec(outcome_type));
    cli::cmd_generate(&cfg).unwrap();
    cfg.data = Some(dir.join(cli::DATA_FILE));
    cli::cmd_train(&cfg).unwrap();
    cfg.checkpoint = Some(dir.join(cli::CHECKPOINT_FILE));
    cfg
}

#[test]
fn generate_writes_csv_and_sidecar_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::default();
    cli::cmd_generate(&config(a.path(), spec.clone())).unwrap();
    cli::cmd_generate(&config(b.path(), spec.clone())).unwrap();
    let csv_a = fs::read(a.path().join(cli::DATA_FILE)).unwrap();
    assert_eq!(csv_a, fs::read(b.path().join(cli::DATA_FILE)).unwrap());
    let lines = String::from_utf8(csv_a).unwrap().lines().count();
    assert_eq!(lines, spec.n + 1);
    let side = json(&a.path().join(cli::SIDECAR_FILE));
    assert_eq!(side["d"], spec.m_gamma + spec.m_delta + spec.m_upsilon);
    assert_eq!(side["schema_version"], 1);
}

#[test]
fn generate_rejects_invalid_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n: 3,
        ..SyntheticSpec::default()
    };
    assert!(matches!(
        cli::cmd_generate(&config(dir.path(), spec)),
        Err(Error::Validation(_))
    ));
    assert!(!dir.path().join(cli::DATA_FILE).exists());
}

#[test]
fn train_report_echoes_config_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path(), OutcomeType::Continuous);
    let report = fs::read(dir.path().join(cli::TRAIN_REPORT_FILE)).unwrap();
    let ckpt = fs::read(dir.path().join(cli::CHECKPOINT_FILE)).unwrap();
    let v: Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["config"]["epochs"], 2);
    assert_eq!(v["seed"], 0);

    let again = tempfile::tempdir().unwrap();
    cfg.out = again.path().to_path_buf();
    cli::cmd_train(&cfg).unwrap();
    assert_eq!(
        report,
        fs::read(again.path().join(cli::TRAIN_REPORT_FILE)).unwrap()
    );
    assert_eq!(
        ckpt,
        fs::read(again.path().join(cli::CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn train_mode_routing_changes_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path(), OutcomeType::Continuous);
    let base = fs::read(dir.path().join(cli::CHECKPOINT_FILE)).unwrap();
    for (mode, sfd) in [
        (MiMode::Rlo, true),
        (MiMode::None, true),
        (MiMode::Mim, false),
    ] {
        let out = tempfile::tempdir().unwrap();
        cfg.out = out.path().to_path_buf();
        cfg.train.mode = mode;
        cfg.train.sfd_enabled = sfd;
        cli::cmd_train(&cfg).unwrap();
        let v = json(&out.path().join(cli::TRAIN_REPORT_FILE));
        assert_eq!(v["config"]["mode"], mode.as_str());
        assert_eq!(v["config"]["sfd_enabled"], sfd);
        assert_ne!(
            base,
            fs::read(out.path().join(cli::CHECKPOINT_FILE)).unwrap()
        );
    }
}

#[test]
fn eval_on_synthetic_data_reports_all_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path(), OutcomeType::Continuous);
    let data_before = fs::read(cfg.data.as_ref().unwrap()).unwrap();
    cfg.curve = true;
    cli::cmd_eval(&cfg).unwrap();
    let v = json(&dir.path().join(cli::METRICS_FILE));
    for key in [
        "pehe",
        "ate_error",
        "auuc_normalized",
        "auuc_total",
        "schema_version",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let rows = fs::read_to_string(dir.path().join(cli::UPLIFT_FILE))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 240 + 1);
    assert_eq!(data_before, fs::read(cfg.data.as_ref().unwrap()).unwrap());
}

#[test]
fn eval_gates_pehe_on_potential_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path(), OutcomeType::Continuous);
    let mut ds = load_csv(cfg.data.as_ref().unwrap(), &CsvSchema::default()).unwrap();
    ds.y0 = None;
    ds.y1 = None;
    let factual = dir.path().join("factual.csv");
    save_csv(&ds, &factual).unwrap();
    cfg.data = Some(factual);
    cli::cmd_eval(&cfg).unwrap();
    let v = json(&dir.path().join(cli::METRICS_FILE));
    assert!(v.get("pehe").is_none() && v.get("ate_error").is_none());
    assert!(v.get("auuc_total").is_some());

    cfg.require_pehe = true;
    assert!(matches!(cli::cmd_eval(&cfg), Err(Error::Capability(_))));
}

#[test]
fn target_budget_handling_and_dlu() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path(), OutcomeType::Binary);

    cfg.budget = Some(0);
    cli::cmd_target(&cfg).unwrap();
    let sel = fs::read_to_string(dir.path().join(cli::SELECTION_FILE)).unwrap();
    assert_eq!(sel, "index\n");

    cfg.budget = Some(1000);
    cli::cmd_target(&cfg).unwrap();
    let v = json(&dir.path().join(cli::TARGET_REPORT_FILE));
    assert_eq!(
        v["policy_value"].as_f64().unwrap(),
        v["dlu"].as_u64().unwrap() as f64
    );
    let selected = fs::read_to_string(dir.path().join(cli::SELECTION_FILE)).unwrap();
    assert_eq!(
        selected.lines().count() - 1,
        v["n_selected"].as_u64().unwrap() as usize
    );
    let uplift = v["dlu"].as_i64().unwrap() - v["baseline_value"].as_f64().unwrap() as i64;
    assert_eq!(uplift, v["dlu_uplift"].as_i64().unwrap());

    cfg.budget = Some(-2);
    assert!(matches!(cli::cmd_target(&cfg), Err(Error::Validation(_))));
}

#[test]
fn ablate_writes_table_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), small_spec(OutcomeType::Continuous));
    cfg.train.epochs = 1;
    cfg.seeds = vec![0, 1];
    cli::cmd_ablate(&cfg).unwrap();
    let table = json(&dir.path().join(cli::ABLATION_JSON_FILE));
    let labels: Vec<&str> = table["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["full", "wo_sfd", "wo_mim", "wo_both", "rlo"]);
    assert!(table["rows"][0].get("pehe_std").is_some());
    let csv = fs::read(dir.path().join(cli::ABLATION_CSV_FILE)).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 6);

    let again = tempfile::tempdir().unwrap();
    cfg.out = again.path().to_path_buf();
    cli::cmd_ablate(&cfg).unwrap();
    assert_eq!(
        csv,
        fs::read(again.path().join(cli::ABLATION_CSV_FILE)).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join(cli::ABLATION_JSON_FILE)).unwrap(),
        fs::read(again.path().join(cli::ABLATION_JSON_FILE)).unwrap()
    );
}

#[test]
fn binary_exits_nonzero_on_error() {
    let exe = env!("CARGO_BIN_EXE_mimcfr");
    let out = std::process::Command::new(exe)
        .args(["target", "--budget", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(exe)
        .args(["generate", "--n", "50", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join(cli::DATA_FILE).exists());
}

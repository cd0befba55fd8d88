use std::fs;
use std::path::Path;
use std::process::Command;

use mtnn_cli::commands::load_bundle;
use mtnn_cli::{cmd_eval, cmd_gen_data, cmd_mpc, cmd_train, DataManifest, ExperimentConfig, Variant};
use mtnn_core::evaluation::{comparison_table, PlantModel, Predictor};
use mtnn_core::plants::HvacPlant;

const SMALL_HVAC: &str = r#"
seed = 3
output_dir = "out"
variants = ["soft1", "taylor1", "mono1"]

[data]
kind = "hvac"
noise_sigma = 0.0

[model]
hidden = [4]
mono_spec = ["++."]
baseline_hidden = [4]

[train]
epochs = 15
learning_rates = [1e-2, 1e-3]
"#;

const SMALL_TCLAB: &str = r#"
seed = 1
output_dir = "out"
variants = ["mono1"]

[data]
kind = "tclab"
n_train = 60
n_test = 20

[model]
hidden = [4]
mono_spec = ["+++.", "++.+"]

[train]
epochs = 10
learning_rates = [1e-2]

[mpc]
variant = "mono1"
initial_state = [30.0, 30.0]
steps = 5

[mpc.controller]
horizon = 3
u_min = [40.0, 30.0]
u_max = [40.0, 30.0]
"#;

fn config(text: &str, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(text).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn gen_data_writes_the_split_and_repeats_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config(SMALL_HVAC, a.path());
    let m = cmd_gen_data(&cfg).unwrap();
    assert_eq!((m.n_train, m.n_test), (180, 100));
    assert_eq!(m.train_set(&cfg).unwrap().len(), 180);
    assert_eq!(m.test_set(&cfg).unwrap().len(), 100);
    assert_eq!(DataManifest::load(&cfg).unwrap(), m);

    cmd_gen_data(&config(SMALL_HVAC, b.path())).unwrap();
    for f in ["train.csv", "test.csv", "manifest.json"] {
        assert_eq!(
            read(a.path().join("data").join(f)),
            read(b.path().join("data").join(f)),
            "{f}"
        );
    }
}

#[test]
fn missing_data_section_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("output_dir = \"x\"\n", dir.path());
    let err = cmd_gen_data(&cfg).unwrap_err().to_string();
    assert!(err.contains("`data`"), "{err}");
}

#[test]
fn train_writes_requested_variants_and_repeats() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config(SMALL_HVAC, a.path());
    cmd_gen_data(&cfg).unwrap();
    let report = cmd_train(&cfg, &[Variant::Taylor1, Variant::Soft1]).unwrap();
    assert!(report.all_ok());
    assert!(cfg.bundle_path(Variant::Taylor1).exists());
    assert!(cfg.bundle_path(Variant::Soft1).exists());
    assert!(!cfg.bundle_path(Variant::Mono1).exists());
    assert!(cfg.history_path(Variant::Soft1).exists());

    let manifest: serde_json::Value = serde_json::from_slice(&read(a.path().join("models/manifest.json"))).unwrap();
    let entries = manifest["variants"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let soft = entries.iter().find(|e| e["variant"] == "soft1").unwrap();
    assert_eq!(soft["status"], "ok");
    assert_eq!(soft["summary"]["mode"], "mono_soft");
    assert_eq!(soft["summary"]["sweep"].as_array().unwrap().len(), 2);

    let cfg_b = config(SMALL_HVAC, b.path());
    cmd_gen_data(&cfg_b).unwrap();
    cmd_train(&cfg_b, &[Variant::Taylor1, Variant::Soft1]).unwrap();
    for v in [Variant::Taylor1, Variant::Soft1] {
        assert_eq!(read(cfg.bundle_path(v)), read(cfg_b.bundle_path(v)), "{v}");
        assert_eq!(read(cfg.history_path(v)), read(cfg_b.history_path(v)), "{v}");
    }
}

#[test]
fn eval_follows_config_order_and_matches_direct_rollouts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SMALL_HVAC, dir.path());
    cmd_gen_data(&cfg).unwrap();
    cmd_train(&cfg, &[Variant::Taylor1, Variant::Soft1]).unwrap();
    let report = cmd_eval(&cfg).unwrap();
    assert_eq!(report.table.variants, vec!["soft1", "taylor1"]);
    assert_eq!(report.missing, vec![Variant::Mono1]);
    assert_eq!(report.table.steps(), 5);

    let test = DataManifest::load(&cfg).unwrap().test_set(&cfg).unwrap();
    let soft = load_bundle(&cfg.bundle_path(Variant::Soft1)).unwrap();
    let taylor = load_bundle(&cfg.bundle_path(Variant::Taylor1)).unwrap();
    let direct = comparison_table(
        &[("soft1", soft.as_predictor()), ("taylor1", taylor.as_predictor())],
        &test,
        5,
    )
    .unwrap();
    assert_eq!(report.table, direct);
    assert_eq!(fs::read_to_string(&report.table_path).unwrap(), direct.to_csv());
}

#[test]
fn true_plant_scores_perfectly_on_noise_free_test_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SMALL_HVAC, dir.path());
    cmd_gen_data(&cfg).unwrap();
    let test = DataManifest::load(&cfg).unwrap().test_set(&cfg).unwrap();
    let plant = match cfg.data().unwrap() {
        mtnn_cli::config::DataConfig::Hvac(b) => b.plant.clone(),
        other => panic!("{other:?}"),
    };
    let oracle: PlantModel<HvacPlant> = PlantModel(&plant);
    let table = comparison_table(&[("plant", &oracle as &dyn Predictor)], &test, 5).unwrap();
    for step in 1..=5 {
        assert_eq!(table.r2_of("plant", step), Some(1.0));
        assert_eq!(table.rmse_of("plant", step), Some(0.0));
    }
}

#[test]
fn pinned_input_box_gives_a_constant_input_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SMALL_TCLAB, dir.path());
    cmd_gen_data(&cfg).unwrap();
    assert!(cmd_train(&cfg, &[Variant::Mono1]).unwrap().all_ok());
    let report = cmd_mpc(&cfg).unwrap();
    assert_eq!(report.trace.rows.len(), 5);
    for r in &report.trace.rows {
        assert_eq!(r.u, vec![40.0, 30.0]);
        assert!(r.fault.is_none());
    }
    let csv = fs::read_to_string(&report.trace_path).unwrap();
    assert!(csv.starts_with("t,T1,T2,Q1,Q2,cost,converged\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn mpc_reports_a_missing_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(SMALL_TCLAB, dir.path());
    cfg.mpc.as_mut().unwrap().bundle = Some(dir.path().join("nope.json"));
    let err = format!("{:#}", cmd_mpc(&cfg).unwrap_err());
    assert!(err.contains("nope.json"), "{err}");
}

#[test]
fn mpc_rejects_a_direct_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(SMALL_TCLAB, dir.path());
    cmd_gen_data(&cfg).unwrap();
    cmd_train(&cfg, &[Variant::Baseline]).unwrap();
    cfg.mpc.as_mut().unwrap().bundle = Some(cfg.bundle_path(Variant::Baseline));
    let err = cmd_mpc(&cfg).unwrap_err().to_string();
    assert!(err.contains("Taylor"), "{err}");
}

#[test]
fn binary_exits_with_failure_on_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, "output_dir = \"out\"\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mtnn"))
        .args(["gen-data", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:") && stderr.contains("`data`"), "{stderr}");

    let out = Command::new(env!("CARGO_BIN_EXE_mtnn"))
        .args(["train", "--variants", "taylor9", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
}

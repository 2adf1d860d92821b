mod common;

use std::path::Path;
use std::process::{Command, Output};

use ensemble_patch::dataset::DatasetManifest;
use ensemble_patch::imaging::{write_png, Patch};
use ensemble_patch::metrics::MetricsReport;
use ensemble_patch::optimizer::Checkpoint;
use ensemble_patch_cli::RunConfig;
use serde_json::json;

use common::{make_scenes, toy, write_config, write_specified};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ensemble-patch"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let manifest = make_scenes(&dir.join("scenes"), 6, 3);
    write_specified(dir, 16);
    write_config(
        &dir.join("config.json"),
        &json!({
            "dataset": "scenes/manifest.json",
            "specified_image": "specified.png",
            "ensemble": {"members": [toy(1), toy(2)]},
            "eval_detectors": [toy(4), toy(5)],
            "train": {"e_max": 4, "batch_size": 3, "seed": 9, "checkpoint_every": 2},
            "patch": {"side": 16}
        }),
    );
    assert!(manifest.exists());
    dir.join("config.json")
}

#[test]
fn generate_writes_artifacts_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cli(&["generate", "--config", p(&config), "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["patch.png", "checkpoint.bin", "loss_history.csv", "report.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }

    let cfg = RunConfig::load(&config).unwrap();
    let report = MetricsReport::from_json(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config_digest, cfg.digest_hex());
    assert_eq!(report.created_at, Some(1_700_000_000));
    assert_eq!(report.map.len(), 2);
    assert!(report.ns.is_some() && report.asr.is_some() && report.loss.is_some());

    let history = std::fs::read_to_string(a.join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 5);
    assert!(history.starts_with("epoch,lr,obj,css,tv,nps,total"));

    let ck = Checkpoint::load(a.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.config_digest, cfg.digest());
    assert_eq!(ck.state.epoch, 4);
}

#[test]
fn missing_specified_image_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    std::fs::remove_file(dir.path().join("specified.png")).unwrap();
    let o = cli(&["generate", "--config", p(&config), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("specified.png"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let text = std::fs::read_to_string(&config).unwrap().replacen('{', "{\"learning_rate\": 0.1,", 1);
    std::fs::write(&config, text).unwrap();
    let o = cli(&["generate", "--config", p(&config), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn eval_of_grey_patch_scores_no_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let grey = dir.path().join("grey.png");
    write_png(&grey, Patch::filled(16, 0.5).image()).unwrap();
    let out = dir.path().join("eval");
    let dataset = dir.path().join("scenes/manifest.json");
    let o = cli(&["eval", "--patch", p(&grey), "--dataset", p(&dataset), "--config", p(&config), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report = MetricsReport::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.ts, Some(0.0));
    let variants: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(variants, ["benign", "grey", "random", "patch"]);
    assert_eq!(report.rows[1].ts, Some(0.0));

    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "variant,toy-4,toy-5,ts");
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn verify_theory_writes_passing_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("theory/rows.csv");
    let o = cli(&["verify-theory", "--trials", "200", "--seed", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("bound_m5_n614_g0.05,0.061200,0.061238,pass"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("variance_m5_rho0.3,0.440000,") && l.ends_with(",pass")));
    assert!(!text.contains(",fail"));
}

#[test]
fn make_scenes_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"count": 8, "persons_min": 1, "persons_max": 2, "seed": 4}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(cli(&["make-scenes", "--spec", p(&spec), "--out", p(out)]).status.success());
    }
    let manifest = DatasetManifest::load(a.join("manifest.json")).unwrap();
    assert_eq!(manifest.entries.len(), 8);
    for e in &manifest.entries {
        assert!((1..=2).contains(&e.boxes.len()));
        assert_eq!(std::fs::read(a.join(&e.file)).unwrap(), std::fs::read(b.join(&e.file)).unwrap());
    }
    let copy = dir.path().join("a/copy.json");
    manifest.save(&copy).unwrap();
    assert_eq!(DatasetManifest::load(&copy).unwrap(), manifest);
}

#[test]
fn bad_scene_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"count": 0}"#).unwrap();
    let o = cli(&["make-scenes", "--spec", p(&spec), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ensemble_patch::dataset::{generate_scenes, load_dataset, write_dataset, DatasetManifest, Sample, SyntheticSceneSpec};
use ensemble_patch::detectors::{detect, DetectionSet, DetectorAdapter, EnsembleMode, EnsembleSpec};
use ensemble_patch::imaging::{build_person_mask, compose, read_png, write_png, BoundingBox, Image, Patch, PlacementSpec};
use ensemble_patch::losses::{obj_loss, PrintableColorSet, SpecifiedImage};
use ensemble_patch::metrics::{
    attack_success_rate, mean_average_precision, naturalness_score, random_baseline, transferability_score,
    MapRow, MatchConfig, MetricsReport, NaturalnessInputs, TransferabilityInputs,
};
use ensemble_patch::optimizer::{init_patch, run, Checkpoint, CheckpointSink, EpochRecord, RunOutput, TrainingProblem};
use ensemble_patch::theory::{theory_csv, theory_suite, TheoryRow, Verdict};
use ensemble_patch::Error;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::CliError;

/// Score threshold at which a detection counts for attack success.
pub const ASR_THRESHOLD: f64 = 0.5;

pub const PATCH_FILE: &str = "patch.png";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";

/// Build time from `SOURCE_DATE_EPOCH`, if set.
fn created_at() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Input(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn load_specified(cfg: &RunConfig) -> Result<SpecifiedImage, CliError> {
    if !cfg.specified_image.is_file() {
        return Err(CliError::Input(format!(
            "specified image not found: {}",
            cfg.specified_image.display()
        )));
    }
    Ok(SpecifiedImage::new(&read_png(&cfg.specified_image)?, cfg.patch.side)?)
}

fn load_colors(cfg: &RunConfig) -> Result<PrintableColorSet, CliError> {
    Ok(match &cfg.printable_colors {
        Some(p) => PrintableColorSet::from_file(p)?,
        None => PrintableColorSet::lattice(5)?,
    })
}

fn load_samples(path: &Path) -> Result<Vec<Sample>, CliError> {
    let loaded = load_dataset(path)?;
    if loaded.clipped_boxes > 0 {
        eprintln!(
            "warning: {} box(es) in {} clipped to image bounds",
            loaded.clipped_boxes,
            path.display()
        );
    }
    if loaded.samples.is_empty() {
        return Err(CliError::Input(format!("dataset {} has no images", path.display())));
    }
    Ok(loaded.samples)
}

/// Every sample with `patch` composited onto its person boxes.
pub fn patched_images(samples: &[Sample], patch: &Patch, placement: &PlacementSpec) -> Result<Vec<Image>, Error> {
    samples
        .par_iter()
        .map(|s| {
            let layout = build_person_mask(s.image.height(), s.image.width(), &s.boxes, placement)?;
            compose(&s.image, patch, &layout)
        })
        .collect()
}

fn detect_all(detector: &dyn DetectorAdapter, images: &[Image]) -> Result<Vec<DetectionSet>, Error> {
    images.par_iter().map(|img| detect(detector, img)).collect()
}

fn ground_truth(samples: &[Sample]) -> Vec<Vec<BoundingBox>> {
    samples.iter().map(|s| s.boxes.clone()).collect()
}

/// mAP with the patch and ASR against the unpatched images, for one detector.
struct AttackScores {
    map: f64,
    asr: f64,
}

fn attack_scores(
    detector: &dyn DetectorAdapter,
    benign: &[Image],
    patched: &[Image],
    gt: &[Vec<BoundingBox>],
) -> Result<AttackScores, Error> {
    let cfg = MatchConfig::default();
    let benign_sets = detect_all(detector, benign)?;
    let patched_sets = detect_all(detector, patched)?;
    Ok(AttackScores {
        map: mean_average_precision(&patched_sets, gt, &cfg)?,
        asr: attack_success_rate(&benign_sets, &patched_sets, gt, ASR_THRESHOLD, &cfg)?,
    })
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "lr", "obj", "css", "tv", "nps", "total"])
        .expect("in-memory csv");
    for r in history {
        let l = &r.loss;
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            l.obj.to_string(),
            l.css.to_string(),
            l.tv.to_string(),
            l.nps.to_string(),
            l.total.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush to vec")).expect("utf-8 csv")
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub out_dir: PathBuf,
    pub report: MetricsReport,
    pub run: RunOutput,
}

/// Trains a patch and writes the patch PNG, checkpoint, loss history and a training-set report.
pub fn cmd_generate(config_path: &Path, out: Option<&Path>) -> Result<GenerateSummary, CliError> {
    let cfg = RunConfig::load(config_path)?;
    let out_dir = match (out, &cfg.output) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => return Err(CliError::Input("no output directory: pass --out or set `output`".into())),
    };
    let specified = load_specified(&cfg)?;
    let samples = load_samples(&cfg.dataset)?;
    let colors = load_colors(&cfg)?;
    let ensemble = cfg.ensemble.build()?;
    let train = cfg.train_config();
    let digest = cfg.digest();
    create_dir(&out_dir)?;

    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let sink = CheckpointSink {
        path: Some(checkpoint_path.clone()),
        config_digest: digest,
    };
    let problem = TrainingProblem {
        dataset: &samples,
        ensemble: &ensemble,
        specified: &specified,
        colors: &colors,
    };
    let output = match run(&problem, &train, &sink) {
        Ok(o) => o,
        Err(failure) => {
            if let Some(good) = &failure.last_good {
                Checkpoint::from_state(good, digest).save(&checkpoint_path)?;
            }
            return Err(failure.error.into());
        }
    };

    write_png(out_dir.join(PATCH_FILE), output.patch.image())?;
    Checkpoint::from_state(&output.state, digest).save(&checkpoint_path)?;
    write_file(&out_dir.join(HISTORY_FILE), history_csv(&output.history))?;

    let report = training_report(&cfg, &samples, &ensemble, &specified, &output)?;
    report.write(&out_dir.join(REPORT_FILE))?;
    Ok(GenerateSummary {
        out_dir,
        report,
        run: output,
    })
}

fn training_report(
    cfg: &RunConfig,
    samples: &[Sample],
    ensemble: &EnsembleSpec,
    specified: &SpecifiedImage,
    output: &RunOutput,
) -> Result<MetricsReport, CliError> {
    let train = cfg.train_config();
    let benign: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let patched = patched_images(samples, &output.patch, &cfg.placement)?;
    let initial = init_patch(train.patch_side, train.init_mean, train.init_std, train.seed)?;
    let initially_patched = patched_images(samples, &initial, &cfg.placement)?;
    let gt = ground_truth(samples);

    let mut report = MetricsReport::new(cfg.digest_hex());
    report.created_at = created_at();
    let mut asr_sum = 0.0;
    for member in ensemble.members() {
        let scores = attack_scores(member.as_ref(), &benign, &patched, &gt)?;
        report.map.insert(member.name().to_string(), scores.map);
        report.extra.insert(format!("asr/{}", member.name()), scores.asr);
        asr_sum += scores.asr;
    }
    report.asr = Some(asr_sum / ensemble.len() as f64);
    report.rows.push(MapRow {
        variant: "patch".into(),
        map: report.map.clone(),
        ts: None,
    });
    report.ns = Some(naturalness_score(&NaturalnessInputs::new(
        output.patch.image().clone(),
        specified.image().clone(),
        train.seed,
    ))?);
    report.loss = output.history.last().map(|r| r.loss);

    let average = ensemble.with_mode(EnsembleMode::Average);
    let extra = [
        ("confidence/benign", obj_loss(&average, &benign)?),
        ("confidence/initial", obj_loss(&average, &initially_patched)?),
        ("confidence/final", obj_loss(&average, &patched)?),
        ("obj/final_patch", obj_loss(ensemble, &patched)?),
        ("epochs", output.history.len() as f64),
        ("decays", output.state.decays as f64),
        ("converged", if output.converged { 1.0 } else { 0.0 }),
    ];
    report.extra.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
    Ok(report)
}

/// Scores a patch and the grey and random baselines on a dataset, per detector.
pub fn cmd_eval(patch_path: &Path, dataset: &Path, config_path: &Path, out_dir: &Path) -> Result<MetricsReport, CliError> {
    let cfg = RunConfig::load(config_path)?;
    if !patch_path.is_file() {
        return Err(CliError::Input(format!("patch not found: {}", patch_path.display())));
    }
    let patch = Patch::from_image(read_png(patch_path)?)?;
    let specified = load_specified(&cfg)?;
    let samples = load_samples(dataset)?;
    let detectors: Vec<Arc<dyn DetectorAdapter>> = if cfg.eval_detectors.is_empty() {
        cfg.ensemble.build()?.members().to_vec()
    } else {
        cfg.eval_detectors.iter().map(|d| d.build()).collect::<Result<_, _>>()?
    };
    create_dir(out_dir)?;

    let side = patch.side();
    let seed = cfg.train.seed;
    let variants = [
        ("grey", Patch::filled(side, 0.5)),
        ("random", Patch::from_image(random_baseline(side, side, seed))?),
        ("patch", patch.clone()),
    ];
    let benign: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let gt = ground_truth(&samples);
    let match_cfg = MatchConfig::default();

    let mut report = MetricsReport::new(cfg.digest_hex());
    report.created_at = created_at();
    let mut benign_row = BTreeMap::new();
    let mut variant_maps: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); variants.len()];
    let mut asr_sum = 0.0;
    for det in &detectors {
        let name = det.name().to_string();
        let benign_sets = detect_all(det.as_ref(), &benign)?;
        benign_row.insert(name.clone(), mean_average_precision(&benign_sets, &gt, &match_cfg)?);
        for (k, (variant, p)) in variants.iter().enumerate() {
            let sets = detect_all(det.as_ref(), &patched_images(&samples, p, &cfg.placement)?)?;
            variant_maps[k].insert(name.clone(), mean_average_precision(&sets, &gt, &match_cfg)?);
            if *variant == "patch" {
                let asr = attack_success_rate(&benign_sets, &sets, &gt, ASR_THRESHOLD, &match_cfg)?;
                report.extra.insert(format!("asr/{name}"), asr);
                asr_sum += asr;
            }
        }
    }
    let column = |m: &BTreeMap<String, f64>| -> Vec<f64> { m.values().copied().collect() };
    let grey = column(&variant_maps[0]);
    let random = column(&variant_maps[1]);
    report.rows.push(MapRow {
        variant: "benign".into(),
        map: benign_row,
        ts: None,
    });
    for ((variant, _), map) in variants.iter().zip(&variant_maps) {
        let ts = transferability_score(&TransferabilityInputs {
            patched: column(map),
            grey: grey.clone(),
            random: random.clone(),
        })?;
        report.rows.push(MapRow {
            variant: variant.to_string(),
            map: map.clone(),
            ts: Some(ts),
        });
    }
    report.map = variant_maps[2].clone();
    report.ts = report.rows.last().and_then(|r| r.ts);
    report.asr = Some(asr_sum / detectors.len() as f64);
    let specified = SpecifiedImage::new(specified.image(), side)?;
    report.ns = Some(naturalness_score(&NaturalnessInputs::new(
        patch.image().clone(),
        specified.image().clone(),
        seed,
    ))?);

    report.write(&out_dir.join(REPORT_FILE))?;
    write_file(&out_dir.join(EVAL_CSV_FILE), report.to_csv())?;
    Ok(report)
}

/// Runs the theory checks and writes them as CSV; fails if any contract row fails.
pub fn cmd_verify_theory(trials: usize, seed: u64, out: &Path) -> Result<Vec<TheoryRow>, CliError> {
    if trials == 0 {
        return Err(CliError::Input("--trials must be at least 1".into()));
    }
    let rows = theory_suite(trials, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, theory_csv(&rows))?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| r.verdict == Verdict::Fail)
        .map(|r| r.claim.as_str())
        .collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::Failed(format!("theory checks failed: {}", failed.join(", "))))
    }
}

/// Renders a synthetic scene set described by a JSON spec.
pub fn cmd_make_scenes(spec_path: &Path, out_dir: &Path) -> Result<DatasetManifest, CliError> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| CliError::Input(format!("cannot read scene spec {}: {e}", spec_path.display())))?;
    let spec: SyntheticSceneSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    let samples = generate_scenes(&spec)?;
    Ok(write_dataset(&samples, out_dir)?)
}

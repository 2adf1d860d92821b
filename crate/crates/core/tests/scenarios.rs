use std::sync::Arc;

use ensemble_patch::dataset::{generate_scenes, SyntheticSceneSpec};
use ensemble_patch::detectors::{detect, make_toy_detector, DetectorAdapter, EnsembleMode, EnsembleSpec};
use ensemble_patch::imaging::{apply_transform, build_person_mask, compose, sample_transform, Image, TransformParams};
use ensemble_patch::losses::{obj_loss, PrintableColorSet, SpecifiedImage};
use ensemble_patch::metrics::{mean_average_precision, MatchConfig};
use ensemble_patch::optimizer::{run, CheckpointSink, TrainConfig, TrainState, TrainingProblem};

#[test]
fn toy_detectors_find_rendered_persons() {
    for seed in [0, 7] {
        let scenes = generate_scenes(&SyntheticSceneSpec { count: 24, seed, ..Default::default() }).unwrap();
        let gt: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
        for det_seed in [1, 2, 3, 11] {
            let det = make_toy_detector(det_seed, 3).unwrap();
            let sets: Vec<_> = scenes.iter().map(|s| detect(&det, &s.image).unwrap()).collect();
            let map = mean_average_precision(&sets, &gt, &MatchConfig::default()).unwrap();
            assert!(map >= 0.9, "scenes {seed}, detector {det_seed}: mAP {map}");
        }
    }
}

#[test]
fn sampled_rotations_are_centred_and_in_range() {
    let n = 10_000;
    let mut sum = 0.0;
    for seed in 0..n {
        let t = sample_transform(seed);
        sum += t.rotation;
        assert!(t.rotation.abs() <= 20.0);
        assert!((0.0..=0.1).contains(&t.crop_fraction));
        assert!((0.8..=1.2).contains(&t.scale));
        assert!(t.brightness_shift.abs() <= 0.1);
        assert!((0.0..=0.02).contains(&t.noise_sigma));
    }
    assert!((sum / n as f64).abs() <= 1.0);
}

fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.as_slice().len() as f64
}

#[test]
fn rotation_preserves_radially_symmetric_images() {
    let n = 64;
    let c = (n as f64 - 1.0) / 2.0;
    let blob = Image::from_fn(n, n, |y, x, _| {
        let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
        (-r2 / 128.0).exp()
    });
    let bar = Image::from_fn(n, n, |y, x, _| {
        if (x as f64 - c).abs() < 4.0 && (y as f64 - c).abs() < 24.0 { 1.0 } else { 0.0 }
    });
    let rot = TransformParams::rotation(20.0);
    let symmetric = mean_abs_diff(&blob, &apply_transform(&blob, &rot));
    let asymmetric = mean_abs_diff(&bar, &apply_transform(&bar, &rot));
    // Bilinear resampling error of the blob; a hard-edged disk sits near 1e-2.
    assert!(symmetric < 5e-4, "{symmetric}");
    assert!(asymmetric > 50.0 * symmetric, "{asymmetric} vs {symmetric}");
}

#[test]
fn fifty_steps_lower_the_ensemble_objective() {
    let scenes = generate_scenes(&SyntheticSceneSpec { count: 32, seed: 1, ..Default::default() }).unwrap();
    let members: Vec<Arc<dyn DetectorAdapter>> =
        (1..=3).map(|s| Arc::new(make_toy_detector(s, 3).unwrap()) as Arc<dyn DetectorAdapter>).collect();
    let ensemble = EnsembleSpec::new(members, EnsembleMode::Average).unwrap();
    let mut config = TrainConfig { e_max: 25, plateau_patience: 25, seed: 3, ..Default::default() };
    config.placement.scale = 0.6;
    let specified = SpecifiedImage::new(&Image::from_fn(48, 48, |y, _, c| 0.2 + 0.6 * (y as f64 / 47.0) * (c as f64 / 2.0)), 48).unwrap();
    let colors = PrintableColorSet::lattice(5).unwrap();
    let problem = TrainingProblem { dataset: &scenes, ensemble: &ensemble, specified: &specified, colors: &colors };
    let out = run(&problem, &config, &CheckpointSink::default()).unwrap();
    assert_eq!(out.state.adam_t, 50);

    let objective = |patch| {
        let imgs: Vec<Image> = scenes
            .iter()
            .map(|s| {
                let layout = build_person_mask(s.image.height(), s.image.width(), &s.boxes, &config.placement).unwrap();
                compose(&s.image, patch, &layout).unwrap()
            })
            .collect();
        obj_loss(&ensemble, &imgs).unwrap()
    };
    let initial = TrainState::new(&config).unwrap().patch;
    let before = objective(&initial);
    let after = objective(&out.state.patch);
    assert!(after <= 0.75 * before, "{before} -> {after}");
}

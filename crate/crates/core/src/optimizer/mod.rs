//! Patch initialization, Adam updates, plateau learning-rate decay and the training loop.

mod checkpoint;

pub use checkpoint::Checkpoint;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::detectors::{EnsembleMode, EnsembleSpec};
use crate::error::{Error, Result};
use crate::imaging::{build_person_mask, Grid, Patch, PlacementSpec, TransformRanges};
use crate::losses::{
    LossBreakdown, LossContext, LossWeights, PatchedScene, PrintableColorSet, SpecifiedImage,
};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub e_max: u64,
    pub plateau_patience: u64,
    pub plateau_eps: f64,
    pub batch_size: usize,
    pub transforms_per_step: usize,
    pub seed: u64,
    pub ensemble_mode: EnsembleMode,
    pub weights: LossWeights,
    pub init_mean: f64,
    pub init_std: f64,
    pub patch_side: usize,
    pub checkpoint_every: u64,
    pub placement: PlacementSpec,
    /// Ranges of the per-image and similarity-loss transforms.
    pub transforms: TransformRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            gamma: 0.01,
            e_max: 1000,
            plateau_patience: 10,
            plateau_eps: 1e-4,
            batch_size: 16,
            transforms_per_step: 4,
            seed: 0,
            ensemble_mode: EnsembleMode::Average,
            weights: LossWeights::default(),
            init_mean: 0.5,
            init_std: 0.1,
            patch_side: 48,
            checkpoint_every: 50,
            placement: PlacementSpec::default(),
            transforms: TransformRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.transforms_per_step == 0 {
            return fail("transforms_per_step must be at least 1".into());
        }
        if self.plateau_patience == 0 {
            return fail("plateau_patience must be at least 1".into());
        }
        if !(self.plateau_eps >= 0.0 && self.plateau_eps.is_finite()) {
            return fail(format!("plateau_eps must be >= 0, got {}", self.plateau_eps));
        }
        if self.patch_side == 0 {
            return fail("patch_side must be at least 1".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite() && self.init_mean.is_finite()) {
            return fail("init_mean and init_std must be finite, init_std >= 0".into());
        }
        self.weights.validate()?;
        self.placement.validate()?;
        self.transforms.validate()
    }
}

/// Rounds every value to the nearest `f32`, which is what checkpoints store.
fn to_f32_grid(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// Gaussian patch with the given mean and standard deviation, clamped to `[0, 1]`.
pub fn init_patch(side: usize, mean: f64, std: f64, seed: u64) -> Result<Patch> {
    if side == 0 {
        return Err(Error::invalid("patch side must be at least 1"));
    }
    let normal = Normal::new(mean, std)
        .map_err(|e| Error::invalid(format!("bad initial distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..side * side * 3)
        .map(|_| normal.sample(&mut rng).clamp(0.0, 1.0))
        .collect();
    to_f32_grid(&mut values);
    Patch::from_values_clamped(side, values)
}

/// One epoch's record in the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub patch: Patch,
    pub epoch: u64,
    pub lr_current: f64,
    pub best_total: f64,
    pub epochs_since_improvement: u64,
    pub decays: u32,
    pub last_total: f64,
    pub adam_t: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub best_patch: Patch,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let patch = init_patch(config.patch_side, config.init_mean, config.init_std, config.seed)?;
        let n = patch.as_slice().len();
        // Separate stream so the initial patch and the training draws are independent.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            best_patch: patch.clone(),
            patch,
            epoch: 0,
            lr_current: config.lr,
            best_total: f64::INFINITY,
            epochs_since_improvement: 0,
            decays: 0,
            last_total: f64::NAN,
            adam_t: 0,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            rng,
            history: Vec::new(),
        })
    }

    /// Best epoch-mean total loss seen so far; the plateau counter's reference.
    pub fn best_total(&self) -> f64 {
        self.best_total
    }

    /// Adam update with the current learning rate, then clamp to `[0, 1]`.
    pub fn apply_gradient(&mut self, grad: &Grid) -> Result<()> {
        let n = self.adam_m.len();
        if grad.len() != n {
            return Err(Error::invalid("gradient does not match the patch"));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric {
                component: "gradient".into(),
                value: f64::NAN,
            });
        }
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let side = self.patch.side();
        let mut values = self.patch.as_slice().to_vec();
        for (i, &g) in grad.as_slice().iter().enumerate() {
            let m = ADAM_BETA1 * self.adam_m[i] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
            self.adam_m[i] = m;
            self.adam_v[i] = v;
            if g != 0.0 || m != 0.0 {
                values[i] -= self.lr_current * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
            }
        }
        to_f32_grid(&mut self.adam_m);
        to_f32_grid(&mut self.adam_v);
        for v in &mut values {
            *v = v.clamp(0.0, 1.0);
        }
        to_f32_grid(&mut values);
        self.patch = Patch::from_values_clamped(side, values)?;
        Ok(())
    }
}

/// End-of-epoch bookkeeping: tracks the best total and decays the learning rate by
/// `gamma` once the total has failed to improve by `plateau_eps` for
/// `plateau_patience` consecutive epochs. Returns whether a decay fired.
pub fn plateau_schedule(state: &mut TrainState, current_total: f64, config: &TrainConfig) -> bool {
    if state.best_total - current_total < config.plateau_eps {
        state.epochs_since_improvement += 1;
    } else {
        state.epochs_since_improvement = 0;
    }
    state.best_total = state.best_total.min(current_total);
    if state.epochs_since_improvement >= config.plateau_patience {
        state.lr_current *= config.gamma;
        state.epochs_since_improvement = 0;
        state.decays += 1;
        true
    } else {
        false
    }
}

/// Fixed inputs of a training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainingProblem<'a> {
    pub dataset: &'a [Sample],
    pub ensemble: &'a EnsembleSpec,
    pub specified: &'a SpecifiedImage,
    pub colors: &'a PrintableColorSet,
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn step(
    state: &mut TrainState,
    batch: &[Sample],
    problem: &TrainingProblem<'_>,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }
    let scenes = batch
        .iter()
        .map(|s| {
            let layout = build_person_mask(
                s.image.height(),
                s.image.width(),
                &s.boxes,
                &config.placement,
            )?;
            Ok(PatchedScene {
                image: s.image.clone(),
                layout,
                transform: config.transforms.sample(state.rng.next_u64()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let css_transforms: Vec<_> = (0..config.transforms_per_step)
        .map(|_| config.transforms.sample(state.rng.next_u64()))
        .collect();
    let ensemble = problem.ensemble.with_mode(config.ensemble_mode);
    let ctx = LossContext {
        weights: &config.weights,
        scenes: &scenes,
        ensemble: &ensemble,
        specified: problem.specified,
        css_transforms: &css_transforms,
        colors: problem.colors,
    };
    let (loss, grad) = ctx.gradient(state.patch.grid())?;
    state.apply_gradient(&grad)?;
    Ok(loss)
}

/// Where and how often [`run`] writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    pub path: Option<PathBuf>,
    pub config_digest: [u8; 32],
}

impl CheckpointSink {
    fn write(&self, state: &TrainState) -> Result<()> {
        match &self.path {
            Some(p) => Checkpoint::from_state(state, self.config_digest).save(p),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Patch with the lowest epoch-mean total loss (the initial patch if no epoch ran).
    pub patch: Patch,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
    pub converged: bool,
}

/// Error from [`run`] together with the last state that completed an epoch, if any.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub last_good: Option<Box<TrainState>>,
}

/// Trains until `e_max` epochs or convergence (a total change below `plateau_eps`
/// once two decays have fired).
pub fn run(
    problem: &TrainingProblem<'_>,
    config: &TrainConfig,
    sink: &CheckpointSink,
) -> std::result::Result<RunOutput, RunFailure> {
    let fresh = |error| RunFailure {
        error,
        last_good: None,
    };
    if problem.dataset.is_empty() {
        return Err(fresh(Error::invalid("training dataset is empty")));
    }
    problem.ensemble.require_differentiable().map_err(fresh)?;
    let state = TrainState::new(config).map_err(fresh)?;
    if problem.specified.side() != config.patch_side {
        return Err(RunFailure {
            error: Error::invalid(format!(
                "specified image side {} differs from patch side {}",
                problem.specified.side(),
                config.patch_side
            )),
            last_good: Some(Box::new(state)),
        });
    }
    resume(problem, config, sink, state)
}

/// Continues training from `state`.
pub fn resume(
    problem: &TrainingProblem<'_>,
    config: &TrainConfig,
    sink: &CheckpointSink,
    mut state: TrainState,
) -> std::result::Result<RunOutput, RunFailure> {
    let mut best_patch_total = state
        .history
        .iter()
        .map(|r| r.loss.total)
        .fold(f64::INFINITY, f64::min);
    let mut order: Vec<usize> = (0..problem.dataset.len()).collect();
    let mut converged = false;
    while state.epoch < config.e_max {
        let good = state.clone();
        let fail = |error: Error, good: TrainState| {
            let _ = sink.write(&good);
            RunFailure {
                error,
                last_good: Some(Box::new(good)),
            }
        };
        order.shuffle(&mut state.rng);
        let mut sums = [0.0; 5];
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| problem.dataset[i].clone()).collect();
            let loss = match step(&mut state, &batch, problem, config) {
                Ok(l) => l,
                Err(e) => return Err(fail(e, good)),
            };
            for (s, v) in sums.iter_mut().zip([loss.obj, loss.css, loss.tv, loss.nps, loss.total]) {
                *s += v;
            }
            steps += 1;
        }
        let k = steps as f64;
        let loss = LossBreakdown {
            obj: sums[0] / k,
            css: sums[1] / k,
            tv: sums[2] / k,
            nps: sums[3] / k,
            total: sums[4] / k,
        };
        state.epoch += 1;
        state.history.push(EpochRecord {
            epoch: state.epoch,
            lr: state.lr_current,
            loss,
        });
        if loss.total < best_patch_total {
            best_patch_total = loss.total;
            state.best_patch = state.patch.clone();
        }
        let previous = state.last_total;
        state.last_total = loss.total;
        plateau_schedule(&mut state, loss.total, config);
        if config.checkpoint_every > 0 && state.epoch.is_multiple_of(config.checkpoint_every) {
            if let Err(e) = sink.write(&state) {
                return Err(fail(e, good));
            }
        }
        if state.decays >= 2 && (loss.total - previous).abs() < config.plateau_eps {
            converged = true;
            break;
        }
    }
    Ok(RunOutput {
        patch: state.best_patch.clone(),
        history: state.history.clone(),
        state,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_patch_cases() {
        let flat = init_patch(6, 0.5, 0.0, 3).unwrap();
        assert!(flat.as_slice().iter().all(|&v| v == 0.5));
        assert_eq!(init_patch(8, 0.5, 0.1, 4).unwrap(), init_patch(8, 0.5, 0.1, 4).unwrap());
        let big = init_patch(64, 0.5, 0.1, 1).unwrap();
        let mean = big.as_slice().iter().sum::<f64>() / big.as_slice().len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert!(init_patch(0, 0.5, 0.1, 1).is_err());
    }

    fn state(lr: f64) -> (TrainState, TrainConfig) {
        let cfg = TrainConfig {
            lr,
            patch_side: 4,
            ..Default::default()
        };
        (TrainState::new(&cfg).unwrap(), cfg)
    }

    #[test]
    fn flat_trace_decays_once() {
        let (mut st, cfg) = state(0.1);
        let fired: usize = (0..=cfg.plateau_patience)
            .map(|_| plateau_schedule(&mut st, 1.0, &cfg) as usize)
            .sum();
        assert_eq!(fired, 1);
        assert_eq!(st.decays, 1);
        assert!((st.lr_current - 0.001).abs() < 1e-15);
        assert_eq!(st.epochs_since_improvement, 0);
    }

    #[test]
    fn decreasing_trace_never_decays() {
        let (mut st, cfg) = state(0.1);
        for i in 0..100 {
            assert!(!plateau_schedule(&mut st, 10.0 - 0.01 * i as f64, &cfg));
        }
        assert_eq!(st.lr_current, 0.1);
    }

    #[test]
    fn zero_gradient_keeps_patch() {
        let (mut st, _) = state(0.1);
        let before = st.patch.clone();
        st.apply_gradient(&Grid::zeros(4, 4, 3)).unwrap();
        assert_eq!(st.patch, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut st, _) = state(0.01);
        let before = st.patch.as_slice().to_vec();
        let g = Grid::filled(4, 4, 3, 3.0);
        st.apply_gradient(&g).unwrap();
        for (a, b) in before.iter().zip(st.patch.as_slice()) {
            if *a > 0.02 {
                assert!((a - b - 0.01).abs() < 1e-6, "{a} -> {b}");
            }
        }
        let bad = Grid::filled(4, 4, 3, f64::NAN);
        assert!(matches!(st.apply_gradient(&bad), Err(Error::Numeric { .. })));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        c.gamma = 0.5;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}

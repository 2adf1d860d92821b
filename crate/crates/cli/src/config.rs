use std::path::{Path, PathBuf};
use std::sync::Arc;

use ensemble_patch::detectors::{make_toy_detector, DetectorAdapter, EnsembleMode, EnsembleSpec};
use ensemble_patch::imaging::{PlacementSpec, TransformRanges};
use ensemble_patch::losses::LossWeights;
use ensemble_patch::optimizer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// A detector entry of the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DetectorConfig {
    Toy {
        seed: u64,
        #[serde(default = "default_templates")]
        templates: usize,
    },
}

fn default_templates() -> usize {
    3
}

impl DetectorConfig {
    pub fn build(&self) -> Result<Arc<dyn DetectorAdapter>, CliError> {
        match *self {
            DetectorConfig::Toy { seed, templates } => Ok(Arc::new(make_toy_detector(seed, templates)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub mode: EnsembleMode,
    pub members: Vec<DetectorConfig>,
}

impl EnsembleConfig {
    pub fn build(&self) -> Result<EnsembleSpec, CliError> {
        let members = self.members.iter().map(DetectorConfig::build).collect::<Result<_, _>>()?;
        Ok(EnsembleSpec::new(members, self.mode)?)
    }
}

/// Optimizer settings; the remaining training knobs live in their own sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub gamma: f64,
    pub e_max: u64,
    pub plateau_patience: u64,
    pub plateau_eps: f64,
    pub batch_size: usize,
    pub transforms_per_step: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            gamma: t.gamma,
            e_max: t.e_max,
            plateau_patience: t.plateau_patience,
            plateau_eps: t.plateau_eps,
            batch_size: t.batch_size,
            transforms_per_step: t.transforms_per_step,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSection {
    pub side: usize,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for PatchSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            side: t.patch_side,
            init_mean: t.init_mean,
            init_std: t.init_std,
        }
    }
}

/// Full run configuration. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Manifest of the training scenes.
    pub dataset: PathBuf,
    pub specified_image: PathBuf,
    /// Printable colour list; a 5-level RGB lattice when absent.
    #[serde(default)]
    pub printable_colors: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub ensemble: EnsembleConfig,
    /// Detectors scored by `eval`; the ensemble members when empty.
    #[serde(default)]
    pub eval_detectors: Vec<DetectorConfig>,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub patch: PatchSection,
    #[serde(default)]
    pub placement: PlacementSpec,
    #[serde(default)]
    pub transforms: TransformRanges,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Input(format!("{}: {e}", origin.display())))?;
        let base = origin.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.specified_image);
        if let Some(p) = cfg.printable_colors.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.output.as_mut() {
            resolve(p);
        }
        cfg.train_config()
            .validate()
            .map_err(|e| CliError::Input(format!("{}: {e}", origin.display())))?;
        if cfg.ensemble.members.is_empty() {
            return Err(CliError::Input(format!("{}: ensemble has no members", origin.display())));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            gamma: t.gamma,
            e_max: t.e_max,
            plateau_patience: t.plateau_patience,
            plateau_eps: t.plateau_eps,
            batch_size: t.batch_size,
            transforms_per_step: t.transforms_per_step,
            seed: t.seed,
            ensemble_mode: self.ensemble.mode,
            weights: self.weights,
            init_mean: self.patch.init_mean,
            init_std: self.patch.init_std,
            patch_side: self.patch.side,
            checkpoint_every: t.checkpoint_every,
            placement: self.placement,
            transforms: self.transforms,
        }
    }

    /// Compact JSON with sorted keys and every default filled in.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config is serializable");
        serde_json::to_string(&value).expect("value is serializable")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}

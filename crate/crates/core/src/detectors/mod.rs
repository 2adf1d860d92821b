//! Detector contract, the deterministic toy template detector, and ensembling.

mod nms;
mod toy;

pub use nms::non_maximum_suppression;
pub use toy::{make_toy_detector, Silhouette, Template, ToyTemplateDetector};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BoundingBox, Grid, Image, PERSON_LABEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub class_scores: BTreeMap<String, f64>,
}

impl Detection {
    pub fn person(bbox: BoundingBox, objectness: f64) -> Self {
        let mut class_scores = BTreeMap::new();
        class_scores.insert(PERSON_LABEL.to_string(), 1.0);
        Self {
            bbox,
            objectness,
            class_scores,
        }
    }

    pub fn class_score(&self, label: &str) -> f64 {
        self.class_scores.get(label).copied().unwrap_or(0.0)
    }

    /// Objectness times the person class score; the ranking key for metrics.
    pub fn person_score(&self) -> f64 {
        self.objectness * self.class_score(PERSON_LABEL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub source_detector: String,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(source_detector: impl Into<String>, mut detections: Vec<Detection>) -> Self {
        sort_by_person_score(&mut detections);
        Self {
            source_detector: source_detector.into(),
            detections,
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn above(&self, threshold: f64) -> impl Iterator<Item = &Detection> {
        self.detections
            .iter()
            .filter(move |d| d.person_score() >= threshold)
    }
}

/// Stable sort by descending person score.
pub fn sort_by_person_score(detections: &mut [Detection]) {
    detections.sort_by(|a, b| b.person_score().total_cmp(&a.person_score()));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub differentiable: bool,
}

/// A person detector usable by the losses and metrics.
///
/// Implementations must be deterministic: the same image always yields the same
/// detections and confidence.
pub trait DetectorAdapter: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    fn detect(&self, image: &Image) -> Result<DetectionSet>;

    /// Strongest person evidence anywhere in the image, in `[0, 1]`.
    fn person_confidence(&self, image: &Image) -> Result<f64>;

    /// [`Self::person_confidence`] together with its gradient with respect to the image values.
    fn person_confidence_grad(&self, image: &Image) -> Result<(f64, Grid)> {
        let _ = image;
        Err(Error::ContractViolation(format!(
            "detector `{}` is not differentiable",
            self.name()
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// Uniform mean of member confidences.
    #[default]
    Average,
    /// Largest member confidence.
    Max,
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnsembleMode::Average => f.write_str("average"),
            EnsembleMode::Max => f.write_str("max"),
        }
    }
}

impl EnsembleMode {
    /// Combines member values; `values` must be nonempty.
    pub fn combine(self, values: &[f64]) -> f64 {
        match self {
            EnsembleMode::Average => values.iter().sum::<f64>() / values.len() as f64,
            EnsembleMode::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    members: Vec<Arc<dyn DetectorAdapter>>,
    mode: EnsembleMode,
}

impl EnsembleSpec {
    pub fn new(members: Vec<Arc<dyn DetectorAdapter>>, mode: EnsembleMode) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        Ok(Self { members, mode })
    }

    pub fn members(&self) -> &[Arc<dyn DetectorAdapter>] {
        &self.members
    }

    pub fn mode(&self) -> EnsembleMode {
        self.mode
    }

    pub fn with_mode(&self, mode: EnsembleMode) -> Self {
        Self {
            members: self.members.clone(),
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_differentiable(&self) -> bool {
        self.members.iter().all(|m| m.capabilities().differentiable)
    }

    pub fn require_differentiable(&self) -> Result<()> {
        match self.members.iter().find(|m| !m.capabilities().differentiable) {
            Some(m) => Err(Error::ContractViolation(format!(
                "ensemble member `{}` is not differentiable",
                m.name()
            ))),
            None => Ok(()),
        }
    }

    pub fn member_confidences(&self, image: &Image) -> Result<Vec<f64>> {
        self.members
            .iter()
            .map(|m| m.person_confidence(image))
            .collect()
    }

    /// Combined confidence and its image gradient. In max mode the gradient is that
    /// of the first member attaining the maximum.
    pub fn confidence_grad(&self, image: &Image) -> Result<(f64, Grid)> {
        self.require_differentiable()?;
        let parts = self
            .members
            .iter()
            .map(|m| m.person_confidence_grad(image))
            .collect::<Result<Vec<_>>>()?;
        match self.mode {
            EnsembleMode::Average => {
                let scale = 1.0 / parts.len() as f64;
                let mut grad = Grid::zeros(image.height(), image.width(), Image::CHANNELS);
                let mut value = 0.0;
                for (v, g) in &parts {
                    value += v;
                    grad.add_scaled(g, scale);
                }
                Ok((value * scale, grad))
            }
            EnsembleMode::Max => {
                let mut best = 0;
                for (i, (v, _)) in parts.iter().enumerate() {
                    if *v > parts[best].0 {
                        best = i;
                    }
                }
                Ok(parts.into_iter().nth(best).expect("nonempty"))
            }
        }
    }
}

/// Person confidence of a single adapter.
pub fn person_confidence(detector: &dyn DetectorAdapter, image: &Image) -> Result<f64> {
    detector.person_confidence(image)
}

pub fn detect(detector: &dyn DetectorAdapter, image: &Image) -> Result<DetectionSet> {
    detector.detect(image)
}

/// Average or max of the member person confidences.
pub fn ensemble_confidence(ensemble: &EnsembleSpec, image: &Image) -> Result<f64> {
    let values = ensemble.member_confidences(image)?;
    Ok(ensemble.mode.combine(&values))
}

/// Adapter that reports a fixed confidence and no detections; for wiring tests.
#[derive(Debug, Clone)]
pub struct ConstantDetector {
    pub name: String,
    pub confidence: f64,
}

impl DetectorAdapter for ConstantDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            differentiable: true,
        }
    }

    fn detect(&self, _image: &Image) -> Result<DetectionSet> {
        Ok(DetectionSet::new(self.name.clone(), Vec::new()))
    }

    fn person_confidence(&self, _image: &Image) -> Result<f64> {
        Ok(self.confidence)
    }

    fn person_confidence_grad(&self, image: &Image) -> Result<(f64, Grid)> {
        Ok((
            self.confidence,
            Grid::zeros(image.height(), image.width(), Image::CHANNELS),
        ))
    }
}

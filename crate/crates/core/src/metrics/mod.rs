//! Detection matching, average precision, naturalness, transferability and attack
//! success rate.

mod report;

pub use report::{MapRow, MetricsReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::{Detection, DetectionSet};
use crate::error::{Error, Result};
use crate::imaging::{BoundingBox, Image, PERSON_LABEL};

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub person_label: String,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            person_label: PERSON_LABEL.to_string(),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "iou_threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }

    fn score(&self, d: &Detection) -> f64 {
        d.objectness * d.class_score(&self.person_label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    /// (recall, precision) after each ranked detection.
    pub points: Vec<(f64, f64)>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl PRCurve {
    /// All-point interpolated area under the monotone precision envelope.
    pub fn average_precision(&self) -> f64 {
        let mut envelope: Vec<f64> = self.points.iter().map(|p| p.1).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (&(recall, _), &p) in self.points.iter().zip(&envelope) {
            ap += (recall - prev_recall) * p;
            prev_recall = recall;
        }
        ap
    }
}

/// Ranks all detections by person score (ties keep image then list order) and
/// greedily matches each to the best unmatched ground-truth person in its image.
///
/// `detections[i]` and `ground_truth[i]` belong to the same image.
pub fn pr_curve(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoundingBox>],
    cfg: &MatchConfig,
) -> Result<PRCurve> {
    cfg.validate()?;
    if detections.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} ground-truth lists",
            detections.len(),
            ground_truth.len()
        )));
    }
    let gt: Vec<Vec<&BoundingBox>> = ground_truth
        .iter()
        .map(|boxes| {
            boxes
                .iter()
                .filter(|b| b.class_label == cfg.person_label)
                .collect()
        })
        .collect();
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one ground-truth box".into(),
        ));
    }
    let mut ranked: Vec<(f64, usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().map(move |d| (cfg.score(d), i, d)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(ranked.len());
    for (_, img, det) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt[img].iter().enumerate() {
            if used[img][j] {
                continue;
            }
            let o = iou(&det.bbox, g);
            if o >= cfg.iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                used[img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(PRCurve {
        points,
        true_positives: tp,
        false_positives: fp,
        false_negatives: n_gt - tp,
    })
}

/// Person-class AP, which is also the mAP since person is the only class scored.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoundingBox>],
    cfg: &MatchConfig,
) -> Result<f64> {
    Ok(pr_curve(detections, ground_truth, cfg)?.average_precision())
}

/// AP over per-image detection sets.
pub fn mean_average_precision(
    sets: &[DetectionSet],
    ground_truth: &[Vec<BoundingBox>],
    cfg: &MatchConfig,
) -> Result<f64> {
    let dets: Vec<Vec<Detection>> = sets.iter().map(|s| s.detections.clone()).collect();
    average_precision(&dets, ground_truth, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaturalnessInputs {
    pub patch: Image,
    pub specified: Image,
    pub grey: Image,
    pub random: Image,
    pub ns_weight: f64,
}

impl NaturalnessInputs {
    /// Grey baseline at 0.5 and a uniform random baseline drawn from `seed`.
    pub fn new(patch: Image, specified: Image, seed: u64) -> Self {
        let (h, w) = (specified.height(), specified.width());
        Self {
            grey: grey_baseline(h, w),
            random: random_baseline(h, w, seed),
            patch,
            specified,
            ns_weight: 0.5,
        }
    }
}

pub fn grey_baseline(height: usize, width: usize) -> Image {
    Image::filled(height, width, 0.5)
}

pub fn random_baseline(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * Image::CHANNELS)
        .map(|_| rng.random::<f64>())
        .collect();
    Image::new(height, width, data).expect("values drawn from [0, 1)")
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedMetric(
            "cosine similarity of a zero-norm image".into(),
        ));
    }
    // One square root of the product keeps cos(a, a) exactly 1.
    Ok(dot / (na * nb).sqrt())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Similarity of the patch to the specified image on a 0..100 scale.
///
/// `NS = 50 * clamp(w * sum_b (CS - CS_b) / (1 - CS_b) + (1 - w) * sum_b (ED_b - ED) / ED_b, 0, 2)`
/// over the grey and random baselines `b`, so the specified image scores 100. A patch
/// identical to one of the baselines is pinned to 0.
pub fn naturalness_score(inputs: &NaturalnessInputs) -> Result<f64> {
    let s = inputs.specified.as_slice();
    for (name, img) in [("patch", &inputs.patch), ("grey", &inputs.grey), ("random", &inputs.random)] {
        if (img.height(), img.width()) != (inputs.specified.height(), inputs.specified.width()) {
            return Err(Error::invalid(format!(
                "{name} is {}x{}, specified image is {}x{}",
                img.height(),
                img.width(),
                inputs.specified.height(),
                inputs.specified.width()
            )));
        }
    }
    let w = inputs.ns_weight;
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("ns_weight must lie in [0, 1], got {w}")));
    }
    let p = inputs.patch.as_slice();
    let cs = cosine(p, s)?;
    let ed = distance(p, s);
    if p == inputs.grey.as_slice() || p == inputs.random.as_slice() {
        return Ok(0.0);
    }
    let (mut cs_sum, mut ed_sum) = (0.0, 0.0);
    for (name, b) in [("grey", &inputs.grey), ("random", &inputs.random)] {
        let cs_b = cosine(b.as_slice(), s)?;
        let ed_b = distance(b.as_slice(), s);
        if ed_b == 0.0 || cs_b >= 1.0 {
            return Err(Error::UndefinedMetric(format!(
                "{name} baseline coincides with the specified image"
            )));
        }
        cs_sum += (cs - cs_b) / (1.0 - cs_b);
        ed_sum += (ed_b - ed) / ed_b;
    }
    Ok(50.0 * (w * cs_sum + (1.0 - w) * ed_sum).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferabilityInputs {
    /// mAP with the evaluated patch, one per held-out detector.
    pub patched: Vec<f64>,
    pub grey: Vec<f64>,
    pub random: Vec<f64>,
}

/// Mean positive relative mAP drop against both noise baselines, times 100.
pub fn transferability_score(inputs: &TransferabilityInputs) -> Result<f64> {
    let n = inputs.patched.len();
    if n == 0 {
        return Err(Error::invalid("transferability needs at least one detector"));
    }
    if inputs.grey.len() != n || inputs.random.len() != n {
        return Err(Error::invalid(format!(
            "baseline lengths {} and {} differ from {n} detectors",
            inputs.grey.len(),
            inputs.random.len()
        )));
    }
    let mut sum = 0.0;
    for i in 0..n {
        let d = inputs.patched[i];
        for base in [inputs.grey[i], inputs.random[i]] {
            if base <= 0.0 {
                return Err(Error::UndefinedMetric(format!(
                    "baseline mAP of detector {i} is zero"
                )));
            }
            sum += ((base - d) / base).max(0.0);
        }
    }
    Ok(100.0 * sum / (2 * n) as f64)
}

/// Fraction of images in which some ground-truth person found on the benign image
/// (score at least `threshold`, IoU-matched) loses every match on the patched image.
pub fn attack_success_rate(
    benign: &[DetectionSet],
    patched: &[DetectionSet],
    ground_truth: &[Vec<BoundingBox>],
    threshold: f64,
    cfg: &MatchConfig,
) -> Result<f64> {
    if benign.is_empty() {
        return Err(Error::invalid("attack success rate needs a nonempty test set"));
    }
    if benign.len() != patched.len() || benign.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} benign, {} patched and {} ground-truth entries",
            benign.len(),
            patched.len(),
            ground_truth.len()
        )));
    }
    let found = |set: &DetectionSet, g: &BoundingBox| {
        set.detections
            .iter()
            .any(|d| cfg.score(d) >= threshold && iou(&d.bbox, g) >= cfg.iou_threshold)
    };
    let successes = benign
        .iter()
        .zip(patched)
        .zip(ground_truth)
        .filter(|((b, p), gts)| {
            gts.iter()
                .filter(|g| g.class_label == cfg.person_label)
                .any(|g| found(b, g) && !found(p, g))
        })
        .count();
    Ok(successes as f64 / benign.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::person(x, y, w, h).unwrap()
    }

    fn d(x: f64, score: f64) -> Detection {
        Detection::person(b(x, 0.0, 10.0, 10.0), score)
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 3.0), &b(0.0, 0.0, 2.0, 3.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 1.0, 1.0)), 0.0);
        let half = iou(&b(0.0, 0.0, 1.0, 1.0), &b(0.5, 0.0, 1.0, 1.0));
        assert!((half - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gt = vec![vec![b(0.0, 0.0, 10.0, 10.0)], vec![b(20.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![d(0.0, 0.9)], vec![d(20.0, 0.8)]];
        assert_eq!(average_precision(&dets, &gt, &MatchConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn tp_fp_tp_ranking() {
        let gt = vec![vec![b(0.0, 0.0, 10.0, 10.0), b(50.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![d(0.0, 0.9), d(100.0, 0.8), d(50.0, 0.7)]];
        let ap = average_precision(&dets, &gt, &MatchConfig::default()).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12, "{ap}");
        let curve = pr_curve(&dets, &gt, &MatchConfig::default()).unwrap();
        assert_eq!(
            (curve.true_positives, curve.false_positives, curve.false_negatives),
            (2, 1, 0)
        );
    }

    #[test]
    fn only_false_positives_and_no_ground_truth() {
        let gt = vec![vec![b(0.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![d(40.0, 0.9), d(80.0, 0.5)]];
        assert_eq!(average_precision(&dets, &gt, &MatchConfig::default()).unwrap(), 0.0);
        let err = average_precision(&dets, &[vec![]], &MatchConfig::default());
        assert!(matches!(err, Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn duplicate_detections_count_once() {
        let gt = vec![vec![b(0.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![d(0.0, 0.9), d(1.0, 0.8)]];
        let curve = pr_curve(&dets, &gt, &MatchConfig::default()).unwrap();
        assert_eq!((curve.true_positives, curve.false_positives), (1, 1));
        assert_eq!(curve.average_precision(), 1.0);
    }

    fn ns_inputs(patch: Image) -> NaturalnessInputs {
        let s = Image::from_fn(8, 8, |y, x, c| 0.1 + 0.8 * ((x + 2 * y + c) % 5) as f64 / 4.0);
        NaturalnessInputs::new(patch, s, 3)
    }

    #[test]
    fn naturalness_endpoints() {
        let base = ns_inputs(Image::filled(8, 8, 0.5));
        let at_s = NaturalnessInputs {
            patch: base.specified.clone(),
            ..base.clone()
        };
        assert_eq!(naturalness_score(&at_s).unwrap(), 100.0);
        assert_eq!(naturalness_score(&base).unwrap(), 0.0);
        let at_random = NaturalnessInputs {
            patch: base.random.clone(),
            ..base.clone()
        };
        assert_eq!(naturalness_score(&at_random).unwrap(), 0.0);
        let mid = Image::from_fn(8, 8, |y, x, c| {
            0.5 * base.specified.get(y, x, c) + 0.25
        });
        let ns = naturalness_score(&NaturalnessInputs { patch: mid, ..base }).unwrap();
        assert!(ns > 0.0 && ns < 100.0, "{ns}");
    }

    #[test]
    fn naturalness_rejects_zero_norm() {
        let inputs = ns_inputs(Image::filled(8, 8, 0.0));
        assert!(matches!(
            naturalness_score(&inputs),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn transferability_cases() {
        let same = TransferabilityInputs {
            patched: vec![0.8, 0.6],
            grey: vec![0.8, 0.6],
            random: vec![0.8, 0.6],
        };
        assert_eq!(transferability_score(&same).unwrap(), 0.0);
        let half = TransferabilityInputs {
            patched: vec![0.4, 0.3],
            ..same.clone()
        };
        assert!((transferability_score(&half).unwrap() - 50.0).abs() < 1e-12);
        let higher = TransferabilityInputs {
            patched: vec![0.9, 0.9],
            ..same.clone()
        };
        assert_eq!(transferability_score(&higher).unwrap(), 0.0);
        let zero = TransferabilityInputs {
            grey: vec![0.0, 0.6],
            ..same
        };
        assert!(matches!(
            transferability_score(&zero),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn asr_counts_suppressed_images() {
        let gt: Vec<Vec<BoundingBox>> = (0..4).map(|_| vec![b(0.0, 0.0, 10.0, 10.0)]).collect();
        let benign: Vec<DetectionSet> = (0..4).map(|_| DetectionSet::new("t", vec![d(0.0, 0.9)])).collect();
        let cfg = MatchConfig::default();
        assert_eq!(attack_success_rate(&benign, &benign, &gt, 0.5, &cfg).unwrap(), 0.0);
        let mut patched: Vec<DetectionSet> = (0..4).map(|_| DetectionSet::new("t", vec![d(0.0, 0.2)])).collect();
        assert_eq!(attack_success_rate(&benign, &patched, &gt, 0.5, &cfg).unwrap(), 1.0);
        patched[2] = benign[2].clone();
        assert_eq!(attack_success_rate(&benign, &patched, &gt, 0.5, &cfg).unwrap(), 0.75);
        assert!(attack_success_rate(&[], &[], &[], 0.5, &cfg).is_err());
    }
}

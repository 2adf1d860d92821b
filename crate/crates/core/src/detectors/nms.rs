use super::{sort_by_person_score, Detection};
use crate::metrics::iou;

/// Greedy suppression: keep the highest scoring box, drop everything overlapping it
/// with IoU above `iou_threshold`, repeat.
pub fn non_maximum_suppression(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    sort_by_person_score(&mut detections);
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for det in detections {
        if kept.iter().all(|k| iou(&k.bbox, &det.bbox) <= iou_threshold) {
            kept.push(det);
        }
    }
    kept
}

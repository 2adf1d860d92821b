use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    non_maximum_suppression, Capabilities, Detection, DetectionSet, DetectorAdapter,
};
use crate::error::{Error, Result};
use crate::imaging::{BoundingBox, Grid, Image};

/// Person blob: a disk head over a tilted elliptical body.
///
/// Lengths along x are fractions of the window width, along y fractions of its height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub head_cx: f64,
    pub head_cy: f64,
    pub head_r: f64,
    pub body_cx: f64,
    pub body_cy: f64,
    pub body_rx: f64,
    pub body_ry: f64,
    /// Body tilt in radians.
    pub lean: f64,
}

impl Silhouette {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            head_cx: 0.5 + rng.random_range(-0.15..=0.15),
            head_cy: rng.random_range(0.09..=0.15),
            head_r: rng.random_range(0.15..=0.25),
            body_cx: 0.5 + rng.random_range(-0.1..=0.1),
            body_cy: rng.random_range(0.45..=0.65),
            body_rx: rng.random_range(0.26..=0.46),
            body_ry: rng.random_range(0.28..=0.42),
            lean: rng.random_range(-0.45..=0.45),
        }
    }

    /// Fraction of each pixel covered by the shape, 4x4 supersampled, row-major.
    pub fn coverage(&self, width: usize, height: usize) -> Vec<f64> {
        const SS: usize = 4;
        let (wf, hf) = (width as f64, height as f64);
        let head = (self.head_cx * wf, self.head_cy * hf, self.head_r * wf);
        let (bcx, bcy) = (self.body_cx * wf, self.body_cy * hf);
        let (brx, bry) = (self.body_rx * wf, self.body_ry * hf);
        let (sin, cos) = self.lean.sin_cos();
        let inside = |x: f64, y: f64| {
            let (dx, dy) = (x - head.0, y - head.1);
            if dx * dx + dy * dy <= head.2 * head.2 {
                return true;
            }
            let (dx, dy) = (x - bcx, y - bcy);
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            (u / brx).powi(2) + (v / bry).powi(2) <= 1.0
        };
        let mut out = Vec::with_capacity(width * height);
        for py in 0..height {
            for px in 0..width {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                        hits += inside(x, y) as usize;
                    }
                }
                out.push(hits as f64 / (SS * SS) as f64);
            }
        }
        out
    }
}

/// Zero-mean, unit-norm correlation kernel rendered from a silhouette.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub silhouette: Silhouette,
}

impl Template {
    pub fn from_silhouette(silhouette: Silhouette, width: usize, height: usize) -> Result<Self> {
        let mut values = silhouette.coverage(width, height);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= mean);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::invalid("silhouette covers nothing or everything"));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            width,
            height,
            values,
            silhouette,
        })
    }

    /// Normalized correlation with another template of the same size.
    pub fn correlation(&self, other: &Template) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Sliding normalized cross-correlation detector over a seeded colour projection.
///
/// Objectness at every window is `logistic(gain * ncc + bias)`; detections are the
/// positive local maxima of the best-template correlation map after greedy NMS.
#[derive(Debug, Clone)]
pub struct ToyTemplateDetector {
    name: String,
    seed: u64,
    templates: Vec<Template>,
    gain: f64,
    bias: f64,
    channel_weights: [f64; 3],
    nms_iou: f64,
}

/// Regularizer on the window variance so flat windows correlate to ~0, not noise.
const VARIANCE_FLOOR: f64 = 2.5e-3;

impl ToyTemplateDetector {
    pub const WINDOW_WIDTH: usize = 12;
    pub const WINDOW_HEIGHT: usize = 24;
    pub const GAIN: f64 = 8.0;
    pub const BIAS: f64 = -4.0;
    /// Length of the chromatic part of the colour projection.
    pub const CHROMA_SPREAD: f64 = 0.4;

    pub fn new(seed: u64, n_templates: usize) -> Result<Self> {
        if n_templates == 0 {
            return Err(Error::invalid("toy detector needs at least one template"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let templates = (0..n_templates)
            .map(|_| {
                Template::from_silhouette(
                    Silhouette::sample(&mut rng),
                    Self::WINDOW_WIDTH,
                    Self::WINDOW_HEIGHT,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // Luminance plus a seeded chromatic direction orthogonal to (1, 1, 1).
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let e1 = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
        let e2 = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
        let mut channel_weights = [0.0; 3];
        for c in 0..3 {
            channel_weights[c] =
                1.0 / 3.0 + Self::CHROMA_SPREAD * (phi.cos() * e1[c] + phi.sin() * e2[c]);
        }
        Ok(Self {
            name: format!("toy-{seed}"),
            seed,
            templates,
            gain: Self::GAIN,
            bias: Self::BIAS,
            channel_weights,
            nms_iou: 0.5,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn channel_weights(&self) -> [f64; 3] {
        self.channel_weights
    }

    fn logistic(&self, corr: f64) -> f64 {
        1.0 / (1.0 + (-(self.gain * corr + self.bias)).exp())
    }

    fn project(&self, image: &Image) -> Vec<f64> {
        let w = self.channel_weights;
        image
            .as_slice()
            .chunks_exact(3)
            .map(|px| w[0] * px[0] + w[1] * px[1] + w[2] * px[2])
            .collect()
    }

    /// Correlation maps, one per template, each `rows x cols`.
    fn correlation_maps(&self, gray: &[f64], height: usize, width: usize) -> Option<CorrMaps> {
        let (tw, th) = (Self::WINDOW_WIDTH, Self::WINDOW_HEIGHT);
        if height < th || width < tw {
            return None;
        }
        let rows = height - th + 1;
        let cols = width - tw + 1;
        let n = (tw * th) as f64;

        // Integral images of values and squares for the window variance.
        let iw = width + 1;
        let mut s1 = vec![0.0; (height + 1) * iw];
        let mut s2 = vec![0.0; (height + 1) * iw];
        for y in 0..height {
            let (mut r1, mut r2) = (0.0, 0.0);
            for x in 0..width {
                let v = gray[y * width + x];
                r1 += v;
                r2 += v * v;
                s1[(y + 1) * iw + x + 1] = s1[y * iw + x + 1] + r1;
                s2[(y + 1) * iw + x + 1] = s2[y * iw + x + 1] + r2;
            }
        }
        let window = |s: &[f64], r: usize, c: usize| {
            s[(r + th) * iw + c + tw] - s[r * iw + c + tw] - s[(r + th) * iw + c] + s[r * iw + c]
        };
        let mut inv_den = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let a = window(&s1, r, c);
                let b = window(&s2, r, c);
                let centered = (b - a * a / n).max(0.0);
                inv_den[r * cols + c] = 1.0 / (centered + n * VARIANCE_FLOOR).sqrt();
            }
        }

        let mut maps = Vec::with_capacity(self.templates.len());
        for t in &self.templates {
            let mut num = vec![0.0; rows * cols];
            for i in 0..th {
                for j in 0..tw {
                    let tv = t.values[i * tw + j];
                    for r in 0..rows {
                        let src = &gray[(r + i) * width + j..(r + i) * width + j + cols];
                        let dst = &mut num[r * cols..(r + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += tv * s;
                        }
                    }
                }
            }
            for (v, inv) in num.iter_mut().zip(&inv_den) {
                *v *= inv;
            }
            maps.push(num);
        }
        Some(CorrMaps { rows, cols, maps })
    }

    /// Highest correlation over all windows and templates: (corr, template, row, col).
    fn best_window(&self, image: &Image) -> Option<(f64, usize, usize, usize)> {
        let gray = self.project(image);
        let maps = self.correlation_maps(&gray, image.height(), image.width())?;
        let mut best = (f64::NEG_INFINITY, 0, 0, 0);
        for (k, map) in maps.maps.iter().enumerate() {
            for (i, &v) in map.iter().enumerate() {
                if v > best.0 {
                    best = (v, k, i / maps.cols, i % maps.cols);
                }
            }
        }
        Some(best)
    }
}

struct CorrMaps {
    rows: usize,
    cols: usize,
    maps: Vec<Vec<f64>>,
}

impl DetectorAdapter for ToyTemplateDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            differentiable: true,
        }
    }

    fn detect(&self, image: &Image) -> Result<DetectionSet> {
        let gray = self.project(image);
        let Some(maps) = self.correlation_maps(&gray, image.height(), image.width()) else {
            return Ok(DetectionSet::new(self.name.clone(), Vec::new()));
        };
        let (rows, cols) = (maps.rows, maps.cols);
        let mut best = vec![f64::NEG_INFINITY; rows * cols];
        for map in &maps.maps {
            for (b, &v) in best.iter_mut().zip(map) {
                *b = b.max(v);
            }
        }
        let mut candidates = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let v = best[r * cols + c];
                if v <= 0.0 {
                    continue;
                }
                let mut is_peak = true;
                'scan: for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                            continue;
                        }
                        let nv = best[nr as usize * cols + nc as usize];
                        // Plateaus keep only their first pixel in raster order.
                        let earlier = dr < 0 || (dr == 0 && dc < 0);
                        if nv > v || (earlier && nv == v) {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    let bbox = BoundingBox::person(
                        c as f64,
                        r as f64,
                        Self::WINDOW_WIDTH as f64,
                        Self::WINDOW_HEIGHT as f64,
                    )?;
                    candidates.push(Detection::person(bbox, self.logistic(v)));
                }
            }
        }
        Ok(DetectionSet::new(
            self.name.clone(),
            non_maximum_suppression(candidates, self.nms_iou),
        ))
    }

    fn person_confidence(&self, image: &Image) -> Result<f64> {
        Ok(self
            .best_window(image)
            .map(|(corr, ..)| self.logistic(corr))
            .unwrap_or(0.0))
    }

    fn person_confidence_grad(&self, image: &Image) -> Result<(f64, Grid)> {
        let (h, w) = (image.height(), image.width());
        let mut grad = Grid::zeros(h, w, Image::CHANNELS);
        let Some((_, k, r0, c0)) = self.best_window(image) else {
            return Ok((0.0, grad));
        };
        let (tw, th) = (Self::WINDOW_WIDTH, Self::WINDOW_HEIGHT);
        let n = (tw * th) as f64;
        let gray = self.project(image);
        let t = &self.templates[k].values;

        // Recompute the winning window directly: corr = <t, g> / sqrt(sum (g - mean)^2 + n*floor).
        let mut num = 0.0;
        let mut sum = 0.0;
        for i in 0..th {
            for j in 0..tw {
                let g = gray[(r0 + i) * w + c0 + j];
                num += t[i * tw + j] * g;
                sum += g;
            }
        }
        let mean = sum / n;
        let mut centered_sq = 0.0;
        for i in 0..th {
            for j in 0..tw {
                let d = gray[(r0 + i) * w + c0 + j] - mean;
                centered_sq += d * d;
            }
        }
        let den = (centered_sq + n * VARIANCE_FLOOR).sqrt();
        let corr = num / den;
        let conf = self.logistic(corr);
        let dconf = self.gain * conf * (1.0 - conf);
        let cw = self.channel_weights;
        let g_out = grad.as_mut_slice();
        for i in 0..th {
            for j in 0..tw {
                let p = (r0 + i) * w + c0 + j;
                let d = gray[p] - mean;
                let dcorr = t[i * tw + j] / den - num * d / (den * den * den);
                for c in 0..3 {
                    g_out[p * 3 + c] = dconf * dcorr * cw[c];
                }
            }
        }
        Ok((conf, grad))
    }
}

/// Seeded toy detector with `n_templates` silhouettes, gain 8 and bias -4.
pub fn make_toy_detector(seed: u64, n_templates: usize) -> Result<ToyTemplateDetector> {
    ToyTemplateDetector::new(seed, n_templates)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Renders a template's silhouette into an image at (x, y) with the given contrast.
    fn stamp(img: &mut Grid, det: &ToyTemplateDetector, k: usize, x: usize, y: usize) {
        let t = &det.templates()[k];
        let max = t.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..t.height {
            for j in 0..t.width {
                let v = 0.5 + 0.45 * t.values[i * t.width + j] / max;
                for c in 0..3 {
                    img.set(y + i, x + j, c, v);
                }
            }
        }
    }

    #[test]
    fn blank_image_has_no_confident_detection() {
        let det = make_toy_detector(1, 3).unwrap();
        let img = Image::filled(48, 48, 0.5);
        let set = det.detect(&img).unwrap();
        assert_eq!(set.above(0.5).count(), 0);
        let conf = det.person_confidence(&img).unwrap();
        assert!(conf < 0.05, "{conf}");
        // logistic(-4)
        assert!((conf - 0.017986).abs() < 1e-5);
    }

    #[test]
    fn exact_template_copy_is_detected() {
        let det = make_toy_detector(2, 2).unwrap();
        let mut g = Grid::filled(48, 40, 3, 0.5);
        stamp(&mut g, &det, 1, 9, 13);
        let img = Image::from_grid(g).unwrap();
        let conf = det.person_confidence(&img).unwrap();
        assert!(conf > 0.95, "{conf}");
        let set = det.detect(&img).unwrap();
        let top = &set.detections[0];
        assert!(top.objectness > 0.95);
        assert_eq!((top.bbox.x, top.bbox.y), (9.0, 13.0));
        assert_eq!(set.above(0.5).count(), 1);
    }

    #[test]
    fn two_disjoint_copies_give_two_detections() {
        let det = make_toy_detector(3, 1).unwrap();
        let mut g = Grid::filled(40, 64, 3, 0.5);
        stamp(&mut g, &det, 0, 4, 8);
        stamp(&mut g, &det, 0, 40, 10);
        let set = det.detect(&Image::from_grid(g).unwrap()).unwrap();
        let strong: Vec<_> = set.above(0.5).collect();
        assert_eq!(strong.len(), 2);
        let mut xs: Vec<f64> = strong.iter().map(|d| d.bbox.x).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![4.0, 40.0]);
    }

    #[test]
    fn image_smaller_than_window_has_zero_confidence() {
        let det = make_toy_detector(4, 1).unwrap();
        let img = Image::filled(10, 10, 0.3);
        assert_eq!(det.person_confidence(&img).unwrap(), 0.0);
        assert!(det.detect(&img).unwrap().is_empty());
        let (c, g) = det.person_confidence_grad(&img).unwrap();
        assert_eq!(c, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn construction_is_deterministic() {
        let a = make_toy_detector(11, 3).unwrap();
        let b = make_toy_detector(11, 3).unwrap();
        assert_eq!(a.templates(), b.templates());
        assert_eq!(a.channel_weights(), b.channel_weights());
        assert_eq!(a.templates().len(), 3);
        assert!(make_toy_detector(0, 0).is_err());
    }

    #[test]
    fn templates_are_normalized() {
        let d = make_toy_detector(5, 4).unwrap();
        for t in d.templates() {
            let mean = t.values.iter().sum::<f64>() / t.values.len() as f64;
            let norm = t.values.iter().map(|v| v * v).sum::<f64>();
            assert!(mean.abs() < 1e-12);
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let w = d.channel_weights();
        assert!(w.iter().all(|&c| c > 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_seeds_give_distinct_templates() {
        let dets: Vec<_> = (0..20).map(|s| make_toy_detector(s, 1).unwrap()).collect();
        let mut worst: f64 = -1.0;
        for i in 0..dets.len() {
            for j in i + 1..dets.len() {
                worst = worst.max(dets[i].templates()[0].correlation(&dets[j].templates()[0]));
            }
        }
        assert!(worst < 0.9, "max pairwise correlation {worst}");
    }

    #[test]
    fn detection_is_repeatable() {
        let det = make_toy_detector(6, 2).unwrap();
        let img = Image::from_fn(40, 40, |y, x, c| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
        assert_eq!(det.detect(&img).unwrap(), det.detect(&img).unwrap());
    }

    #[test]
    fn confidence_gradient_matches_finite_differences() {
        let det = make_toy_detector(7, 2).unwrap();
        let mut g = Grid::from_fn(36, 30, 3, |y, x, c| {
            0.4 + 0.1 * (((x * 13 + y * 7 + c * 3) % 10) as f64 / 10.0)
        });
        stamp(&mut g, &det, 0, 6, 5);
        // Lower the contrast so the logistic is not saturated.
        let g = g.map(|v| 0.5 + 0.3 * (v - 0.5));
        let img = Image::from_grid(g.clone()).unwrap();
        let (conf, grad) = det.person_confidence_grad(&img).unwrap();
        assert!((conf - det.person_confidence(&img).unwrap()).abs() < 1e-12);
        let h = 1e-4;
        let mut checked = 0;
        for idx in (0..g.len()).step_by(37) {
            let mut plus = g.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = g.clone();
            minus.as_mut_slice()[idx] -= h;
            let fp = det.person_confidence(&Image::from_grid(plus).unwrap()).unwrap();
            let fm = det.person_confidence(&Image::from_grid(minus).unwrap()).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.as_slice()[idx];
            let scale = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / scale < 1e-3, "idx {idx}: fd {fd} analytic {an}");
            checked += 1;
        }
        assert!(checked > 50);
    }
}

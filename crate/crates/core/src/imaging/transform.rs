use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Grid, Image};
use crate::error::{Error, Result};

/// One draw from the augmentation family: rotation, horizontal flip, centre crop,
/// zoom, brightness shift and additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub rotation: f64,
    pub flip_h: bool,
    pub crop_fraction: f64,
    pub scale: f64,
    pub brightness_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            flip_h: false,
            crop_fraction: 0.0,
            scale: 1.0,
            brightness_shift: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn flip() -> Self {
        Self {
            flip_h: true,
            ..Self::identity()
        }
    }

    pub fn rotation(degrees: f64) -> Self {
        Self {
            rotation: degrees,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        TransformRanges::default().check(self)
    }
}

/// Sampling ranges. Each bound must sit inside the default (widest allowed) range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformRanges {
    pub max_rotation: f64,
    pub flip_probability: f64,
    pub max_crop_fraction: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_brightness_shift: f64,
    pub max_noise_sigma: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            max_rotation: 20.0,
            flip_probability: 0.5,
            max_crop_fraction: 0.1,
            scale_min: 0.8,
            scale_max: 1.2,
            max_brightness_shift: 0.1,
            max_noise_sigma: 0.02,
        }
    }
}

impl TransformRanges {
    /// Degenerate ranges: every sample is the identity transform.
    pub fn none() -> Self {
        Self {
            max_rotation: 0.0,
            flip_probability: 0.0,
            max_crop_fraction: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            max_brightness_shift: 0.0,
            max_noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = Self::default();
        let ok = (0.0..=d.max_rotation).contains(&self.max_rotation)
            && (0.0..=1.0).contains(&self.flip_probability)
            && (0.0..=d.max_crop_fraction).contains(&self.max_crop_fraction)
            && d.scale_min <= self.scale_min
            && self.scale_min <= self.scale_max
            && self.scale_max <= d.scale_max
            && (0.0..=d.max_brightness_shift).contains(&self.max_brightness_shift)
            && (0.0..=d.max_noise_sigma).contains(&self.max_noise_sigma);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("transform ranges out of bounds: {self:?}")))
        }
    }

    fn check(&self, t: &TransformParams) -> Result<()> {
        let ok = t.rotation.abs() <= self.max_rotation
            && (0.0..=self.max_crop_fraction).contains(&t.crop_fraction)
            && (self.scale_min..=self.scale_max).contains(&t.scale)
            && t.brightness_shift.abs() <= self.max_brightness_shift
            && (0.0..=self.max_noise_sigma).contains(&t.noise_sigma);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("transform parameters out of range: {t:?}")))
        }
    }

    pub fn sample(&self, seed: u64) -> TransformParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let symmetric = |bound: f64, rng: &mut ChaCha8Rng| {
            if bound > 0.0 {
                rng.random_range(-bound..=bound)
            } else {
                0.0
            }
        };
        let rotation = symmetric(self.max_rotation, &mut rng);
        let flip_h = rng.random_bool(self.flip_probability);
        let crop_fraction = if self.max_crop_fraction > 0.0 {
            rng.random_range(0.0..=self.max_crop_fraction)
        } else {
            0.0
        };
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let brightness_shift = symmetric(self.max_brightness_shift, &mut rng);
        let noise_sigma = if self.max_noise_sigma > 0.0 {
            rng.random_range(0.0..=self.max_noise_sigma)
        } else {
            0.0
        };
        TransformParams {
            rotation,
            flip_h,
            crop_fraction,
            scale,
            brightness_shift,
            noise_sigma,
            seed: rng.next_u64(),
        }
    }
}

/// Draws transform parameters uniformly from the default ranges; deterministic in `seed`.
pub fn sample_transform(seed: u64) -> TransformParams {
    TransformRanges::default().sample(seed)
}

/// Everything needed to backpropagate through one application of a transform.
#[derive(Debug, Clone)]
pub struct TransformTrace {
    height: usize,
    width: usize,
    channels: usize,
    /// Bilinear taps per output pixel; unused slots carry weight 0.
    taps: Vec<[(usize, f64); 4]>,
    /// Per element: true where the output was clamped, which blocks the gradient.
    clamped: Vec<bool>,
}

impl TransformTrace {
    /// Gradient with respect to the input given the gradient with respect to the output.
    pub fn backward(&self, grad_out: &Grid) -> Grid {
        assert_eq!(
            grad_out.dims(),
            (self.height, self.width, self.channels),
            "gradient shape does not match traced transform"
        );
        let ch = self.channels;
        let mut grad = Grid::zeros(self.height, self.width, ch);
        let g_in = grad.as_mut_slice();
        let g_out = grad_out.as_slice();
        for (p, taps) in self.taps.iter().enumerate() {
            for c in 0..ch {
                let i = p * ch + c;
                if self.clamped[i] || g_out[i] == 0.0 {
                    continue;
                }
                for &(src, w) in taps {
                    if w != 0.0 {
                        g_in[src * ch + c] += w * g_out[i];
                    }
                }
            }
        }
        grad
    }
}

/// Bilinear taps for every output pixel, zero outside the source.
fn sampling_taps(height: usize, width: usize, t: &TransformParams) -> Vec<[(usize, f64); 4]> {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let (sin, cos) = (-t.rotation.to_radians()).sin_cos();
    let shrink = (1.0 - t.crop_fraction) / t.scale;
    let mut taps = Vec::with_capacity(height * width);
    for v in 0..height {
        for u in 0..width {
            // Output pixel back to source: undo zoom and crop, then flip, then rotation.
            let mut x = (u as f64 - cx) * shrink;
            let y = (v as f64 - cy) * shrink;
            if t.flip_h {
                x = -x;
            }
            let sx = cx + cos * x - sin * y;
            let sy = cy + sin * x + cos * y;
            taps.push(bilinear_taps(sx, sy, width, height));
        }
    }
    taps
}

fn bilinear_taps(sx: f64, sy: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let mut out = [(0usize, 0.0f64); 4];
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (slot, &(x, y, w)) in out.iter_mut().zip(&corners) {
        if w == 0.0 || x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            continue;
        }
        *slot = (y as usize * width + x as usize, w);
    }
    out
}

/// Applies `t` to a grid of any channel count and records what backward needs.
pub fn apply_transform_traced(input: &Grid, t: &TransformParams) -> (Grid, TransformTrace) {
    let (h, w, ch) = input.dims();
    let taps = sampling_taps(h, w, t);
    let src = input.as_slice();
    let mut data = Vec::with_capacity(input.len());
    for p_taps in &taps {
        for c in 0..ch {
            let mut v = 0.0;
            for &(s, wt) in p_taps {
                if wt != 0.0 {
                    v += wt * src[s * ch + c];
                }
            }
            data.push(v + t.brightness_shift);
        }
    }
    if t.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let normal = Normal::new(0.0, t.noise_sigma).expect("finite sigma");
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    let mut clamped = vec![false; data.len()];
    for (v, flag) in data.iter_mut().zip(&mut clamped) {
        if *v < 0.0 || *v > 1.0 {
            *v = v.clamp(0.0, 1.0);
            *flag = true;
        }
    }
    let out = Grid::new(h, w, ch, data).expect("dims preserved");
    (
        out,
        TransformTrace {
            height: h,
            width: w,
            channels: ch,
            taps,
            clamped,
        },
    )
}

pub fn transform_grid(input: &Grid, t: &TransformParams) -> Grid {
    apply_transform_traced(input, t).0
}

/// Applies `t` to an image; the output stays inside `[0, 1]`.
pub fn apply_transform(image: &Image, t: &TransformParams) -> Image {
    Image::from_grid(transform_grid(image.grid(), t)).expect("transform output is clamped")
}

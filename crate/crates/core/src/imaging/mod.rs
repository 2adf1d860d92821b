//! Image and patch value types, person-box patch placement, compositing and the
//! random transformation family shared by the similarity loss and augmentation.

mod compose;
mod io;
mod resample;
mod transform;

pub use compose::{
    build_person_mask, compose, compose_backward, compose_grid, MaskLayout, PatchRect,
    PlacementSpec,
};
pub use io::{read_png, write_png, encode_png};
pub use resample::{resample_weights, resize_grid, Taps};
pub use transform::{
    apply_transform, apply_transform_traced, sample_transform, transform_grid, TransformParams,
    TransformTrace, TransformRanges,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PERSON_LABEL: &str = "person";

/// Dense row-major `height x width x channels` grid of reals.
///
/// This is the unconstrained storage behind [`Image`] and [`Patch`], and the
/// shape gradients are returned in.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty grid");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty grid");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_dims(&self, other: &Grid) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&mut self, other: &Grid, scale: f64) {
        debug_assert!(self.same_dims(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn clamp01(&self) -> Grid {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// An RGB image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Grid);

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::new(height, width, Self::CHANNELS, data)?)
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.channels != Self::CHANNELS {
            return Err(Error::invalid(format!(
                "images have {} channels, got {}",
                Self::CHANNELS,
                grid.channels
            )));
        }
        if let Some(v) = grid.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("image value {v} outside [0, 1]")));
        }
        Ok(Image(grid))
    }

    /// Builds an image from `grid`, clamping values into range. NaN becomes 0.
    pub fn from_grid_clamped(grid: Grid) -> Result<Self> {
        if grid.channels != Self::CHANNELS {
            return Err(Error::invalid(format!(
                "images have {} channels, got {}",
                Self::CHANNELS,
                grid.channels
            )));
        }
        Ok(Image(grid.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image(Grid::filled(height, width, Self::CHANNELS, value.clamp(0.0, 1.0)))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        Image(Grid::from_fn(height, width, Self::CHANNELS, |y, x, c| {
            f(y, x, c).clamp(0.0, 1.0)
        }))
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.0.get(y, x, c)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0.data
    }

    /// Rounds every value to the nearest multiple of 1/255, matching what a PNG round trip stores.
    pub fn quantized(&self) -> Image {
        Image(self.0.map(|v| (v * 255.0).round() / 255.0))
    }
}

/// A square RGB patch with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch(Image);

impl Patch {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_image(Image::new(side, side, data)?)
    }

    pub fn from_image(image: Image) -> Result<Self> {
        if image.height() != image.width() {
            return Err(Error::invalid(format!(
                "patch must be square, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(Patch(image))
    }

    /// Clamps `values` into `[0, 1]` and wraps them as a patch.
    pub fn from_values_clamped(side: usize, values: Vec<f64>) -> Result<Self> {
        let grid = Grid::new(side, side, Image::CHANNELS, values)?;
        Ok(Patch(Image::from_grid_clamped(grid)?))
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Patch(Image::filled(side, side, value))
    }

    pub fn side(&self) -> usize {
        self.0.height()
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn grid(&self) -> &Grid {
        self.0.grid()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn transformed(&self, t: &TransformParams) -> Patch {
        Patch(apply_transform(&self.0, t))
    }
}

/// Axis-aligned box in pixel coordinates with a class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(rename = "class")]
    pub class_label: String,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, class_label: impl Into<String>) -> Result<Self> {
        let b = Self {
            x,
            y,
            w,
            h,
            class_label: class_label.into(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn person(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, w, h, PERSON_LABEL)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!(
                "box ({}, {}, {}, {}) must be finite with positive extent",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn is_person(&self) -> bool {
        self.class_label == PERSON_LABEL
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Intersection with the `width x height` frame, or `None` if nothing remains.
    pub fn clipped(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width as f64);
        let y1 = self.bottom().min(height as f64);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(BoundingBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            class_label: self.class_label.clone(),
        })
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.right() <= width as f64
            && self.bottom() <= height as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_values() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
        assert!(Image::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn patch_must_be_square() {
        let img = Image::filled(2, 3, 0.5);
        assert!(Patch::from_image(img).is_err());
        assert_eq!(Patch::filled(4, 0.2).side(), 4);
    }

    #[test]
    fn box_validation_and_clipping() {
        assert!(BoundingBox::person(0.0, 0.0, -1.0, 2.0).is_err());
        let b = BoundingBox::person(-5.0, 90.0, 20.0, 20.0).unwrap();
        let c = b.clipped(100, 100).unwrap();
        assert_eq!((c.x, c.y, c.w, c.h), (0.0, 90.0, 15.0, 10.0));
        assert!(c.within(100, 100));
        assert!(BoundingBox::person(200.0, 0.0, 5.0, 5.0)
            .unwrap()
            .clipped(100, 100)
            .is_none());
    }
}

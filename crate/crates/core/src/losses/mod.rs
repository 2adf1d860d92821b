//! Objectness, reference similarity, total variation and printability losses, their
//! weighted total and its exact gradient with respect to the patch.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{EnsembleMode, EnsembleSpec};
use crate::error::{ensure_finite, Error, Result};
use crate::imaging::{
    apply_transform_traced, compose_backward, compose_grid, resize_grid, transform_grid, Grid,
    Image, MaskLayout, Patch, TransformParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Printability weight.
    pub alpha: f64,
    /// Smoothness weight.
    pub beta: f64,
    /// Reference similarity weight.
    pub lambda_css: f64,
    /// Divide CSS, TV and NPS by their element counts.
    pub normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 2.5,
            lambda_css: 2.5,
            normalize: true,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            lambda_css: 0.0,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda_css", self.lambda_css)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Colours a printer or display can reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintableColorSet {
    colors: Vec<[f64; 3]>,
}

impl PrintableColorSet {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(Error::invalid("printable colour set is empty"));
        }
        if let Some(c) = colors.iter().find(|c| c.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::invalid(format!("colour {c:?} outside [0, 1]")));
        }
        Ok(Self { colors })
    }

    /// The `levels^3` colours of a uniform RGB lattice.
    pub fn lattice(levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(Error::invalid("a colour lattice needs at least 2 levels"));
        }
        let step = 1.0 / (levels - 1) as f64;
        let mut colors = Vec::with_capacity(levels.pow(3));
        for r in 0..levels {
            for g in 0..levels {
                for b in 0..levels {
                    colors.push([r as f64 * step, g as f64 * step, b as f64 * step]);
                }
            }
        }
        Self::new(colors)
    }

    /// One `r g b` triple per line. Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut colors = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::parse(origin, format!("line {}: expected `r g b`, got `{line}`", no + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let mut c = [0.0; 3];
            for (dst, f) in c.iter_mut().zip(&fields) {
                *dst = f.parse::<f64>().map_err(|_| bad())?;
            }
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::parse(
                    origin,
                    format!("line {}: colour values must lie in [0, 1]", no + 1),
                ));
            }
            colors.push(c);
        }
        if colors.is_empty() {
            return Err(Error::parse(origin, "no colours found"));
        }
        Self::new(colors)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

/// The reference image the patch should resemble, at the patch's size.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecifiedImage(Image);

impl SpecifiedImage {
    pub fn new(image: &Image, side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::invalid("patch side must be positive"));
        }
        let g = resize_grid(image.grid(), side, side);
        Ok(Self(Image::from_grid_clamped(g)?))
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
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub obj: f64,
    pub css: f64,
    pub tv: f64,
    pub nps: f64,
    pub total: f64,
}

/// Batch mean of the combined ensemble confidence.
pub fn obj_loss(ensemble: &EnsembleSpec, patched_batch: &[Image]) -> Result<f64> {
    if patched_batch.is_empty() {
        return Err(Error::invalid("objectness loss needs a nonempty batch"));
    }
    let per_image = patched_batch
        .par_iter()
        .map(|img| ensemble.member_confidences(img))
        .collect::<Result<Vec<_>>>()?;
    obj_from_confidences(ensemble.mode(), &per_image)
}

/// The objectness loss from per-image, per-member confidences.
pub fn obj_from_confidences(mode: EnsembleMode, per_image: &[Vec<f64>]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::invalid("objectness loss needs a nonempty batch"));
    }
    if per_image.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every image needs at least one member confidence"));
    }
    Ok(per_image.iter().map(|c| mode.combine(c)).sum::<f64>() / per_image.len() as f64)
}

fn check_same_dims(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::invalid(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean over `transforms` of `||t(p) - t(s)||^2`, optionally per element, and its gradient in `p`.
pub fn css_grid(
    p: &Grid,
    s: &Grid,
    transforms: &[TransformParams],
    normalize: bool,
) -> Result<(f64, Grid)> {
    check_same_dims(p, s, "patch and specified image differ in shape")?;
    if transforms.is_empty() {
        return Err(Error::invalid("similarity loss needs at least one transform"));
    }
    let scale = if normalize { 1.0 / p.len() as f64 } else { 1.0 } / transforms.len() as f64;
    let (h, w, ch) = p.dims();
    let mut grad = Grid::zeros(h, w, ch);
    let mut value = 0.0;
    for t in transforms {
        let (tp, trace) = apply_transform_traced(p, t);
        let ts = transform_grid(s, t);
        let diff = Grid::new(
            h,
            w,
            ch,
            tp.as_slice().iter().zip(ts.as_slice()).map(|(a, b)| a - b).collect(),
        )?;
        value += scale * diff.as_slice().iter().map(|d| d * d).sum::<f64>();
        grad.add_scaled(&trace.backward(&diff), 2.0 * scale);
    }
    Ok((value, grad))
}

pub fn css_loss(patch: &Patch, s: &SpecifiedImage, transforms: &[TransformParams]) -> Result<f64> {
    Ok(css_grid(patch.grid(), s.grid(), transforms, true)?.0)
}

/// Sum of absolute horizontal and vertical neighbour differences and its subgradient
/// (0 at ties).
pub fn tv_grid(p: &Grid, normalize: bool) -> (f64, Grid) {
    let (h, w, ch) = p.dims();
    let scale = if normalize { 1.0 / p.len() as f64 } else { 1.0 };
    let v = p.as_slice();
    let mut grad = Grid::zeros(h, w, ch);
    let g = grad.as_mut_slice();
    let mut total = 0.0;
    let mut pair = |a: usize, b: usize, total: &mut f64| {
        let d = v[a] - v[b];
        *total += d.abs();
        let s = if d > 0.0 {
            scale
        } else if d < 0.0 {
            -scale
        } else {
            0.0
        };
        g[a] += s;
        g[b] -= s;
    };
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let i = (y * w + x) * ch + c;
                if x + 1 < w {
                    pair(i, i + ch, &mut total);
                }
                if y + 1 < h {
                    pair(i, i + w * ch, &mut total);
                }
            }
        }
    }
    (total * scale, grad)
}

pub fn tv_loss(patch: &Patch) -> f64 {
    tv_grid(patch.grid(), true).0
}

/// Per-pixel distance to the nearest printable colour, summed (optionally averaged
/// over pixels), and its gradient. Pixels sitting exactly on a colour get gradient 0.
pub fn nps_grid(p: &Grid, colors: &PrintableColorSet, normalize: bool) -> Result<(f64, Grid)> {
    let (h, w, ch) = p.dims();
    if ch != 3 {
        return Err(Error::invalid(format!("printability needs RGB, got {ch} channels")));
    }
    let scale = if normalize { 1.0 / (h * w) as f64 } else { 1.0 };
    let mut grad = Grid::zeros(h, w, ch);
    let g = grad.as_mut_slice();
    let mut total = 0.0;
    for (px, gpx) in p.as_slice().chunks_exact(3).zip(g.chunks_exact_mut(3)) {
        let mut best = f64::INFINITY;
        let mut nearest = colors.colors[0];
        for c in &colors.colors {
            let d2 = (px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2);
            if d2 < best {
                best = d2;
                nearest = *c;
            }
        }
        let d = best.sqrt();
        total += d;
        if d > 0.0 {
            for k in 0..3 {
                gpx[k] = scale * (px[k] - nearest[k]) / d;
            }
        }
    }
    Ok((total * scale, grad))
}

pub fn nps_loss(patch: &Patch, colors: &PrintableColorSet) -> f64 {
    nps_grid(patch.grid(), colors, true)
        .expect("patches are RGB")
        .0
}

/// `alpha * nps + beta * tv + lambda_css * css + obj`, rejecting non-finite components.
pub fn total_loss(weights: &LossWeights, obj: f64, css: f64, tv: f64, nps: f64) -> Result<LossBreakdown> {
    for (name, v) in [("obj", obj), ("css", css), ("tv", tv), ("nps", nps)] {
        ensure_finite(name, v)?;
    }
    let total = weights.alpha * nps + weights.beta * tv + weights.lambda_css * css + obj;
    Ok(LossBreakdown {
        obj,
        css,
        tv,
        nps,
        total: ensure_finite("total", total)?,
    })
}

/// One training image: the scene, where the patch goes, and how the patch is
/// transformed before it is pasted.
#[derive(Debug, Clone)]
pub struct PatchedScene {
    pub image: Image,
    pub layout: MaskLayout,
    pub transform: TransformParams,
}

impl PatchedScene {
    pub fn untransformed(image: Image, layout: MaskLayout) -> Self {
        Self {
            image,
            layout,
            transform: TransformParams::identity(),
        }
    }

    /// Transforms `patch` and pastes it into the scene.
    pub fn render(&self, patch: &Grid) -> Result<Image> {
        let tp = transform_grid(patch, &self.transform);
        Image::from_grid_clamped(compose_grid(self.image.grid(), &tp, &self.layout)?)
    }
}

/// Everything the total loss depends on apart from the patch.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub weights: &'a LossWeights,
    pub scenes: &'a [PatchedScene],
    pub ensemble: &'a EnsembleSpec,
    pub specified: &'a SpecifiedImage,
    pub css_transforms: &'a [TransformParams],
    pub colors: &'a PrintableColorSet,
}

impl LossContext<'_> {
    fn check(&self, patch: &Grid) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::invalid("objectness loss needs a nonempty batch"));
        }
        if patch.channels() != Image::CHANNELS || patch.height() != patch.width() {
            return Err(Error::invalid("patch must be a square RGB grid"));
        }
        self.weights.validate()
    }

    /// The loss breakdown without gradients.
    pub fn evaluate(&self, patch: &Grid) -> Result<LossBreakdown> {
        self.check(patch)?;
        let rendered = self
            .scenes
            .par_iter()
            .map(|s| s.render(patch))
            .collect::<Result<Vec<_>>>()?;
        let obj = obj_loss(self.ensemble, &rendered)?;
        let (css, _) = css_grid(patch, self.specified.grid(), self.css_transforms, self.weights.normalize)?;
        let (tv, _) = tv_grid(patch, self.weights.normalize);
        let (nps, _) = nps_grid(patch, self.colors, self.weights.normalize)?;
        total_loss(self.weights, obj, css, tv, nps)
    }

    /// The loss breakdown and the gradient of the total with respect to the patch.
    pub fn gradient(&self, patch: &Grid) -> Result<(LossBreakdown, Grid)> {
        self.check(patch)?;
        self.ensemble.require_differentiable()?;
        let side = patch.height();
        let per_scene = self
            .scenes
            .par_iter()
            .map(|s| -> Result<(f64, Grid)> {
                let (tp, trace) = apply_transform_traced(patch, &s.transform);
                let composed = compose_grid(s.image.grid(), &tp, &s.layout)?;
                let img = Image::from_grid_clamped(composed)?;
                let (conf, g_img) = self.ensemble.confidence_grad(&img)?;
                let g_tp = compose_backward(&s.layout, side, &g_img)?;
                Ok((conf, trace.backward(&g_tp)))
            })
            .collect::<Result<Vec<_>>>()?;
        let inv_b = 1.0 / per_scene.len() as f64;
        let mut grad = Grid::zeros(side, side, Image::CHANNELS);
        let mut obj = 0.0;
        for (conf, g) in &per_scene {
            obj += conf;
            grad.add_scaled(g, inv_b);
        }
        obj *= inv_b;

        let w = self.weights;
        let (css, g_css) = css_grid(patch, self.specified.grid(), self.css_transforms, w.normalize)?;
        let (tv, g_tv) = tv_grid(patch, w.normalize);
        let (nps, g_nps) = nps_grid(patch, self.colors, w.normalize)?;
        grad.add_scaled(&g_css, w.lambda_css);
        grad.add_scaled(&g_tv, w.beta);
        grad.add_scaled(&g_nps, w.alpha);
        let breakdown = total_loss(w, obj, css, tv, nps)?;
        if !grad.is_finite() {
            return Err(Error::Numeric {
                component: "gradient".into(),
                value: f64::NAN,
            });
        }
        Ok((breakdown, grad))
    }
}

/// Gradient of the total loss with respect to the patch values.
pub fn loss_gradient(
    weights: &LossWeights,
    patch: &Patch,
    scenes: &[PatchedScene],
    ensemble: &EnsembleSpec,
    specified: &SpecifiedImage,
    css_transforms: &[TransformParams],
    colors: &PrintableColorSet,
) -> Result<(LossBreakdown, Grid)> {
    LossContext {
        weights,
        scenes,
        ensemble,
        specified,
        css_transforms,
        colors,
    }
    .gradient(patch.grid())
}

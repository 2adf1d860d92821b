use super::{resample_weights, BoundingBox, Grid, Image, Patch, Taps};
use crate::error::{Error, Result};

/// Where the patch goes on each person box.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementSpec {
    /// Patch side as a fraction of `sqrt(w * h)` of the person box.
    pub scale: f64,
    /// Vertical centre of the patch as a fraction of box height from the top.
    pub vertical_anchor: f64,
}

impl Default for PlacementSpec {
    fn default() -> Self {
        Self {
            scale: 0.3,
            vertical_anchor: 0.35,
        }
    }
}

impl PlacementSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::invalid(format!(
                "placement scale {} outside (0, 1]",
                self.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.vertical_anchor) {
            return Err(Error::invalid(format!(
                "vertical anchor {} outside [0, 1]",
                self.vertical_anchor
            )));
        }
        Ok(())
    }
}

/// Square target region for one rendered copy of the patch. May extend past the
/// image; only the visible part is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub x: i64,
    pub y: i64,
    pub side: usize,
}

impl PatchRect {
    /// Visible pixel range `(x0, y0, x1, y1)`, half-open, inside a `width x height` frame.
    pub fn visible(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = (self.x + self.side as i64).min(width as i64);
        let y1 = (self.y + self.side as i64).min(height as i64);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }

    pub fn center(&self) -> (f64, f64) {
        let half = self.side as f64 / 2.0;
        (self.x as f64 + half, self.y as f64 + half)
    }
}

/// The patch mask `M` and the rectangles the patch is rendered into.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayout {
    height: usize,
    width: usize,
    mask: Vec<f64>,
    patch_rects: Vec<PatchRect>,
}

impl MaskLayout {
    /// Hard mask: 1 on the visible part of every rectangle, 0 elsewhere.
    pub fn from_rects(height: usize, width: usize, patch_rects: Vec<PatchRect>) -> Self {
        let mut mask = vec![0.0; height * width];
        for r in &patch_rects {
            if let Some((x0, y0, x1, y1)) = r.visible(width, height) {
                for y in y0..y1 {
                    mask[y * width + x0..y * width + x1].fill(1.0);
                }
            }
        }
        Self {
            height,
            width,
            mask,
            patch_rects,
        }
    }

    /// Soft mask with arbitrary values in `[0, 1]`. Nonzero entries must lie inside a rectangle.
    pub fn with_mask(
        height: usize,
        width: usize,
        mask: Vec<f64>,
        patch_rects: Vec<PatchRect>,
    ) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::invalid(format!(
                "mask has {} entries for a {height}x{width} image",
                mask.len()
            )));
        }
        if mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        let support = Self::from_rects(height, width, patch_rects.clone());
        if mask
            .iter()
            .zip(&support.mask)
            .any(|(&m, &inside)| m > 0.0 && inside == 0.0)
        {
            return Err(Error::invalid("mask support extends outside the patch rectangles"));
        }
        Ok(Self {
            height,
            width,
            mask,
            patch_rects,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::from_rects(height, width, Vec::new())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn patch_rects(&self) -> &[PatchRect] {
        &self.patch_rects
    }

    pub fn is_empty(&self) -> bool {
        self.patch_rects.is_empty()
    }

    pub fn support_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    /// For every pixel, the rectangle (later ones win) and local coordinates it samples.
    fn owners(&self) -> Vec<Option<(usize, usize, usize)>> {
        let mut owner = vec![None; self.height * self.width];
        for (k, r) in self.patch_rects.iter().enumerate() {
            if let Some((x0, y0, x1, y1)) = r.visible(self.width, self.height) {
                for y in y0..y1 {
                    for x in x0..x1 {
                        let ly = (y as i64 - r.y) as usize;
                        let lx = (x as i64 - r.x) as usize;
                        owner[y * self.width + x] = Some((k, lx, ly));
                    }
                }
            }
        }
        owner
    }

    fn tables(&self, patch_side: usize) -> Vec<Vec<Taps>> {
        self.patch_rects
            .iter()
            .map(|r| resample_weights(patch_side, r.side))
            .collect()
    }
}

/// Places one square patch per person box.
///
/// The square has side `round(scale * sqrt(w * h))`, is centred horizontally on the
/// box and vertically at `y + vertical_anchor * h`, and is clipped to the frame.
pub fn build_person_mask(
    height: usize,
    width: usize,
    boxes: &[BoundingBox],
    placement: &PlacementSpec,
) -> Result<MaskLayout> {
    placement.validate()?;
    let mut rects = Vec::new();
    for b in boxes.iter().filter(|b| b.is_person()) {
        b.validate()?;
        let side = (placement.scale * (b.w * b.h).sqrt()).round().max(1.0) as usize;
        let cx = b.x + b.w / 2.0;
        let cy = b.y + placement.vertical_anchor * b.h;
        let half = side as f64 / 2.0;
        let rect = PatchRect {
            x: (cx - half).round() as i64,
            y: (cy - half).round() as i64,
            side,
        };
        if rect.visible(width, height).is_some() {
            rects.push(rect);
        }
    }
    Ok(MaskLayout::from_rects(height, width, rects))
}

fn check_dims(image: &Grid, layout: &MaskLayout) -> Result<()> {
    if image.height() != layout.height || image.width() != layout.width {
        return Err(Error::invalid(format!(
            "mask is {}x{} but image is {}x{}",
            layout.height,
            layout.width,
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// `(1 - M) * image + M * rendered(patch)` on raw grids.
///
/// `patch` must be square with the image's channel count.
pub fn compose_grid(image: &Grid, patch: &Grid, layout: &MaskLayout) -> Result<Grid> {
    check_dims(image, layout)?;
    if patch.height() != patch.width() || patch.channels() != image.channels() {
        return Err(Error::invalid("patch must be square with the image's channels"));
    }
    let mut out = image.clone();
    if layout.is_empty() {
        return Ok(out);
    }
    let channels = image.channels();
    let tables = layout.tables(patch.height());
    let owners = layout.owners();
    let src = patch.as_slice();
    let side = patch.width();
    let dst = out.as_mut_slice();
    let mut rendered = vec![0.0; channels];
    for (p, owner) in owners.iter().enumerate() {
        let Some((k, lx, ly)) = *owner else { continue };
        let m = layout.mask[p];
        if m == 0.0 {
            continue;
        }
        rendered.fill(0.0);
        for &(sy, wy) in &tables[k][ly] {
            for &(sx, wx) in &tables[k][lx] {
                let w = wy * wx;
                let base = (sy * side + sx) * channels;
                for (r, v) in rendered.iter_mut().zip(&src[base..base + channels]) {
                    *r += w * v;
                }
            }
        }
        for (d, r) in dst[p * channels..(p + 1) * channels].iter_mut().zip(&rendered) {
            *d = (1.0 - m) * *d + m * r;
        }
    }
    Ok(out)
}

/// Composites `patch` into `image` through `layout`.
pub fn compose(image: &Image, patch: &Patch, layout: &MaskLayout) -> Result<Image> {
    let out = compose_grid(image.grid(), patch.grid(), layout)?;
    // Convex combination of in-range values; clamping only absorbs rounding.
    Image::from_grid_clamped(out)
}

/// Gradient of a scalar through [`compose_grid`] with respect to the patch values.
///
/// `grad_out` is the gradient with respect to the composed image.
pub fn compose_backward(layout: &MaskLayout, patch_side: usize, grad_out: &Grid) -> Result<Grid> {
    check_dims(grad_out, layout)?;
    let channels = grad_out.channels();
    let mut grad = Grid::zeros(patch_side, patch_side, channels);
    if layout.is_empty() {
        return Ok(grad);
    }
    let tables = layout.tables(patch_side);
    let owners = layout.owners();
    let g_out = grad_out.as_slice();
    let g = grad.as_mut_slice();
    for (p, owner) in owners.iter().enumerate() {
        let Some((k, lx, ly)) = *owner else { continue };
        let m = layout.mask[p];
        if m == 0.0 {
            continue;
        }
        let go = &g_out[p * channels..(p + 1) * channels];
        if go.iter().all(|&v| v == 0.0) {
            continue;
        }
        for &(sy, wy) in &tables[k][ly] {
            for &(sx, wx) in &tables[k][lx] {
                let w = m * wy * wx;
                let base = (sy * patch_side + sx) * channels;
                for c in 0..channels {
                    g[base + c] += w * go[c];
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut s = seed;
        Image::from_fn(h, w, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn zero_mask_is_identity() {
        let img = noise_image(10, 12, 1);
        let patch = Patch::filled(4, 0.9);
        let layout = MaskLayout::empty(10, 12);
        assert_eq!(compose(&img, &patch, &layout).unwrap(), img);
        let soft = MaskLayout::with_mask(
            10,
            12,
            vec![0.0; 120],
            vec![PatchRect { x: 0, y: 0, side: 10 }],
        )
        .unwrap();
        assert_eq!(compose(&img, &patch, &soft).unwrap(), img);
    }

    #[test]
    fn full_mask_yields_patch() {
        let img = noise_image(8, 8, 2);
        let patch = Patch::from_image(noise_image(8, 8, 3)).unwrap();
        let layout = MaskLayout::from_rects(8, 8, vec![PatchRect { x: 0, y: 0, side: 8 }]);
        assert_eq!(compose(&img, &patch, &layout).unwrap(), *patch.image());
    }

    #[test]
    fn soft_mask_single_pixel() {
        let img = Image::filled(1, 1, 0.2);
        let patch = Patch::filled(1, 0.8);
        let layout =
            MaskLayout::with_mask(1, 1, vec![0.5], vec![PatchRect { x: 0, y: 0, side: 1 }])
                .unwrap();
        let out = compose(&img, &patch, &layout).unwrap();
        for c in 0..3 {
            assert!((out.get(0, 0, c) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let img = Image::filled(5, 5, 0.1);
        let layout = MaskLayout::empty(6, 5);
        assert!(matches!(
            compose(&img, &Patch::filled(2, 0.0), &layout),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn soft_mask_outside_rects_is_rejected() {
        let mut mask = vec![0.0; 16];
        mask[15] = 0.3;
        assert!(MaskLayout::with_mask(4, 4, mask, vec![PatchRect { x: 0, y: 0, side: 2 }]).is_err());
    }

    #[test]
    fn placement_rule_example() {
        let b = BoundingBox::person(10.0, 10.0, 40.0, 80.0).unwrap();
        let layout = build_person_mask(100, 100, &[b], &PlacementSpec::default()).unwrap();
        assert_eq!(layout.patch_rects().len(), 1);
        let r = layout.patch_rects()[0];
        assert_eq!(r.side, 17);
        let (cx, cy) = r.center();
        assert!((cx - 30.0).abs() <= 0.5 && (cy - 38.0).abs() <= 0.5, "{cx},{cy}");
        assert_eq!(layout.support_area(), 17 * 17);
    }

    #[test]
    fn no_person_boxes_give_empty_mask() {
        let car = BoundingBox::new(1.0, 1.0, 5.0, 5.0, "car").unwrap();
        let layout = build_person_mask(20, 20, &[car], &PlacementSpec::default()).unwrap();
        assert!(layout.is_empty());
        assert!(layout.mask().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn edge_box_is_clipped() {
        let b = BoundingBox::person(-10.0, 10.0, 30.0, 60.0).unwrap();
        let layout = build_person_mask(64, 64, &[b], &PlacementSpec::default()).unwrap();
        let r = layout.patch_rects()[0];
        assert!(r.x < 0);
        let (x0, y0, x1, y1) = r.visible(64, 64).unwrap();
        assert_eq!(layout.support_area(), (x1 - x0) * (y1 - y0));
        assert!(layout.support_area() < r.side * r.side);
    }

    #[test]
    fn backward_matches_linear_response() {
        // compose is affine in the patch, so the adjoint applied to a unit image
        // gradient must equal the change of the summed output per unit patch change.
        let img = noise_image(12, 12, 4);
        let layout = MaskLayout::from_rects(
            12,
            12,
            vec![PatchRect { x: 2, y: 3, side: 5 }, PatchRect { x: 8, y: 8, side: 6 }],
        );
        let side = 7;
        let base = Patch::filled(side, 0.3);
        let g = compose_backward(&layout, side, &Grid::filled(12, 12, 3, 1.0)).unwrap();
        let sum = |p: &Patch| -> f64 { compose(&img, p, &layout).unwrap().as_slice().iter().sum() };
        for i in [0, 17, 60, 146] {
            let mut v = base.as_slice().to_vec();
            v[i] += 0.25;
            let bumped = Patch::new(side, v).unwrap();
            let fd = (sum(&bumped) - sum(&base)) / 0.25;
            assert!((fd - g.as_slice()[i]).abs() < 1e-9, "{i}: {fd} vs {}", g.as_slice()[i]);
        }
    }
}

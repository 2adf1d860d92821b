use super::Grid;

/// Source taps `(index, weight)` contributing to one destination sample.
pub type Taps = Vec<(usize, f64)>;

/// One-dimensional resampling weights mapping `src` samples onto `dst` samples.
///
/// Upsampling (and equal sizes) uses bilinear interpolation between pixel centres
/// with edge clamping; equal sizes reduce to the identity. Downsampling averages
/// the source footprint of each destination pixel (area filter) so that every
/// source sample contributes.
pub fn resample_weights(src: usize, dst: usize) -> Vec<Taps> {
    assert!(src > 0 && dst > 0, "resample sizes must be positive");
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            if dst >= src {
                let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let f = s - i0 as f64;
                if f > 0.0 && i0 + 1 < src {
                    vec![(i0, 1.0 - f), (i0 + 1, f)]
                } else {
                    vec![(i0, 1.0)]
                }
            } else {
                let lo = d as f64 * ratio;
                let hi = (d + 1) as f64 * ratio;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(src);
                (first..last)
                    .filter_map(|i| {
                        let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                        (overlap > 0.0).then_some((i, overlap / ratio))
                    })
                    .collect()
            }
        })
        .collect()
}

/// Resizes every channel of `grid` to `height x width` with [`resample_weights`] on each axis.
pub fn resize_grid(grid: &Grid, height: usize, width: usize) -> Grid {
    let (h, w, ch) = grid.dims();
    let ry = resample_weights(h, height);
    let rx = resample_weights(w, width);
    let src = grid.as_slice();
    Grid::from_fn(height, width, ch, |y, x, c| {
        let mut v = 0.0;
        for &(sy, wy) in &ry[y] {
            for &(sx, wx) in &rx[x] {
                v += wy * wx * src[(sy * w + sx) * ch + c];
            }
        }
        v
    })
}

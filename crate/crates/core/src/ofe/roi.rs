//! ROI align expressed as a matrix product.
//!
//! For a fixed set of boxes the bilinear sampling is linear in the feature
//! map, so it is precomputed as a dense matrix and applied
//! with one matmul per frame. Gradients flow to the map, not the boxes.

use crate::dataset::BBox;

/// Bilinear samples per bin side.
pub const SAMPLING_RATIO: usize = 2;

/// Smallest box side, in input pixels, before mapping to the feature grid.
pub const MIN_BOX_SIDE: f64 = 1.0;

/// Widens a box to at least [`MIN_BOX_SIDE`] per side about its center.
pub fn enforce_min_size(b: BBox) -> (BBox, bool) {
    let mut out = b;
    let mut changed = false;
    for (lo, hi) in [(&mut out.x_min, &mut out.x_max), (&mut out.y_min, &mut out.y_max)] {
        if !(*hi - *lo >= MIN_BOX_SIDE) {
            let c = 0.5 * (*lo + *hi);
            *lo = c - 0.5 * MIN_BOX_SIDE;
            *hi = c + 0.5 * MIN_BOX_SIDE;
            changed = true;
        }
    }
    (out, changed)
}

/// Bilinear taps `(index, weight)` at coordinate `p` on an axis of `n`
/// cells; empty when the point lies more than one cell outside.
fn taps(p: f64, n: usize) -> Vec<(usize, f64)> {
    if p < -1.0 || p > n as f64 {
        return Vec::new();
    }
    let p = p.max(0.0);
    let lo = p.floor() as usize;
    if lo >= n - 1 {
        return vec![(n - 1, 1.0)];
    }
    let f = p - lo as f64;
    vec![(lo, 1.0 - f), (lo + 1, f)]
}

/// Adds the ROI align weights of one box into `out`, a row-major
/// `(feat_h * feat_w, cols)` matrix, at columns `col0 .. col0 + out_size^2`.
///
/// `scale` maps input pixels to feature cells; half-pixel centers are
/// aligned (a box edge at pixel 0 maps to cell coordinate -0.5).
pub fn add_box_weights(
    out: &mut [f64],
    cols: usize,
    col0: usize,
    bbox: &BBox,
    feat_h: usize,
    feat_w: usize,
    scale: f64,
    out_size: usize,
) {
    let x0 = bbox.x_min * scale - 0.5;
    let y0 = bbox.y_min * scale - 0.5;
    let bin_w = (bbox.x_max - bbox.x_min) * scale / out_size as f64;
    let bin_h = (bbox.y_max - bbox.y_min) * scale / out_size as f64;
    let sr = SAMPLING_RATIO;
    let norm = 1.0 / (sr * sr) as f64;
    for by in 0..out_size {
        for bx in 0..out_size {
            let col = col0 + by * out_size + bx;
            for iy in 0..sr {
                let y = y0 + (by as f64 + (iy as f64 + 0.5) / sr as f64) * bin_h;
                let ty = taps(y, feat_h);
                for ix in 0..sr {
                    let x = x0 + (bx as f64 + (ix as f64 + 0.5) / sr as f64) * bin_w;
                    for &(yi, wy) in &ty {
                        for (xi, wx) in taps(x, feat_w) {
                            out[(yi * feat_w + xi) * cols + col] += norm * wy * wx;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(m: &[f64], map: &[f64], cols: usize) -> Vec<f64> {
        (0..cols)
            .map(|c| map.iter().enumerate().map(|(i, v)| v * m[i * cols + c]).sum())
            .collect()
    }

    #[test]
    fn full_frame_box_equals_block_average() {
        // 16x16 map from a 64x64 image, 4x4 output: each bin averages a 4x4 block
        let (fh, fw, r) = (16, 16, 4);
        let map: Vec<f64> = (0..fh * fw).map(|i| ((i * 37) % 101) as f64).collect();
        let mut m = vec![0.0; fh * fw * r * r];
        add_box_weights(&mut m, r * r, 0, &BBox::new(0.0, 0.0, 64.0, 64.0), fh, fw, 0.25, r);
        let got = apply(&m, &map, r * r);
        for by in 0..r {
            for bx in 0..r {
                let mut s = 0.0;
                for y in 4 * by..4 * by + 4 {
                    for x in 4 * bx..4 * bx + 4 {
                        s += map[y * fw + x];
                    }
                }
                assert!((got[by * r + bx] - s / 16.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bin_weights_sum_to_one_inside_the_map() {
        let (fh, fw, r) = (10, 12, 3);
        let mut m = vec![0.0; fh * fw * r * r];
        add_box_weights(&mut m, r * r, 0, &BBox::new(3.3, 7.1, 20.9, 24.0), fh, fw, 0.4, r);
        for c in 0..r * r {
            let s: f64 = (0..fh * fw).map(|i| m[i * r * r + c]).sum();
            assert!((s - 1.0).abs() < 1e-12, "bin {c}: {s}");
        }
    }

    #[test]
    fn degenerate_boxes_are_widened() {
        let (b, changed) = enforce_min_size(BBox::new(5.0, 2.0, 5.0, 9.0));
        assert!(changed);
        assert_eq!((b.x_min, b.x_max), (4.5, 5.5));
        assert_eq!((b.y_min, b.y_max), (2.0, 9.0));
        assert!(!enforce_min_size(BBox::new(0.0, 0.0, 2.0, 2.0)).1);
    }
}

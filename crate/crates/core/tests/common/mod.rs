//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use tokenfill_core::MaskGrid;

/// Per-window loop evaluation of a masked convolution of a single image
/// `x[C][H][W]` (flat) with `w[Co][C][k][k]`. `threshold` of `None` gives the
/// partial rule (any visible pixel); `Some(alpha)` the restrictive rule.
/// Returns the output and the per-window "produced output" flags.
#[allow(clippy::too_many_arguments)]
pub fn masked_conv_oracle(
    x: &[f32],
    c: usize,
    mask: &MaskGrid,
    w: &[f32],
    co: usize,
    k: usize,
    bias: &[f32],
    stride: usize,
    pad: usize,
    threshold: Option<f64>,
) -> (Vec<f32>, Vec<bool>, usize, usize) {
    let (h, wd) = mask.extents();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; co * oh * ow];
    let mut on = vec![false; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut vis = 0usize;
            let mut total = 0usize;
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    total += 1;
                    if mask.get(iy as usize, ix as usize) {
                        vis += 1;
                    }
                }
            }
            let pass = vis > 0 && threshold.is_none_or(|a| vis as f64 / total as f64 >= a);
            on[oy * ow + ox] = pass;
            if !pass {
                continue;
            }
            for o in 0..co {
                let mut acc = 0.0f64;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            if !mask.get(iy, ix) {
                                continue;
                            }
                            acc += w[((o * c + ci) * k + ky) * k + kx] as f64 * x[(ci * h + iy) * wd + ix] as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = (acc / vis as f64) as f32 + bias[o];
            }
        }
    }
    (out, on, oh, ow)
}

/// Eq. 4 for one 2×2 stage, evaluated cell by cell.
pub fn downsample_oracle(mask: &MaskGrid, alpha: f64) -> MaskGrid {
    let (h, w) = mask.extents();
    let mut out = MaskGrid::zeros(h / 2, w / 2);
    for cy in 0..h / 2 {
        for cx in 0..w / 2 {
            let mut n = 0;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                n += mask.get(2 * cy + dy, 2 * cx + dx) as usize;
            }
            out.set(cy, cx, n as f64 / 4.0 >= alpha);
        }
    }
    out
}

/// Random mask with a per-mask visibility probability, so fully visible,
/// fully masked and mixed windows all occur.
pub fn random_mask(h: usize, w: usize, rng: &mut impl rand::Rng) -> MaskGrid {
    let p: f64 = rng.random_range(0.0..=1.0);
    let values = (0..h * w).map(|_| rng.random_bool(p) as u8).collect();
    MaskGrid::new(h, w, values).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

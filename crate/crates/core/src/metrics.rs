//! Sample-quality proxies computed in the VQ encoder's feature space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use tokenfill_tensor::no_grad;

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::masks::MaskGrid;
use crate::vq::VqModel;

/// Spatially averaged E_VQ features, one `n_z` vector per image.
pub fn pooled_features(vq: &VqModel, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let f = no_grad(|| vq.features(&Image::batch(&chunk.iter().collect::<Vec<_>>())?))?;
        let s = f.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        for i in 0..s[0] {
            out.push(
                (0..c)
                    .map(|ch| {
                        let base = (i * c + ch) * hw;
                        f.data()[base..base + hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn gaussian_fit(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let roots = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() || a[0].len() != b[0].len() {
        return Err(invalid("fid_proxy", "empty feature sets or mismatched dimensions"));
    }
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    let s = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&s * &cb * &s));
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// FID proxy between two image sets.
pub fn fid_proxy(vq: &VqModel, real: &[Image], generated: &[Image]) -> Result<f64> {
    frechet_distance(&pooled_features(vq, real)?, &pooled_features(vq, generated)?)
}

/// Mean pairwise distance between samples of one input, restricted to the
/// token cells hidden by `token_mask`: the RMS difference of E_VQ features
/// over those cells. Zero when no cell is hidden.
pub fn diversity(vq: &VqModel, samples: &[Image], token_mask: &MaskGrid) -> Result<f64> {
    if samples.len() < 2 {
        return Err(invalid("diversity", format!("{} samples; need at least 2", samples.len())));
    }
    let f = no_grad(|| vq.features(&Image::batch(&samples.iter().collect::<Vec<_>>())?))?;
    let s = f.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    if token_mask.values().len() != hw {
        return Err(invalid("diversity", "token mask extents differ from the feature grid"));
    }
    let cells: Vec<usize> = (0..hw).filter(|&i| token_mask.values()[i] == 0).collect();
    if cells.is_empty() {
        return Ok(0.0);
    }
    let d = f.data();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..s[0] {
        for j in i + 1..s[0] {
            let mut sq = 0.0f64;
            for ch in 0..c {
                for &cell in &cells {
                    let a = d[(i * c + ch) * hw + cell] as f64;
                    let b = d[(j * c + ch) * hw + cell] as f64;
                    sq += (a - b) * (a - b);
                }
            }
            total += (sq / (c * cells.len()) as f64).sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

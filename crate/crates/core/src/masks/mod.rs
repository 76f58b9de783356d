//! Binary visibility masks, α-thresholded downsampling and the mask-aware
//! convolutions built on them.

mod conv;
mod generate;

use std::path::Path;

use tokenfill_tensor::Tensor;

pub use conv::{partial_conv, restrictive_conv, window_stats, ConvPlan, WindowStats};
pub use generate::{generate_mask, generate_mask_with, MaskKind, StrokeParams};

use crate::error::{invalid, Error, Result};
use crate::netpbm::Raster;

/// Per-pixel visibility, 1 = visible, 0 = masked.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(invalid("mask", format!("{} values for {height}x{width}", values.len())));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(invalid("mask", format!("non-binary value {v}")));
        }
        Ok(MaskGrid { height, width, values })
    }

    pub fn filled(height: usize, width: usize, visible: bool) -> Self {
        MaskGrid {
            height,
            width,
            values: vec![visible as u8; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, visible: bool) {
        self.values[y * self.width + x] = visible as u8;
    }

    pub fn visible_count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn visible_fraction(&self) -> f64 {
        self.visible_count() as f64 / self.values.len() as f64
    }

    pub fn masked_fraction(&self) -> f64 {
        1.0 - self.visible_fraction()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    /// `[1, 1, H, W]` float view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.to_f32(), &[1, 1, self.height, self.width]).expect("validated extents")
    }

    /// Stacks masks into `[N, 1, H, W]`.
    pub fn batch_tensor(masks: &[MaskGrid]) -> Result<Tensor> {
        let first = masks.first().ok_or_else(|| invalid("mask batch", "empty batch"))?;
        let mut data = Vec::with_capacity(masks.len() * first.values.len());
        for m in masks {
            first.expect_extents("mask batch", m.extents())?;
            data.extend(m.values.iter().map(|&v| v as f32));
        }
        Ok(Tensor::new(data, &[masks.len(), 1, first.height, first.width])?)
    }

    pub(crate) fn expect_extents(&self, op: &'static str, found: (usize, usize)) -> Result<()> {
        if self.extents() != found {
            return Err(Error::MaskExtent {
                op,
                expected: self.extents(),
                found,
            });
        }
        Ok(())
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            bytes: self.values.iter().map(|&v| v * 255).collect(),
        }
    }

    /// Any sample ≥ 128 reads as visible.
    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.channels != 1 {
            return Err(invalid("mask", "expected a PGM (P5) raster"));
        }
        let values = r.bytes.iter().map(|&b| (b >= 128) as u8).collect();
        MaskGrid::new(r.height, r.width, values)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::from_raster(&Raster::read(path)?)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        self.to_raster().write(path)
    }
}

fn check_alpha(op: &'static str, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(op, format!("alpha {alpha} outside (0, 1]")));
    }
    Ok(())
}

/// Coarse cell is visible iff the visible fraction of its `window × window`
/// block is at least `alpha`.
pub fn downsample_mask(mask: &MaskGrid, alpha: f64, window: usize) -> Result<MaskGrid> {
    check_alpha("downsample_mask", alpha)?;
    if window == 0 || mask.height % window != 0 || mask.width % window != 0 {
        return Err(invalid(
            "downsample_mask",
            format!("extents {}x{} not divisible by window {window}", mask.height, mask.width),
        ));
    }
    let (h, w) = (mask.height / window, mask.width / window);
    let area = (window * window) as f64;
    let mut values = vec![0u8; h * w];
    for cy in 0..h {
        for cx in 0..w {
            let mut count = 0usize;
            for dy in 0..window {
                let row = (cy * window + dy) * mask.width + cx * window;
                count += mask.values[row..row + window].iter().map(|&v| v as usize).sum::<usize>();
            }
            values[cy * w + cx] = (count as f64 / area >= alpha) as u8;
        }
    }
    Ok(MaskGrid { height: h, width: w, values })
}

/// Masks from input resolution down to the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<MaskGrid>,
    pub alpha: f64,
}

impl MaskPyramid {
    pub fn stages(&self) -> usize {
        self.levels.len() - 1
    }

    /// The token-grid mask M̂.
    pub fn token_mask(&self) -> &MaskGrid {
        self.levels.last().expect("pyramid has at least one level")
    }
}

pub fn build_pyramid(mask: &MaskGrid, alpha: f64, stages: usize) -> Result<MaskPyramid> {
    check_alpha("build_pyramid", alpha)?;
    let f = 1usize << stages;
    if mask.height % f != 0 || mask.width % f != 0 {
        return Err(invalid(
            "build_pyramid",
            format!("extents {}x{} not divisible by 2^{stages}", mask.height, mask.width),
        ));
    }
    let mut levels = vec![mask.clone()];
    for _ in 0..stages {
        let next = downsample_mask(levels.last().unwrap(), alpha, 2)?;
        levels.push(next);
    }
    Ok(MaskPyramid { levels, alpha })
}

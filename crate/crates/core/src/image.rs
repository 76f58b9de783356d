use std::path::Path;

use tokenfill_tensor::Tensor;

use crate::error::{invalid, Result};
use crate::masks::MaskGrid;
use crate::netpbm::Raster;

/// RGB image stored channel-major (`[3, H, W]`) with values in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(invalid("image", format!("{} values for 3x{height}x{width}", data.len())));
        }
        Ok(Image { height, width, data })
    }

    pub fn from_rgb_bytes(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let hw = height * width;
        if rgb.len() != 3 * hw {
            return Err(invalid("image", format!("{} bytes for {height}x{width} RGB", rgb.len())));
        }
        let mut data = vec![0.0; 3 * hw];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = byte_to_unit(px[c]);
            }
        }
        Ok(Image { height, width, data })
    }

    pub fn to_rgb_bytes(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = vec![0u8; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[3 * p + c] = unit_to_byte(self.data[c * hw + p]);
            }
        }
        out
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(invalid("image", format!("expected [3,H,W] tensor, got {s:?}"))),
        };
        Image::new(h, w, t.to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[1, 3, self.height, self.width]).expect("validated extents")
    }

    /// Stacks same-sized images into `[N, 3, H, W]`.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| invalid("image batch", "empty batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.height, im.width) != (first.height, first.width) {
                return Err(invalid("image batch", "mixed extents"));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new(data, &[images.len(), 3, first.height, first.width])?)
    }

    /// Splits `[N, 3, H, W]` into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(invalid("image batch", format!("expected [N,3,H,W], got {s:?}")));
        }
        let per = 3 * s[2] * s[3];
        Ok(t.data()
            .chunks_exact(per)
            .map(|c| Image {
                height: s[2],
                width: s[3],
                data: c.to_vec(),
            })
            .collect())
    }

    /// `X ⊙ M`: hidden pixels set to zero in every channel.
    pub fn masked(&self, mask: &MaskGrid) -> Result<Image> {
        if mask.extents() != (self.height, self.width) {
            return Err(invalid("image", format!("mask {:?} for a {}x{} image", mask.extents(), self.height, self.width)));
        }
        let hw = self.height * self.width;
        let mut data = self.data.clone();
        for (p, &m) in mask.values().iter().enumerate() {
            if m == 0 {
                for c in 0..3 {
                    data[c * hw + p] = 0.0;
                }
            }
        }
        Ok(Image { data, ..*self })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let r = Raster::read(path)?;
        if r.channels != 3 {
            return Err(invalid("image", format!("{} is not a PPM (P6) file", path.display())));
        }
        Image::from_rgb_bytes(r.height, r.width, &r.bytes)
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            bytes: self.to_rgb_bytes(),
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        self.to_raster().write(path)
    }
}

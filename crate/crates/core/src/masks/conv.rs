//! Partial and restrictive convolutions.
//!
//! Window sums count only positions inside the image: padded positions add
//! to neither the visible count `sum(M)` nor the window size `sum(𝟙)`.

use tokenfill_tensor::Tensor;

use super::{check_alpha, MaskGrid};
use crate::error::{invalid, Result};

/// Visible and in-bounds counts of every output window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowStats {
    pub out_h: usize,
    pub out_w: usize,
    pub visible: Vec<u32>,
    pub total: Vec<u32>,
}

impl WindowStats {
    pub fn fraction(&self, i: usize) -> f64 {
        self.visible[i] as f64 / self.total[i] as f64
    }
}

pub fn window_stats(mask: &MaskGrid, kernel: usize, stride: usize, padding: usize) -> Result<WindowStats> {
    let (h, w) = mask.extents();
    if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(invalid("window_stats", format!("kernel {kernel} stride {stride} on {h}x{w}")));
    }
    let out_h = (h + 2 * padding - kernel) / stride + 1;
    let out_w = (w + 2 * padding - kernel) / stride + 1;
    // summed-area table with a zero border
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = mask.values[y * w + x] as u32 + sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let mut visible = Vec::with_capacity(out_h * out_w);
    let mut total = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y0 = (oy * stride).saturating_sub(padding);
        let y1 = (oy * stride + kernel).saturating_sub(padding).min(h);
        for ox in 0..out_w {
            let x0 = (ox * stride).saturating_sub(padding);
            let x1 = (ox * stride + kernel).saturating_sub(padding).min(w);
            let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0];
            visible.push(s);
            total.push(((y1 - y0) * (x1 - x0)) as u32);
        }
    }
    Ok(WindowStats {
        out_h,
        out_w,
        visible,
        total,
    })
}

/// Precomputed per-window scaling for one mask-aware convolution over a
/// batch. The maps carry no gradient.
#[derive(Debug, Clone)]
pub struct ConvPlan {
    /// `[N,1,H,W]` multiplied into the input; `None` for a plain convolution.
    pub input_mask: Option<Tensor>,
    /// `[N,1,OH,OW]` factor applied to `W^T(X ⊙ M)`.
    pub scale: Tensor,
    /// `[N,1,OH,OW]` positions where the bias is added.
    pub valid: Tensor,
    pub in_extents: (usize, usize),
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvPlan {
    fn from_rule(
        masks: &[MaskGrid],
        kernel: usize,
        stride: usize,
        padding: usize,
        keep: impl Fn(u32, u32) -> bool,
    ) -> Result<(Self, Vec<WindowStats>)> {
        let first = masks.first().ok_or_else(|| invalid("masked conv", "no masks"))?;
        let mut scale = Vec::new();
        let mut valid = Vec::new();
        let mut stats = Vec::with_capacity(masks.len());
        for m in masks {
            first.expect_extents("masked conv", m.extents())?;
            let s = window_stats(m, kernel, stride, padding)?;
            for (&v, &t) in s.visible.iter().zip(&s.total) {
                let on = v > 0 && keep(v, t);
                scale.push(if on { 1.0 / v as f32 } else { 0.0 });
                valid.push(on as u8 as f32);
            }
            stats.push(s);
        }
        let shape = [masks.len(), 1, stats[0].out_h, stats[0].out_w];
        let plan = ConvPlan {
            input_mask: Some(MaskGrid::batch_tensor(masks)?),
            scale: Tensor::new(scale, &shape)?,
            valid: Tensor::new(valid, &shape)?,
            in_extents: first.extents(),
            kernel,
            stride,
            padding,
        };
        Ok((plan, stats))
    }

    /// Partial convolution: windows with any visible pixel are rescaled by
    /// `1/sum(M)`; the returned masks mark those windows visible.
    pub fn partial(masks: &[MaskGrid], kernel: usize, stride: usize, padding: usize) -> Result<(Self, Vec<MaskGrid>)> {
        let (plan, stats) = Self::from_rule(masks, kernel, stride, padding, |_, _| true)?;
        let updated = stats
            .iter()
            .map(|s| MaskGrid {
                height: s.out_h,
                width: s.out_w,
                values: s.visible.iter().map(|&v| (v > 0) as u8).collect(),
            })
            .collect();
        Ok((plan, updated))
    }

    /// Restrictive convolution (stride 1, same padding): only windows whose
    /// visible fraction reaches `alpha` produce output.
    pub fn restrictive(masks: &[MaskGrid], kernel: usize, alpha: f64) -> Result<Self> {
        check_alpha("restrictive_conv", alpha)?;
        if kernel % 2 == 0 {
            return Err(invalid("restrictive_conv", format!("even kernel {kernel}")));
        }
        let keep = |v: u32, t: u32| v as f64 / t as f64 >= alpha;
        Ok(Self::from_rule(masks, kernel, 1, kernel / 2, keep)?.0)
    }

    /// An ordinary convolution with the same `1/k²` parametrisation as a
    /// fully visible restrictive window, for ablations.
    pub fn plain(extents: (usize, usize), kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let s = window_stats(&MaskGrid::ones(extents.0, extents.1), kernel, stride, padding)?;
        let shape = [1, 1, s.out_h, s.out_w];
        Ok(ConvPlan {
            input_mask: None,
            scale: Tensor::full(&shape, 1.0 / (kernel * kernel) as f32),
            valid: Tensor::ones(&shape),
            in_extents: extents,
            kernel,
            stride,
            padding,
        })
    }

    pub fn apply(&self, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || (s[2], s[3]) != self.in_extents {
            return Err(crate::error::Error::MaskExtent {
                op: "masked conv",
                expected: self.in_extents,
                found: if s.len() == 4 { (s[2], s[3]) } else { (0, 0) },
            });
        }
        if weight.shape().get(2) != Some(&self.kernel) {
            return Err(invalid("masked conv", format!("weight {:?} for kernel {}", weight.shape(), self.kernel)));
        }
        let input = match &self.input_mask {
            Some(m) => x.mul(m)?,
            None => x.clone(),
        };
        let mut out = input.conv2d(weight, None, self.stride, self.padding)?.mul(&self.scale)?;
        if let Some(b) = bias {
            let co = b.numel();
            out = out.add(&b.reshape(&[1, co, 1, 1])?.mul(&self.valid)?)?;
        }
        Ok(out)
    }
}

/// Partial convolution of `input [N,C,H,W]`; one mask per batch element.
pub fn partial_conv(
    input: &Tensor,
    masks: &[MaskGrid],
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<MaskGrid>)> {
    expect_batch("partial_conv", input, masks)?;
    let (plan, updated) = ConvPlan::partial(masks, weight_kernel(weight)?, stride, padding)?;
    Ok((plan.apply(input, weight, bias)?, updated))
}

/// Restrictive convolution of `input [N,C,H,W]`; the masks are not updated.
pub fn restrictive_conv(
    input: &Tensor,
    masks: &[MaskGrid],
    weight: &Tensor,
    bias: Option<&Tensor>,
    alpha: f64,
) -> Result<Tensor> {
    expect_batch("restrictive_conv", input, masks)?;
    ConvPlan::restrictive(masks, weight_kernel(weight)?, alpha)?.apply(input, weight, bias)
}

fn weight_kernel(weight: &Tensor) -> Result<usize> {
    match weight.shape() {
        [_, _, kh, kw] if kh == kw => Ok(*kh),
        s => Err(invalid("masked conv", format!("expected square [Co,C,k,k] weight, got {s:?}"))),
    }
}

fn expect_batch(op: &'static str, input: &Tensor, masks: &[MaskGrid]) -> Result<()> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(invalid(op, format!("expected [N,C,H,W] input, got {s:?}")));
    }
    if masks.len() != s[0] {
        return Err(invalid(op, format!("{} masks for batch of {}", masks.len(), s[0])));
    }
    for m in masks {
        if m.extents() != (s[2], s[3]) {
            return Err(crate::error::Error::MaskExtent {
                op,
                expected: (s[2], s[3]),
                found: m.extents(),
            });
        }
    }
    Ok(())
}

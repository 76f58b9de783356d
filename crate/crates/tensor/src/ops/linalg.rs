use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `c (+)= op(a) · op(b)` for row-major buffers, where `op(a)` is `m×k` and
/// `op(b)` is `k×n`. A transposed operand is stored in its transposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: extents and strides describe regions inside the asserted slice lengths.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    /// `[M,K] × [K,N] → [M,N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        expect_rank("matmul", self, 2)?;
        expect_rank("matmul", other, 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(TensorError::AxisMismatch {
                op: "matmul",
                axis: 1,
                left: k,
                right: k2,
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, &mut out, false);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op("matmul", vec![m, n], out, vec![self.clone(), other.clone()], move |g| {
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        expect_rank("linear", weight, 2)?;
        let din = *self.shape().last().unwrap_or(&0);
        if din != weight.shape()[0] {
            return Err(TensorError::AxisMismatch {
                op: "linear",
                axis: self.rank().saturating_sub(1),
                left: din,
                right: weight.shape()[0],
            });
        }
        let rows = self.numel() / din;
        let dout = weight.shape()[1];
        let y = self.reshape(&[rows, din])?.matmul(weight)?;
        let y = match bias {
            Some(b) => y.add(b)?,
            None => y,
        };
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = dout;
        y.reshape(&out_shape)
    }
}

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies
/// inside `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx { (g.w + g.pad - kx - 1) / g.stride + 1 } else { 0 };
    lo.min(g.wo)..hi.min(g.wo).max(lo.min(g.wo))
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let valid = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..valid.start].fill(0.0);
                    drow[valid.end..].fill(0.0);
                    if valid.is_empty() {
                        continue;
                    }
                    let first = valid.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        drow[valid.clone()].copy_from_slice(&src[first..first + valid.len()]);
                    } else {
                        for (j, d) in drow[valid.clone()].iter_mut().enumerate() {
                            *d = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let valid = valid_cols(g, kx);
                if valid.is_empty() {
                    continue;
                }
                let first = valid.start * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + valid.start..oy * g.wo + valid.end];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            dst[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation. `self: [N,C,H,W]`, `weight: [Co,C,kh,kw]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        expect_rank("conv2d", self, 4)?;
        expect_rank("conv2d", weight, 4)?;
        let [n, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let [co, ci, kh, kw] = [weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]];
        if ci != c {
            return Err(TensorError::AxisMismatch {
                op: "conv2d",
                axis: 1,
                left: c,
                right: ci,
            });
        }
        if stride == 0 {
            return Err(crate::error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::AxisMismatch {
                op: "conv2d",
                axis: if h + 2 * padding < kh { 2 } else { 3 },
                left: if h + 2 * padding < kh { h } else { w },
                right: if h + 2 * padding < kh { kh } else { kw },
            });
        }
        if let Some(b) = bias {
            if b.numel() != co {
                return Err(TensorError::AxisMismatch {
                    op: "conv2d bias",
                    axis: 0,
                    left: b.numel(),
                    right: co,
                });
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let ckk = c * kh * kw;
        let hw = geom.ho * geom.wo;
        let mut out = vec![0.0f32; n * co * hw];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; ckk * hw] };
        for b in 0..n {
            let xb = &self.data()[b * c * h * w..(b + 1) * c * h * w];
            let colv: &[f32] = if geom.is_pointwise() {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            gemm(co, ckk, hw, weight.data(), false, colv, false, &mut out[b * co * hw..(b + 1) * co * hw], false);
        }
        if let Some(bt) = bias {
            for b in 0..n {
                for (o, &bv) in bt.data().iter().enumerate() {
                    for v in &mut out[(b * co + o) * hw..(b * co + o + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let (x, wt) = (self.clone(), weight.clone());
        let bias_grad = bias.map(|b| b.requires_grad());
        let out_shape = vec![n, co, geom.ho, geom.wo];
        Ok(Tensor::from_op("conv2d", out_shape, out, inputs, move |g| {
            let need_x = x.requires_grad();
            let need_w = wt.requires_grad();
            let mut gx = need_x.then(|| vec![0.0f32; n * c * h * w]);
            let mut gw = need_w.then(|| vec![0.0f32; co * ckk]);
            let mut cols = vec![0.0f32; if geom.is_pointwise() { 0 } else { ckk * hw }];
            let mut dcols = vec![0.0f32; ckk * hw];
            for b in 0..n {
                let gb = &g[b * co * hw..(b + 1) * co * hw];
                if let Some(gw) = gw.as_mut() {
                    let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
                    let colv: &[f32] = if geom.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, &geom, &mut cols);
                        &cols
                    };
                    gemm(co, hw, ckk, gb, false, colv, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * c * h * w..(b + 1) * c * h * w];
                    if geom.is_pointwise() {
                        gemm(ckk, co, hw, wt.data(), true, gb, false, gxb, true);
                    } else {
                        gemm(ckk, co, hw, wt.data(), true, gb, false, &mut dcols, false);
                        col2im(&dcols, &geom, gxb);
                    }
                }
            }
            let mut res = vec![gx, gw];
            if let Some(need_b) = bias_grad {
                res.push(need_b.then(|| {
                    let mut gbias = vec![0.0f32; co];
                    for b in 0..n {
                        for (o, acc) in gbias.iter_mut().enumerate() {
                            *acc += g[(b * co + o) * hw..(b * co + o + 1) * hw].iter().sum::<f32>();
                        }
                    }
                    gbias
                }));
            }
            res
        }))
    }
}

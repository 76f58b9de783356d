use rand::Rng;

use super::linalg::{expect_rank, gemm};
use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

/// Extra controls for [`Tensor::attention_with`].
#[derive(Debug, Clone, Default)]
pub struct AttentionOptions {
    /// `[N, Lk]`, `true` where a key may be attended to.
    pub key_mask: Option<Vec<bool>>,
    /// Query `i` sees keys `0..=i` only.
    pub causal: bool,
    /// Pre-scaled keep mask over attention weights, `[N, h, L, Lk]`.
    pub dropout: Option<Vec<f32>>,
}

fn softmax_row(row: &mut [f32], inv_t: f32) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_t).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

impl Tensor {
    /// Softmax over the last axis of `logits / temperature`.
    pub fn softmax(&self, temperature: f32) -> Result<Tensor> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(invalid("softmax", format!("temperature must be positive, got {temperature}")));
        }
        let k = *self.shape().last().expect("rank >= 1");
        let inv_t = 1.0 / temperature;
        let mut data = self.to_vec();
        for row in data.chunks_mut(k) {
            softmax_row(row, inv_t);
        }
        let y = data.clone();
        Ok(Tensor::from_op("softmax", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0f32; g.len()];
            for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot) * inv_t;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Normalizes to zero mean and unit variance over the last axis.
    pub fn layernorm(&self, eps: f32) -> Result<Tensor> {
        self.layernorm_axis(self.rank() - 1, eps)
    }

    /// Normalizes over `axis` (no affine parameters).
    pub fn layernorm_axis(&self, axis: usize, eps: f32) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(invalid("layernorm", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| x[at(k)] as f64).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (x[at(k)] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps as f64).sqrt();
                inv_std[o * inner + i] = is as f32;
                for k in 0..n {
                    xhat[at(k)] = ((x[at(k)] as f64 - mean) * is) as f32;
                }
            }
        }
        let saved = xhat.clone();
        Ok(Tensor::from_op("layernorm", shape.to_vec(), xhat, vec![self.clone()], move |g| {
            let mut gx = vec![0.0f32; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let mut mg = 0.0f32;
                    let mut mgx = 0.0f32;
                    for k in 0..n {
                        mg += g[at(k)];
                        mgx += g[at(k)] * saved[at(k)];
                    }
                    mg /= n as f32;
                    mgx /= n as f32;
                    let is = inv_std[o * inner + i];
                    for k in 0..n {
                        gx[at(k)] = is * (g[at(k)] - mg - saved[at(k)] * mgx);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Scaled dot-product attention, `softmax(q·kᵀ/√d)·v`, for `[N,h,L,d]` inputs.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        Self::attention_with(q, k, v, &AttentionOptions::default())
    }

    pub fn attention_with(q: &Tensor, k: &Tensor, v: &Tensor, opts: &AttentionOptions) -> Result<Tensor> {
        for t in [q, k, v] {
            expect_rank("attention", t, 4)?;
        }
        let [n, h, l, d] = [q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]];
        let lk = k.shape()[2];
        for (axis, (a, b)) in [(0, (n, k.shape()[0])), (1, (h, k.shape()[1])), (3, (d, k.shape()[3]))] {
            if a != b {
                return Err(TensorError::AxisMismatch { op: "attention q/k", axis, left: a, right: b });
            }
        }
        if k.shape()[..3] != v.shape()[..3] {
            let axis = (0..3).find(|&i| k.shape()[i] != v.shape()[i]).unwrap_or(0);
            return Err(TensorError::AxisMismatch {
                op: "attention k/v",
                axis,
                left: k.shape()[axis],
                right: v.shape()[axis],
            });
        }
        let dv = v.shape()[3];
        if let Some(m) = &opts.key_mask {
            if m.len() != n * lk {
                return Err(invalid("attention", format!("key mask has {} entries, expected {}", m.len(), n * lk)));
            }
        }
        if let Some(dm) = &opts.dropout {
            if dm.len() != n * h * l * lk {
                return Err(invalid("attention", "dropout mask extent mismatch"));
            }
        }
        if opts.causal && l != lk {
            return Err(invalid("attention", "causal attention requires equal query/key lengths"));
        }
        let scale = 1.0 / (d as f32).sqrt();
        let mut probs = vec![0.0f32; n * h * l * lk];
        let mut out = vec![0.0f32; n * h * l * dv];
        let mut pd = vec![0.0f32; l * lk];
        for b in 0..n {
            for hh in 0..h {
                let bh = b * h + hh;
                let qs = &q.data()[bh * l * d..(bh + 1) * l * d];
                let ks = &k.data()[bh * lk * d..(bh + 1) * lk * d];
                let vs = &v.data()[bh * lk * dv..(bh + 1) * lk * dv];
                let p = &mut probs[bh * l * lk..(bh + 1) * l * lk];
                gemm(l, d, lk, qs, false, ks, true, p, false);
                for (i, row) in p.chunks_mut(lk).enumerate() {
                    for (j, s) in row.iter_mut().enumerate() {
                        let visible = opts.key_mask.as_ref().map_or(true, |m| m[b * lk + j]);
                        *s = if visible && !(opts.causal && j > i) { *s * scale } else { f32::NEG_INFINITY };
                    }
                    softmax_row(row, 1.0);
                }
                let pv: &[f32] = match &opts.dropout {
                    Some(dm) => {
                        let dmb = &dm[bh * l * lk..(bh + 1) * l * lk];
                        for ((o, &pi), &mi) in pd.iter_mut().zip(p.iter()).zip(dmb) {
                            *o = pi * mi;
                        }
                        &pd
                    }
                    None => p,
                };
                gemm(l, lk, dv, pv, false, vs, false, &mut out[bh * l * dv..(bh + 1) * l * dv], false);
            }
        }
        let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
        let dropout = opts.dropout.clone();
        Ok(Tensor::from_op(
            "attention",
            vec![n, h, l, dv],
            out,
            vec![q.clone(), k.clone(), v.clone()],
            move |g| {
                let mut gq = vec![0.0f32; n * h * l * d];
                let mut gk = vec![0.0f32; n * h * lk * d];
                let mut gv = vec![0.0f32; n * h * lk * dv];
                let mut dp = vec![0.0f32; l * lk];
                let mut pd = vec![0.0f32; l * lk];
                for bh in 0..n * h {
                    let p = &probs[bh * l * lk..(bh + 1) * l * lk];
                    let go = &g[bh * l * dv..(bh + 1) * l * dv];
                    let qs = &qc.data()[bh * l * d..(bh + 1) * l * d];
                    let ks = &kc.data()[bh * lk * d..(bh + 1) * lk * d];
                    let vs = &vc.data()[bh * lk * dv..(bh + 1) * lk * dv];
                    let dmb = dropout.as_ref().map(|dm| &dm[bh * l * lk..(bh + 1) * l * lk]);
                    let pv: &[f32] = match dmb {
                        Some(m) => {
                            for ((o, &pi), &mi) in pd.iter_mut().zip(p).zip(m) {
                                *o = pi * mi;
                            }
                            &pd
                        }
                        None => p,
                    };
                    gemm(lk, l, dv, pv, true, go, false, &mut gv[bh * lk * dv..(bh + 1) * lk * dv], false);
                    gemm(l, dv, lk, go, false, vs, true, &mut dp, false);
                    if let Some(m) = dmb {
                        for (x, &mi) in dp.iter_mut().zip(m) {
                            *x *= mi;
                        }
                    }
                    for (dr, pr) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
                        let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (x, &pi) in dr.iter_mut().zip(pr) {
                            *x = pi * (*x - dot) * scale;
                        }
                    }
                    gemm(l, lk, d, &dp, false, ks, false, &mut gq[bh * l * d..(bh + 1) * l * d], false);
                    gemm(lk, l, d, &dp, true, qs, false, &mut gk[bh * lk * d..(bh + 1) * lk * d], false);
                }
                vec![Some(gq), Some(gk), Some(gv)]
            },
        ))
    }

    /// Weighted mean negative log-likelihood of `targets` under
    /// `softmax(self)` for `[R, K]` logits. Rows with zero weight do not
    /// contribute; an all-zero weight vector yields 0.
    pub fn cross_entropy(&self, targets: &[usize], weights: &[f32]) -> Result<Tensor> {
        expect_rank("cross_entropy", self, 2)?;
        let (r, k) = (self.shape()[0], self.shape()[1]);
        if targets.len() != r || weights.len() != r {
            return Err(TensorError::AxisMismatch {
                op: "cross_entropy",
                axis: 0,
                left: r,
                right: if targets.len() != r { targets.len() } else { weights.len() },
            });
        }
        if let Some(&bad) = targets.iter().zip(weights).find(|(&t, &w)| w != 0.0 && t >= k).map(|(t, _)| t) {
            return Err(invalid("cross_entropy", format!("target {bad} outside [0, {k})")));
        }
        let total_w: f64 = weights.iter().map(|&w| w as f64).sum();
        let mut probs = self.to_vec();
        let mut loss = 0.0f64;
        for (row_i, row) in probs.chunks_mut(k).enumerate() {
            let w = weights[row_i];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64 + row.iter().map(|&z| ((z - max) as f64).exp()).sum::<f64>().ln();
            if w != 0.0 {
                loss += w as f64 * (lse - row[targets[row_i]] as f64);
            }
            for z in row.iter_mut() {
                *z = ((*z as f64) - lse).exp() as f32;
            }
        }
        let value = if total_w > 0.0 { loss / total_w } else { 0.0 };
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        Ok(Tensor::from_op("cross_entropy", vec![1], vec![value as f32], vec![self.clone()], move |g| {
            let mut gx = vec![0.0f32; r * k];
            if total_w > 0.0 {
                for (row_i, (out, p)) in gx.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                    let w = weights[row_i];
                    if w == 0.0 {
                        continue;
                    }
                    let c = g[0] * (w as f64 / total_w) as f32;
                    for (o, &pi) in out.iter_mut().zip(p) {
                        *o = c * pi;
                    }
                    out[targets[row_i]] -= c;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Row gather from a `[V, d]` table.
    pub fn embedding(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        expect_rank("embedding", table, 2)?;
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(invalid("embedding", format!("index {bad} outside table of {v} rows")));
        }
        if indices.is_empty() {
            return Err(invalid("embedding", "no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op("embedding", vec![indices.len(), d], data, vec![table.clone()], move |g| {
            let mut gt = vec![0.0f32; v * d];
            for (r, &i) in idx.iter().enumerate() {
                for (a, b) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                    *a += b;
                }
            }
            vec![Some(gt)]
        }))
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        expect_rank("upsample", self, 4)?;
        let [n, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let (ho, wo) = (h * factor, w * factor);
        let src = self.data();
        let mut data = vec![0.0f32; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    data[(p * ho + y) * wo + x] = src[(p * h + y / factor) * w + x / factor];
                }
            }
        }
        Ok(Tensor::from_op("upsample", vec![n, c, ho, wo], data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0f32; n * c * h * w];
            for p in 0..n * c {
                for y in 0..ho {
                    for x in 0..wo {
                        gx[(p * h + y / factor) * w + x / factor] += g[(p * ho + y) * wo + x];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Non-overlapping `k×k` average pooling of `[N,C,H,W]`.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        expect_rank("avg_pool2d", self, 4)?;
        let [n, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::AxisMismatch {
                op: "avg_pool2d",
                axis: if k == 0 || h % k != 0 { 2 } else { 3 },
                left: if k == 0 || h % k != 0 { h } else { w },
                right: k,
            });
        }
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f32;
        let src = self.data();
        let mut data = vec![0.0f32; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    data[(p * ho + y / k) * wo + x / k] += src[(p * h + y) * w + x] * inv;
                }
            }
        }
        Ok(Tensor::from_op("avg_pool2d", vec![n, c, ho, wo], data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0f32; n * c * h * w];
            for p in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        gx[(p * h + y) * w + x] = g[(p * ho + y / k) * wo + x / k] * inv;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Inverted dropout. `p == 0` returns `self` unchanged.
    pub fn dropout(&self, p: f32, rng: &mut impl Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let mask = dropout_mask(self.numel(), p, rng);
        self.mul(&Tensor::new(mask, self.shape())?)
    }
}

/// Keep mask scaled by `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f32, rng: &mut impl Rng) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }).collect()
}

use crate::error::{invalid, Result, TensorError};
use crate::tensor::{numel, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of `permute(axes)`, the flat input index.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(shape);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; axes.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for ax in (0..axes.len()).rev() {
            counter[ax] += 1;
            cur += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    idx
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::DataLength {
                op: "reshape",
                len: self.numel(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let idx = permute_index(self.shape(), axes);
        let src = self.data();
        let data: Vec<f32> = idx.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&a| self.shape()[a]).collect();
        let n = self.numel();
        Ok(Tensor::from_op("permute", out_shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n];
            for (gi, &i) in g.iter().zip(&idx) {
                gx[i] = *gi;
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(invalid("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            if p.rank() != rank {
                return Err(TensorError::Rank {
                    op: "concat",
                    expected: rank,
                    shape: p.shape().to_vec(),
                });
            }
            for ax in (0..rank).filter(|&a| a != axis) {
                if p.shape()[ax] != first.shape()[ax] {
                    return Err(TensorError::AxisMismatch {
                        op: "concat",
                        axis: ax,
                        left: first.shape()[ax],
                        right: p.shape()[ax],
                    });
                }
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = blocks.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, &b) in parts.iter().zip(&blocks) {
                data.extend_from_slice(&p.data()[o * b..(o + 1) * b]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = row / inner;
        let inputs = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op("concat", shape, data, inputs, move |g| {
            let mut grads: Vec<Vec<f32>> = blocks.iter().map(|&b| Vec::with_capacity(outer * b)).collect();
            for o in 0..outer {
                let mut off = o * row;
                for (gp, &b) in grads.iter_mut().zip(&blocks) {
                    gp.extend_from_slice(&g[off..off + b]);
                    off += b;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }
}

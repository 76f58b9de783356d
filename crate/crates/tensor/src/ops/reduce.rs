use crate::error::{invalid, Result};
use crate::tensor::Tensor;

impl Tensor {
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&x| x as f64).sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![s as f32], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().map(|&x| x as f64).sum();
        Tensor::from_op("mean", vec![1], vec![(s / n as f64) as f32], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] / n as f32; n])]
        })
    }

    /// Sums over `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::from_op("sum_axis", out_shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }
}

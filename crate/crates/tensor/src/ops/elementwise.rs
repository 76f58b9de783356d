use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Broadcast {
                    op,
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = s;
        }
        s *= shape[i];
    }
    strides
}

/// How one operand of a broadcast maps onto the output: the output splits
/// into equal runs of `len` elements, each reading either the contiguous
/// source block at `offsets[r]` or repeating the single value there.
struct Runs {
    len: usize,
    contiguous: bool,
    offsets: Vec<usize>,
}

impl Runs {
    fn new(shape: &[usize], out: &[usize]) -> Runs {
        let rank = out.len();
        let mut padded = vec![1; rank - shape.len()];
        padded.extend_from_slice(shape);
        let strides = broadcast_strides(&padded, out);
        let mut split = rank;
        let mut mode = None;
        while split > 0 {
            let ax = split - 1;
            if out[ax] != 1 {
                let m = strides[ax] != 0;
                match mode {
                    None => mode = Some(m),
                    Some(prev) if prev != m => break,
                    _ => {}
                }
            }
            split -= 1;
        }
        let contiguous = mode.unwrap_or(true);
        let len: usize = out[split..].iter().product();
        let block = if contiguous { len } else { 1 };
        let outer_shape: Vec<usize> = padded[..split].to_vec();
        let offsets = if split == 0 {
            vec![0]
        } else {
            let idx = outer_index(&outer_shape, &out[..split]);
            idx.into_iter().map(|i| i * block).collect()
        };
        Runs { len, contiguous, offsets }
    }

    /// The operand laid out at full output size.
    fn expand(&self, src: &[f32]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len * self.offsets.len());
        for &o in &self.offsets {
            if self.contiguous {
                out.extend_from_slice(&src[o..o + self.len]);
            } else {
                out.extend(std::iter::repeat_n(src[o], self.len));
            }
        }
        out
    }

    /// Sums a full-size gradient back onto the operand.
    fn reduce(&self, grad: &[f32], n: usize) -> Vec<f32> {
        let mut out = vec![0.0; n];
        for (r, &o) in self.offsets.iter().enumerate() {
            let g = &grad[r * self.len..(r + 1) * self.len];
            if self.contiguous {
                for (d, &v) in out[o..o + self.len].iter_mut().zip(g) {
                    *d += v;
                }
            } else {
                out[o] += g.iter().sum::<f32>();
            }
        }
        out
    }
}

/// Flat source index for every element of `out` (same rank as `shape`).
fn outer_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let n = numel(out);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            cur += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * out[ax];
            counter[ax] = 0;
        }
    }
    idx
}

fn full<'a>(r: &Option<Runs>, t: &'a Tensor) -> Cow<'a, [f32]> {
    match r {
        Some(r) => Cow::Owned(r.expand(t.data())),
        None => Cow::Borrowed(t.data()),
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    let name = match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
    };
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let ra = (a.shape() != out_shape.as_slice()).then(|| Runs::new(a.shape(), &out_shape));
    let rb = (b.shape() != out_shape.as_slice()).then(|| Runs::new(b.shape(), &out_shape));
    let f = move |x: f32, y: f32| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    let data: Vec<f32> = {
        let (ad, bd) = (full(&ra, a), full(&rb, b));
        ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
    };
    let (ac, bc) = (a.clone(), b.clone());
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(name, out_shape, data, vec![a.clone(), b.clone()], move |g| {
        let back = |r: &Option<Runs>, local: Vec<f32>, n: usize| match r {
            Some(r) => r.reduce(&local, n),
            None => local,
        };
        let ga = ac.requires_grad().then(|| {
            let local: Vec<f32> = match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().zip(full(&rb, &bc).iter()).map(|(gi, y)| gi * y).collect(),
                BinOp::Div => g.iter().zip(full(&rb, &bc).iter()).map(|(gi, y)| gi / y).collect(),
            };
            back(&ra, local, na)
        });
        let gb = bc.requires_grad().then(|| {
            let local: Vec<f32> = match op {
                BinOp::Add => g.to_vec(),
                BinOp::Sub => g.iter().map(|gi| -gi).collect(),
                BinOp::Mul => g.iter().zip(full(&ra, &ac).iter()).map(|(gi, x)| gi * x).collect(),
                BinOp::Div => {
                    let (x, y) = (full(&ra, &ac), full(&rb, &bc));
                    g.iter().zip(x.iter()).zip(y.iter()).map(|((gi, x), y)| -gi * x / (y * y)).collect()
                }
            };
            back(&rb, local, nb)
        });
        vec![ga, gb]
    }))
}

/// Elementwise map with derivative expressed through input `x` and output `y`.
fn unary(
    t: &Tensor,
    name: &'static str,
    f: impl Fn(f32) -> f32,
    df: impl Fn(f32, f32) -> f32 + Send + Sync + 'static,
) -> Tensor {
    let data: Vec<f32> = t.data().iter().map(|&x| f(x)).collect();
    let x = t.clone();
    let y = data.clone();
    Tensor::from_op(name, t.shape().to_vec(), data, vec![t.clone()], move |g| {
        let gx = g
            .iter()
            .zip(x.data())
            .zip(&y)
            .map(|((gi, &xi), &yi)| gi * df(xi, yi))
            .collect();
        vec![Some(gx)]
    })
}

fn sigmoid_f(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Div)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        unary(self, "scale", |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        unary(self, "add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, "abs", f32::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        unary(self, "exp", f32::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, "ln", f32::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        unary(
            self,
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, "sigmoid", sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, "tanh", f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(&self) -> Tensor {
        unary(
            self,
            "silu",
            |x| x * sigmoid_f(x),
            |x, _| {
                let s = sigmoid_f(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        unary(
            self,
            "gelu",
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh()),
            |x, _| {
                let u = GELU_C * (x + 0.044_715 * x * x * x);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            },
        )
    }

    /// log(1 + e^x), evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        unary(
            self,
            "softplus",
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| sigmoid_f(x),
        )
    }
}

//! Parameter containers and the handful of layers shared by every network.

use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Anything that owns named trainable tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn zero_grad(&self) {
        self.visit("", &mut |_, t| t.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Sets `requires_grad` on every parameter.
    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut("", &mut |_, t| {
            *t = if trainable { t.to_param() } else { t.detach() };
        });
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

/// Fully connected layer, `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / din as f32).sqrt();
        Linear {
            weight: Tensor::randn(&[din, dout], std, rng).to_param(),
            bias: Tensor::zeros(&[dout]).to_param(),
        }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[din, dout]).to_param(),
            bias: Tensor::zeros(&[dout]).to_param(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, Some(&self.bias))
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Convolution weights `[Co, C, k, k]` and bias `[Co]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-initialised, same padding.
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self::with_gain(cin, cout, k, stride, 1.0, rng)
    }

    pub fn with_gain(cin: usize, cout: usize, k: usize, stride: usize, gain: f32, rng: &mut impl Rng) -> Self {
        let std = gain * (2.0 / (cin * k * k) as f32).sqrt();
        Conv2d {
            weight: Tensor::randn(&[cout, cin, k, k], std, rng).to_param(),
            bias: Tensor::zeros(&[cout]).to_param(),
            stride,
            padding: k / 2,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Layer normalisation with learned scale and shift along one axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[dim]).to_param(),
            beta: Tensor::zeros(&[dim]).to_param(),
            eps: 1e-5,
        }
    }

    /// Over the last axis.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layernorm(self.eps)?.mul(&self.gamma)?.add(&self.beta)
    }

    /// Over the channel axis of `[N,C,H,W]`.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.shape()[1];
        let g = self.gamma.reshape(&[1, c, 1, 1])?;
        let b = self.beta.reshape(&[1, c, 1, 1])?;
        x.layernorm_axis(1, self.eps)?.mul(&g)?.add(&b)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// A bare tensor is a module holding itself under `prefix`.
impl Module for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

//! Building blocks shared by the networks of every stage.

use rand::Rng;
use tokenfill_tensor::{Conv2d, LayerNorm, Linear, Module, Result, Tensor, TensorError};

/// Implements [`Module`] by visiting the listed fields under their names.
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl tokenfill_tensor::Module for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &tokenfill_tensor::Tensor)) {
                $(tokenfill_tensor::Module::visit(&self.$field, &tokenfill_tensor::module::join(prefix, stringify!($field)), f);)*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut tokenfill_tensor::Tensor)) {
                $(tokenfill_tensor::Module::visit_mut(&mut self.$field, &tokenfill_tensor::module::join(prefix, stringify!($field)), f);)*
            }
        }
    };
}
pub(crate) use impl_module;

pub(crate) fn act(x: &Tensor) -> Tensor {
    x.silu()
}

/// Residual block: LayerNorm → conv → LayerNorm → SiLU → conv, plus a skip
/// path (1×1 conv when the channel count changes).
#[derive(Debug, Clone)]
pub struct ResBlk {
    pub norm1: LayerNorm,
    pub conv1: Conv2d,
    pub norm2: LayerNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl_module!(ResBlk { norm1, conv1, norm2, conv2, skip });

impl ResBlk {
    pub fn new(cin: usize, cout: usize, gain: f32, rng: &mut impl Rng) -> Self {
        ResBlk {
            norm1: LayerNorm::new(cin),
            conv1: Conv2d::with_gain(cin, cout, 3, 1, gain, rng),
            norm2: LayerNorm::new(cout),
            // the residual branch starts small so deep stacks begin near identity
            conv2: Conv2d::with_gain(cout, cout, 3, 1, 0.1 * gain, rng),
            skip: (cin != cout).then(|| Conv2d::with_gain(cin, cout, 1, 1, 1.0, rng)),
        }
    }

    /// `conv` evaluates one of the block's convolutions; it lets masked
    /// variants reuse the same parameters.
    pub fn forward_with<E: From<TensorError>>(
        &self,
        x: &Tensor,
        conv: &dyn Fn(&Conv2d, &Tensor) -> std::result::Result<Tensor, E>,
    ) -> std::result::Result<Tensor, E> {
        let h = self.norm1.forward_channels(x)?;
        let h = conv(&self.conv1, &h)?;
        let h = act(&self.norm2.forward_channels(&h)?);
        let h = conv(&self.conv2, &h)?;
        let s = match &self.skip {
            Some(c) => conv(c, x)?,
            None => x.clone(),
        };
        Ok(s.add(&h)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &|c: &Conv2d, t: &Tensor| c.forward(t))
    }
}

/// Pre-norm multi-head self-attention over `[N, L, d]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl_module!(SelfAttention { norm, q, k, v, out });

impl SelfAttention {
    pub fn new(d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        let mut out = Linear::new(d, d, rng);
        out.weight = out.weight.scale(0.1).to_param();
        SelfAttention {
            norm: LayerNorm::new(d),
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            out,
            heads,
        }
    }

    fn split(&self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        let (n, l, d) = (s[0], s[1], s[2]);
        t.reshape(&[n, l, self.heads, d / self.heads])?.permute(&[0, 2, 1, 3])
    }

    /// Returns the residual update (without adding `x`).
    pub fn delta(&self, x: &Tensor, opts: &tokenfill_tensor::AttentionOptions) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let h = self.norm.forward(x)?;
        let q = self.split(&self.q.forward(&h)?)?;
        let k = self.split(&self.k.forward(&h)?)?;
        let v = self.split(&self.v.forward(&h)?)?;
        let a = Tensor::attention_with(&q, &k, &v, opts)?;
        let a = a.permute(&[0, 2, 1, 3])?.reshape(&s)?;
        self.out.forward(&a)
    }
}

/// `[N,C,H,W]` → `[N,H·W,C]`.
pub(crate) fn to_sequence(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    x.reshape(&[n, c, hw])?.permute(&[0, 2, 1])
}

/// `[N,H·W,C]` → `[N,C,H,W]`.
pub(crate) fn from_sequence(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    let (n, c) = (s[0], s[2]);
    x.permute(&[0, 2, 1])?.reshape(&[n, c, h, w])
}

/// Sum of parameter counts, for logging.
pub fn param_count(m: &dyn Module) -> usize {
    m.num_params()
}

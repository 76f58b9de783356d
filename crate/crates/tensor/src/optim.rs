use std::collections::HashMap;

use crate::module::Module;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
}

/// Adam state, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    moments: HashMap<String, Moments>,
}

impl OptState {
    pub fn steps(&self, name: &str) -> u32 {
        self.moments.get(name).map_or(0, |m| m.t)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: OptState::default(),
        }
    }

    pub fn with_lr(lr: f32) -> Self {
        Self::new(AdamConfig { lr, ..AdamConfig::default() })
    }

    /// One update of every parameter of `module` that has a gradient.
    /// Parameters are replaced by fresh leaves, which also clears their grads.
    pub fn step(&mut self, module: &mut dyn Module) {
        let cfg = self.config;
        let state = &mut self.state;
        module.visit_mut("", &mut |name, p| {
            if let Some(g) = p.grad() {
                let updated = adam_update(cfg, state.moments.entry(name).or_default(), p.data(), &g);
                *p = Tensor::leaf(updated, p.shape(), true).expect("same shape");
            } else if p.requires_grad() {
                log::warn!("adam: parameter `{name}` has no gradient, skipped");
            }
        });
    }
}

fn adam_update(cfg: AdamConfig, st: &mut Moments, x: &[f32], g: &[f32]) -> Vec<f32> {
    if st.m.len() != x.len() {
        st.m = vec![0.0; x.len()];
        st.v = vec![0.0; x.len()];
        st.t = 0;
    }
    st.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
    let step = cfg.lr / bc1;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let gi = g[i];
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * gi;
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * gi * gi;
        let denom = (st.v[i] / bc2).sqrt() + cfg.eps;
        out.push(x[i] - step * st.m[i] / denom);
    }
    out
}

/// Updates a single tensor in place of a module.
pub struct Single<'a>(pub &'a mut Tensor);

impl Module for Single<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(crate::module::join(prefix, "x"), self.0);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(crate::module::join(prefix, "x"), self.0);
    }
}

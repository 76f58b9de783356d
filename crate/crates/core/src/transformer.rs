//! Bidirectional transformer predicting token labels at MASK cells from the
//! visible cells of a token grid.

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfill_tensor::{dropout_mask, no_grad, Adam, AdamConfig, AttentionOptions, LayerNorm, Linear, Tensor};

use crate::error::{invalid, Result};
use crate::nn::{impl_module, SelfAttention};
use crate::seed::derive;
use crate::vq::{check_finite, Codebook, TokenGrid};

/// How training picks the cells to hide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Masking {
    /// Uniformly chosen cells.
    Uniform,
    /// One axis-aligned rectangle of roughly the drawn area.
    Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub k: usize,
    pub grid: (usize, usize),
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Applied to embeddings and attention weights during training.
    pub dropout: f32,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Range of the uniformly drawn masked fraction.
    pub mask_ratio: (f64, f64),
    pub masking: Masking,
    /// Reuse one mask per training grid for every step (overfit checks).
    pub fixed_masks: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attn: SelfAttention,
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_module!(Block { attn, norm, fc1, fc2 });

#[derive(Debug, Clone)]
pub struct BidirectionalTransformer {
    /// `[K + 1, n_z]`; the last row embeds MASK.
    pub embed: Tensor,
    pub proj: Linear,
    /// `[h·w, d]`.
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub grid: (usize, usize),
    pub dropout: f32,
    /// Restrict attention to earlier cells in raster order (ablation only).
    pub causal: bool,
}

impl_module!(BidirectionalTransformer { embed, proj, pos, blocks, norm, head });

impl BidirectionalTransformer {
    /// Token embeddings start from the codebook rows; the head starts at
    /// zero, so an untrained model predicts uniformly.
    pub fn new(cfg: &TransformerConfig, codebook: &Codebook, rng: &mut impl Rng) -> Result<Self> {
        if codebook.k() != cfg.k {
            return Err(invalid("transformer", format!("codebook has {} rows, config K = {}", codebook.k(), cfg.k)));
        }
        if cfg.d % cfg.heads != 0 || cfg.layers == 0 {
            return Err(invalid("transformer", format!("width {} with {} heads, {} layers", cfg.d, cfg.heads, cfg.layers)));
        }
        let n_z = codebook.n_z();
        let mask_row = Tensor::randn(&[1, n_z], 0.02, rng);
        let embed = Tensor::concat(&[&codebook.embeddings.detach(), &mask_row], 0)?.detach().to_param();
        let d = cfg.d;
        let blocks = (0..cfg.layers)
            .map(|_| {
                let mut fc2 = Linear::new(4 * d, d, rng);
                fc2.weight = fc2.weight.scale(0.1).to_param();
                Block {
                    attn: SelfAttention::new(d, cfg.heads, rng),
                    norm: LayerNorm::new(d),
                    fc1: Linear::new(d, 4 * d, rng),
                    fc2,
                }
            })
            .collect();
        Ok(BidirectionalTransformer {
            embed,
            proj: Linear::new(n_z, d, rng),
            pos: Tensor::randn(&[cfg.grid.0 * cfg.grid.1, d], 0.02, rng).to_param(),
            blocks,
            norm: LayerNorm::new(d),
            head: Linear::zeros(d, cfg.k),
            grid: cfg.grid,
            dropout: cfg.dropout,
            causal: false,
        })
    }

    pub fn k(&self) -> usize {
        self.head.weight.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Logits `[N, h·w, K]`. With `train` set, dropout draws from it.
    pub fn forward(&self, grids: &[&TokenGrid], mut train: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (n, l, k) = (grids.len(), self.len(), self.k());
        if n == 0 {
            return Err(invalid("predict", "no grids"));
        }
        let mut idx = Vec::with_capacity(n * l);
        for g in grids {
            if (g.height(), g.width()) != self.grid || g.k() != k {
                return Err(invalid(
                    "predict",
                    format!("grid {}×{} (K = {}) vs positional table {:?} (K = {k})", g.height(), g.width(), g.k(), self.grid),
                ));
            }
            idx.extend_from_slice(g.labels());
        }
        let e = Tensor::embedding(&self.embed, &idx)?.reshape(&[n, l, self.embed.shape()[1]])?;
        let mut h = self.proj.forward(&e)?.add(&self.pos)?;
        let p = self.dropout;
        if let Some(rng) = train.as_deref_mut() {
            h = h.dropout(p, rng)?;
        }
        let heads = self.blocks[0].attn.heads;
        for b in &self.blocks {
            let opts = AttentionOptions {
                causal: self.causal,
                dropout: match train.as_deref_mut() {
                    Some(rng) if p > 0.0 => Some(dropout_mask(n * heads * l * l, p, rng)),
                    _ => None,
                },
                ..AttentionOptions::default()
            };
            h = h.add(&b.attn.delta(&h, &opts)?)?;
            let m = b.fc2.forward(&b.fc1.forward(&b.norm.forward(&h)?)?.gelu())?;
            h = h.add(&m)?;
        }
        Ok(self.head.forward(&self.norm.forward(&h)?)?)
    }

    /// Inference logits `[h·w, K]` for one grid (no dropout, no graph).
    pub fn predict(&self, grid: &TokenGrid) -> Result<Tensor> {
        let out = no_grad(|| self.forward(&[grid], None))?;
        Ok(out.reshape(&[self.len(), self.k()])?)
    }
}

/// Mean NLL of the targets over each grid's MASK cells. `logits` is
/// `[N, h·w, K]`; `inputs` are the masked grids the model saw.
pub fn transformer_loss(logits: &Tensor, targets: &[&TokenGrid], inputs: &[&TokenGrid]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != targets.len() || targets.len() != inputs.len() {
        return Err(invalid("transformer_loss", format!("logits {s:?} for {} targets", targets.len())));
    }
    let (n, l, k) = (s[0], s[1], s[2]);
    let mut labels = Vec::with_capacity(n * l);
    let mut weights = Vec::with_capacity(n * l);
    for (t, m) in targets.iter().zip(inputs) {
        if t.len() != l || m.len() != l {
            return Err(invalid("transformer_loss", "grid extents differ from the logit field"));
        }
        for i in 0..l {
            let hidden = m.is_masked(i);
            labels.push(if hidden { t.get(i) } else { 0 });
            weights.push(hidden as u8 as f32);
        }
    }
    if weights.iter().all(|&w| w == 0.0) {
        warn!("transformer_loss: no MASK cells, no supervision signal");
    }
    Ok(logits.reshape(&[n * l, k])?.cross_entropy(&labels, &weights)?)
}

/// Hidden-cell flags for one training grid of `len` cells (`width` per row).
pub fn training_mask(len: usize, width: usize, cfg: &TransformerConfig, rng: &mut impl Rng) -> Vec<bool> {
    let (lo, hi) = cfg.mask_ratio;
    let r = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let count = ((r * len as f64).ceil() as usize).clamp(1, len);
    let mut hidden = vec![false; len];
    match cfg.masking {
        Masking::Uniform => {
            for i in sample(rng, len, count) {
                hidden[i] = true;
            }
        }
        Masking::Block => {
            let height = len / width;
            let bh = ((count as f64).sqrt().round() as usize).clamp(1, height);
            let bw = count.div_ceil(bh).clamp(1, width);
            let y0 = rng.random_range(0..=height - bh);
            let x0 = rng.random_range(0..=width - bw);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    hidden[y * width + x] = true;
                }
            }
        }
    }
    hidden
}

fn apply_mask(grid: &TokenGrid, hidden: &[bool]) -> TokenGrid {
    let mut g = grid.clone();
    for (i, &h) in hidden.iter().enumerate() {
        if h {
            g.set(i, g.mask_label());
        }
    }
    g
}

#[derive(Debug, Clone, Default)]
pub struct TransformerReport {
    pub loss: Vec<f32>,
}

/// Trains on full-image token grids, hiding a random subset of cells in
/// each and predicting them.
pub fn train_transformer(
    grids: &[TokenGrid],
    codebook: &Codebook,
    cfg: &TransformerConfig,
) -> Result<(BidirectionalTransformer, TransformerReport)> {
    if grids.len() < cfg.batch || cfg.batch == 0 {
        return Err(invalid("train_transformer", format!("{} grids for batch {}", grids.len(), cfg.batch)));
    }
    let (lo, hi) = cfg.mask_ratio;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(invalid("train_transformer", format!("mask ratio range {lo}..{hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = BidirectionalTransformer::new(cfg, codebook, &mut rng)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let (len, width) = (cfg.grid.0 * cfg.grid.1, cfg.grid.1);
    let mut report = TransformerReport::default();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = if cfg.fixed_masks && grids.len() == cfg.batch {
            (0..cfg.batch).collect()
        } else {
            sample(&mut rng, grids.len(), cfg.batch).into_vec()
        };
        let targets: Vec<&TokenGrid> = idx.iter().map(|&i| &grids[i]).collect();
        let inputs: Vec<TokenGrid> = idx
            .iter()
            .map(|&i| {
                let mask_step = if cfg.fixed_masks { 0 } else { step as u64 + 1 };
                let mut mrng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[mask_step, i as u64]));
                apply_mask(&grids[i], &training_mask(len, width, cfg, &mut mrng))
            })
            .collect();
        let inputs: Vec<&TokenGrid> = inputs.iter().collect();
        let logits = model.forward(&inputs, Some(&mut rng))?;
        let loss = transformer_loss(&logits, &targets, &inputs)?;
        check_finite("transformer loss", loss.item())?;
        loss.backward()?;
        opt.step(&mut model);
        report.loss.push(loss.item());
        if step % 100 == 0 {
            debug!("transformer step {step}: loss {:.4}", loss.item());
        }
    }
    info!(
        "transformer: {} steps, final loss {:.4}",
        cfg.steps,
        report.loss.last().copied().unwrap_or(f32::NAN)
    );
    Ok((model, report))
}

/// Mean NLL over MASK cells of fixed `(target, masked input)` pairs, without
/// dropout.
pub fn evaluate_transformer(model: &BidirectionalTransformer, targets: &[&TokenGrid], inputs: &[&TokenGrid]) -> Result<f32> {
    let logits = no_grad(|| model.forward(inputs, None))?;
    Ok(transformer_loss(&logits, targets, inputs)?.item())
}

//! The restrictive encoder E: partial image → token-label logits at the
//! token-grid cells that the α-thresholded mask keeps visible.

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfill_tensor::{no_grad, Adam, AdamConfig, AttentionOptions, Conv2d, LayerNorm, Tensor};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::masks::{build_pyramid, generate_mask, ConvPlan, MaskGrid, MaskKind, MaskPyramid};
use crate::nn::{act, from_sequence, impl_module, to_sequence, ResBlk, SelfAttention};
use crate::seed::derive;
use crate::vq::{check_finite, TokenGrid, VqModel};

/// How convolutions treat the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Restrictive partial convolutions; the mask only changes when
    /// downsampling.
    Restrictive,
    /// Ordinary convolutions over the zero-filled image (ablation).
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub k: usize,
    /// Width of each stage; stage `i` runs at resolution `H / 2^i` and the
    /// token grid is `H / 2^stages`.
    pub widths: Vec<usize>,
    pub blocks: usize,
    pub heads: usize,
    pub alpha: f64,
    pub mode: ConvMode,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Training masks are drawn from these kinds in turn.
    pub masks: Vec<MaskKind>,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub blocks: Vec<ResBlk>,
    pub attn: Option<SelfAttention>,
}

impl_module!(EncoderStage { blocks, attn });

#[derive(Debug, Clone)]
pub struct RestrictiveEncoder {
    pub stem: Conv2d,
    pub stages: Vec<EncoderStage>,
    pub token_attn: SelfAttention,
    pub head_norm: LayerNorm,
    pub head: Conv2d,
    pub alpha: f64,
    pub mode: ConvMode,
}

impl_module!(RestrictiveEncoder { stem, stages, token_attn, head_norm, head });

/// Logits `[N, K, h, w]` (zero at hidden cells) and each input's mask pyramid.
pub struct EncoderOutput {
    pub logits: Tensor,
    pub pyramids: Vec<MaskPyramid>,
}

impl EncoderOutput {
    pub fn token_masks(&self) -> Vec<MaskGrid> {
        self.pyramids.iter().map(|p| p.token_mask().clone()).collect()
    }
}

struct LevelPlans {
    k3: ConvPlan,
    k1: ConvPlan,
    key_mask: Option<Vec<bool>>,
}

impl RestrictiveEncoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.widths.is_empty() {
            return Err(invalid("encoder", "need at least one stage"));
        }
        let s = cfg.stages();
        let w = &cfg.widths;
        // window sums are rescaled by 1/sum(M) ≈ 1/k², which the gain undoes
        let gain = 9.0;
        let stages = (0..s)
            .map(|i| EncoderStage {
                blocks: (0..cfg.blocks.max(1))
                    .map(|b| {
                        let cin = if b == 0 && i > 0 { w[i - 1] } else { w[i] };
                        ResBlk::new(cin, w[i], gain, rng)
                    })
                    .collect(),
                // attention at the two coarsest resolutions: the last stage and the token grid
                attn: (i + 1 == s).then(|| SelfAttention::new(w[i], cfg.heads, rng)),
            })
            .collect();
        let last = w[s - 1];
        Ok(RestrictiveEncoder {
            stem: Conv2d::with_gain(3, w[0], 3, 1, gain, rng),
            stages,
            token_attn: SelfAttention::new(last, cfg.heads, rng),
            head_norm: LayerNorm::new(last),
            head: Conv2d::with_gain(last, cfg.k, 1, 1, 0.5, rng),
            alpha: cfg.alpha,
            mode: cfg.mode,
        })
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn k(&self) -> usize {
        self.head.weight.shape()[0]
    }

    fn plans(&self, masks: &[MaskGrid]) -> Result<LevelPlans> {
        let extents = masks[0].extents();
        Ok(match self.mode {
            ConvMode::Restrictive => LevelPlans {
                k3: ConvPlan::restrictive(masks, 3, self.alpha)?,
                k1: ConvPlan::restrictive(masks, 1, self.alpha)?,
                key_mask: Some(masks.iter().flat_map(|m| m.values().iter().map(|&v| v == 1)).collect()),
            },
            ConvMode::Plain => LevelPlans {
                k3: ConvPlan::plain(extents, 3, 1, 1)?,
                k1: ConvPlan::plain(extents, 1, 1, 0)?,
                key_mask: None,
            },
        })
    }

    fn attend(attn: &SelfAttention, h: &Tensor, key_mask: &Option<Vec<bool>>) -> Result<Tensor> {
        let (hh, ww) = (h.shape()[2], h.shape()[3]);
        let seq = to_sequence(h)?;
        let opts = AttentionOptions {
            key_mask: key_mask.clone(),
            ..AttentionOptions::default()
        };
        Ok(from_sequence(&seq.add(&attn.delta(&seq, &opts)?)?, hh, ww)?)
    }

    /// Masked 2× average pool: each coarse cell averages its visible
    /// pixels and is kept only if the downsampled mask marks it visible.
    fn downsample(&self, h: &Tensor, fine: &[MaskGrid], coarse: &[MaskGrid]) -> Result<Tensor> {
        if self.mode == ConvMode::Plain {
            return Ok(h.avg_pool2d(2)?);
        }
        let m = MaskGrid::batch_tensor(fine)?;
        let pooled = h.mul(&m)?.avg_pool2d(2)?;
        let mut scale = Vec::new();
        for (f, c) in fine.iter().zip(coarse) {
            for cy in 0..c.height() {
                for cx in 0..c.width() {
                    let n: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| f.get(2 * cy + dy, 2 * cx + dx) as u32)
                        .sum();
                    scale.push(if c.get(cy, cx) && n > 0 { 4.0 / n as f32 } else { 0.0 });
                }
            }
        }
        let shape = [fine.len(), 1, coarse[0].height(), coarse[0].width()];
        Ok(pooled.mul(&Tensor::new(scale, &shape)?)?)
    }

    /// `x` is `[N, 3, H, W]`; it is multiplied by the masks before use.
    pub fn forward(&self, x: &Tensor, masks: &[MaskGrid]) -> Result<EncoderOutput> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || masks.len() != s[0] {
            return Err(invalid("encode_partial", format!("input {s:?} with {} masks", masks.len())));
        }
        let pyramids = masks
            .iter()
            .map(|m| {
                m.expect_extents("encode_partial", (s[2], s[3]))?;
                build_pyramid(m, self.alpha, self.stages())
            })
            .collect::<Result<Vec<_>>>()?;
        let level = |l: usize| -> Vec<MaskGrid> { pyramids.iter().map(|p| p.levels[l].clone()).collect() };

        let m0 = level(0);
        let x = x.mul(&MaskGrid::batch_tensor(&m0)?)?;
        let mut plans = self.plans(&m0)?;
        let mut h = plans.k3.apply(&x, &self.stem.weight, Some(&self.stem.bias))?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let next = level(i);
                h = self.downsample(&h, &level(i - 1), &next)?;
                plans = self.plans(&next)?;
            }
            let p = &plans;
            let conv = |c: &Conv2d, t: &Tensor| {
                let plan = if c.kernel() == 1 { &p.k1 } else { &p.k3 };
                plan.apply(t, &c.weight, Some(&c.bias))
            };
            for blk in &stage.blocks {
                h = blk.forward_with(&h, &conv)?;
            }
            if let Some(attn) = &stage.attn {
                h = Self::attend(attn, &h, &plans.key_mask)?;
            }
        }
        let s = self.stages();
        let tokens = level(s);
        h = self.downsample(&h, &level(s - 1), &tokens)?;
        plans = self.plans(&tokens)?;
        h = Self::attend(&self.token_attn, &h, &plans.key_mask)?;
        let h = act(&self.head_norm.forward_channels(&h)?);
        let logits = plans.k1.apply(&h, &self.head.weight, Some(&self.head.bias))?;
        Ok(EncoderOutput { logits, pyramids })
    }
}

/// Single-image convenience: logits `[K, h, w]` and the mask pyramid.
pub fn encode_partial(enc: &RestrictiveEncoder, image: &Image, mask: &MaskGrid) -> Result<(Tensor, MaskPyramid)> {
    let out = no_grad(|| enc.forward(&image.to_tensor(), std::slice::from_ref(mask)))?;
    let s = out.logits.shape().to_vec();
    Ok((out.logits.reshape(&s[1..])?, out.pyramids.into_iter().next().expect("one pyramid")))
}

/// `[N, K, h, w]` → `[N·h·w, K]`.
pub(crate) fn logits_rows(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    Ok(logits.reshape(&[n, k, hw])?.permute(&[0, 2, 1])?.reshape(&[n * hw, k])?)
}

/// Mean negative log-likelihood of the target labels over cells where the
/// token mask is visible. Returns 0 (with a warning) when no cell is.
pub fn encoder_loss(logits: &Tensor, targets: &[&TokenGrid], token_masks: &[MaskGrid]) -> Result<Tensor> {
    let rows = logits_rows(logits)?;
    if targets.len() != token_masks.len() || rows.shape()[0] != targets.len() * token_masks[0].values().len() {
        return Err(invalid("encoder_loss", "logits, targets and token masks disagree in extent"));
    }
    let mut labels = Vec::with_capacity(rows.shape()[0]);
    let mut weights = Vec::with_capacity(rows.shape()[0]);
    for (t, m) in targets.iter().zip(token_masks) {
        if t.len() != m.values().len() {
            return Err(invalid("encoder_loss", "target grid and token mask extents differ"));
        }
        for (i, &v) in m.values().iter().enumerate() {
            // hidden cells carry no supervision; their label only needs to be in range
            labels.push(if v == 1 { t.get(i) } else { 0 });
            weights.push(v as f32);
        }
    }
    if weights.iter().all(|&w| w == 0.0) {
        warn!("encoder_loss: no visible token cells, no supervision signal");
    }
    Ok(rows.cross_entropy(&labels, &weights)?)
}

/// Per-cell argmax of `[K, h, w]` (or `[1, K, h, w]`) logits.
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (k, hw) = (s[s.len() - 3], s[s.len() - 2] * s[s.len() - 1]);
    let d = logits.data();
    (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + i] > d[best * hw + i] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Token grid the rest of the pipeline starts from: encoder argmax at cells
/// the token mask keeps, MASK elsewhere.
pub fn visible_grid(logits: &Tensor, token_mask: &MaskGrid, k: usize) -> Result<TokenGrid> {
    let labels = argmax_labels(logits)
        .into_iter()
        .zip(token_mask.values())
        .map(|(l, &v)| if v == 1 { l } else { k })
        .collect();
    TokenGrid::new(token_mask.height(), token_mask.width(), k, labels)
}

/// Whether a visible cell touches a hidden one (8-neighbourhood).
pub fn boundary_cells(token_mask: &MaskGrid) -> Vec<bool> {
    let (h, w) = token_mask.extents();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !token_mask.get(y, x) {
                continue;
            }
            'n: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 && !token_mask.get(ny as usize, nx as usize) {
                        out[y * w + x] = true;
                        break 'n;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EncoderEval {
    /// Mean NLL over the scored cells.
    pub loss: f64,
    pub accuracy: f64,
    pub cells: usize,
    pub boundary_accuracy: f64,
    pub boundary_cells: usize,
}

/// Scores the encoder on fixed `(image, mask)` pairs. `score_masks`, when
/// given, restricts scoring to its visible token cells (each must be a subset
/// of the encoder's own token mask); `full_view` runs the encoder on the
/// complete image and scores the cells of the real mask (diagnostic upper
/// bound).
pub fn evaluate_encoder(
    enc: &RestrictiveEncoder,
    images: &[&Image],
    targets: &[&TokenGrid],
    masks: &[MaskGrid],
    score_masks: Option<&[MaskGrid]>,
    full_view: bool,
) -> Result<EncoderEval> {
    let mut nll = 0.0f64;
    let (mut hits, mut cells, mut bhits, mut bcells) = (0usize, 0usize, 0usize, 0usize);
    for (i, chunk) in images.chunks(16).enumerate() {
        let range = i * 16..i * 16 + chunk.len();
        let batch_masks = &masks[range.clone()];
        let x = Image::batch(chunk)?;
        let run_masks: Vec<MaskGrid> = if full_view {
            batch_masks.iter().map(|m| MaskGrid::ones(m.height(), m.width())).collect()
        } else {
            batch_masks.to_vec()
        };
        let out = no_grad(|| enc.forward(&x, &run_masks))?;
        let own: Vec<MaskGrid> = if full_view {
            batch_masks
                .iter()
                .map(|m| build_pyramid(m, enc.alpha, enc.stages()).map(|p| p.token_mask().clone()))
                .collect::<Result<_>>()?
        } else {
            out.token_masks()
        };
        let k = enc.k();
        let s = out.logits.shape().to_vec();
        let hw = s[2] * s[3];
        for (b, j) in range.enumerate() {
            let scored = match score_masks {
                Some(sm) => &sm[j],
                None => &own[b],
            };
            let boundary = boundary_cells(&own[b]);
            let lg = &out.logits.data()[b * k * hw..(b + 1) * k * hw];
            for c in 0..hw {
                if scored.values()[c] == 0 {
                    continue;
                }
                let col: Vec<f64> = (0..k).map(|q| lg[q * hw + c] as f64).collect();
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                let target = targets[j].get(c);
                nll += lse - col[target];
                let pred = (0..k).fold(0, |best, q| if col[q] > col[best] { q } else { best });
                let hit = (pred == target) as usize;
                hits += hit;
                cells += 1;
                if boundary[c] {
                    bhits += hit;
                    bcells += 1;
                }
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EncoderEval {
        loss: if cells == 0 { 0.0 } else { nll / cells as f64 },
        accuracy: ratio(hits, cells),
        cells,
        boundary_accuracy: ratio(bhits, bcells),
        boundary_cells: bcells,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EncoderReport {
    pub loss: Vec<f32>,
    /// Visible-token accuracy of each training batch.
    pub accuracy: Vec<f32>,
}

/// Mask for training step `step`, batch slot `slot`.
pub fn training_mask(kinds: &[MaskKind], extents: (usize, usize), seed: u64, step: usize, slot: usize) -> MaskGrid {
    let kind = kinds[(step + slot) % kinds.len()];
    generate_mask(kind, extents, derive(seed, &[step as u64, slot as u64]))
}

/// Minimises the encoder loss over random masks; `targets[i]` are the VQ
/// labels of `images[i]`.
pub fn train_encoder(images: &[Image], targets: &[TokenGrid], cfg: &EncoderConfig) -> Result<(RestrictiveEncoder, EncoderReport)> {
    if images.len() < cfg.batch || images.len() != targets.len() {
        return Err(invalid("train_encoder", format!("{} images, {} targets, batch {}", images.len(), targets.len(), cfg.batch)));
    }
    if cfg.masks.is_empty() {
        return Err(invalid("train_encoder", "no training mask kinds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc = RestrictiveEncoder::new(cfg, &mut rng)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let extents = (images[0].height, images[0].width);
    let mask_seed = derive(cfg.seed, &[0x6d61736b]);
    let mut report = EncoderReport::default();
    for step in 0..cfg.steps {
        let idx = sample(&mut rng, images.len(), cfg.batch).into_vec();
        let batch: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
        let tgt: Vec<&TokenGrid> = idx.iter().map(|&i| &targets[i]).collect();
        let masks: Vec<MaskGrid> = (0..cfg.batch).map(|j| training_mask(&cfg.masks, extents, mask_seed, step, j)).collect();
        let out = enc.forward(&Image::batch(&batch)?, &masks)?;
        let tm = out.token_masks();
        let loss = encoder_loss(&out.logits, &tgt, &tm)?;
        check_finite("encoder loss", loss.item())?;
        loss.backward()?;
        opt.step(&mut enc);
        report.loss.push(loss.item());
        report.accuracy.push(batch_accuracy(&out.logits, &tgt, &tm));
        if step % 100 == 0 {
            debug!("encoder step {step}: loss {:.4} acc {:.3}", loss.item(), report.accuracy[step]);
        }
    }
    info!(
        "encoder ({:?}, alpha {}): {} steps, final loss {:.4}",
        cfg.mode,
        cfg.alpha,
        cfg.steps,
        report.loss.last().copied().unwrap_or(f32::NAN)
    );
    Ok((enc, report))
}

fn batch_accuracy(logits: &Tensor, targets: &[&TokenGrid], token_masks: &[MaskGrid]) -> f32 {
    let s = logits.shape();
    let per = s[1] * s[2] * s[3];
    let (mut hits, mut n) = (0usize, 0usize);
    for (b, (t, m)) in targets.iter().zip(token_masks).enumerate() {
        let view = Tensor::new(logits.data()[b * per..(b + 1) * per].to_vec(), &s[1..]).expect("slice of logits");
        for (i, (&pred, &v)) in argmax_labels(&view).iter().zip(m.values()).enumerate() {
            if v == 1 {
                n += 1;
                hits += (pred == t.get(i)) as usize;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f32 / n as f32
    }
}

/// VQ labels of every image, batched.
pub fn vq_targets(vq: &VqModel, images: &[Image]) -> Result<Vec<TokenGrid>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        out.extend(vq.encode_batch(&chunk.iter().collect::<Vec<_>>())?);
    }
    Ok(out)
}

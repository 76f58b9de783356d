//! Final stage: partial-convolution feature encoder, token/feature
//! composition, generator and discriminator, and the decoder objective.

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfill_tensor::{grad, no_grad, Adam, AdamConfig, Conv2d, LayerNorm, Linear, Module, Tensor};

use crate::encoder::training_mask;
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::masks::{build_pyramid, ConvPlan, MaskGrid, MaskKind};
use crate::nn::{act, impl_module, ResBlk};
use crate::seed::derive;
use crate::vq::{check_finite, lookup_batch, TokenGrid, VqModel};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub n_z: usize,
    /// Partial encoder widths at full resolution and after each stride-2
    /// stage; the generator mirrors them.
    pub widths: Vec<usize>,
    pub disc_widths: Vec<usize>,
    pub alpha: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub disc_lr: f32,
    pub adv_weight: f32,
    pub r1_weight: f32,
    pub perceptual_weight: f32,
    pub masks: Vec<MaskKind>,
    pub seed: u64,
}

impl DecoderConfig {
    pub fn stages(&self) -> usize {
        self.widths.len() - 1
    }
}

/// E_prt: partial convolutions down to token resolution.
#[derive(Debug, Clone)]
pub struct PartialEncoder {
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub proj: Conv2d,
}

impl_module!(PartialEncoder { stem, down, proj });

impl PartialEncoder {
    fn new(widths: &[usize], n_z: usize, rng: &mut impl Rng) -> Self {
        // rescaling by 1/sum(M) divides by up to k², which the gain undoes
        PartialEncoder {
            stem: Conv2d::with_gain(3, widths[0], 3, 1, 9.0, rng),
            down: widths.windows(2).map(|w| Conv2d::with_gain(w[0], w[1], 3, 2, 9.0, rng)).collect(),
            proj: Conv2d::with_gain(widths[widths.len() - 1], n_z, 1, 1, 0.5, rng),
        }
    }

    /// `[N, n_z, h, w]` features of `x ⊙ M`, plus the propagated masks.
    pub fn forward(&self, x: &Tensor, masks: &[MaskGrid]) -> Result<(Tensor, Vec<MaskGrid>)> {
        let (plan, mut m) = ConvPlan::partial(masks, 3, 1, 1)?;
        let mut h = act(&plan.apply(x, &self.stem.weight, Some(&self.stem.bias))?);
        for c in &self.down {
            let (plan, next) = ConvPlan::partial(&m, 3, 2, 1)?;
            h = act(&plan.apply(&h, &c.weight, Some(&c.bias))?);
            m = next;
        }
        let (plan, next) = ConvPlan::partial(&m, 1, 1, 0)?;
        Ok((plan.apply(&h, &self.proj.weight, Some(&self.proj.bias))?, next))
    }
}

/// G: token-resolution features to an image.
#[derive(Debug, Clone)]
pub struct Generator {
    pub stem: Conv2d,
    pub res: ResBlk,
    pub up: Vec<Conv2d>,
    pub blocks: Vec<ResBlk>,
    pub norm: LayerNorm,
    pub out: Conv2d,
}

impl_module!(Generator { stem, res, up, blocks, norm, out });

impl Generator {
    fn new(widths: &[usize], n_z: usize, rng: &mut impl Rng) -> Self {
        let s = widths.len() - 1;
        let up: Vec<Conv2d> = (0..s).map(|i| Conv2d::new(widths[s - i], widths[s - i - 1], 3, 1, rng)).collect();
        let blocks = (0..s).map(|i| ResBlk::new(widths[s - i - 1], widths[s - i - 1], 1.0, rng)).collect();
        Generator {
            stem: Conv2d::new(n_z, widths[s], 3, 1, rng),
            res: ResBlk::new(widths[s], widths[s], 1.0, rng),
            up,
            blocks,
            norm: LayerNorm::new(widths[0]),
            out: Conv2d::with_gain(widths[0], 3, 3, 1, 0.5, rng),
        }
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let mut h = self.res.forward(&self.stem.forward(h)?)?;
        for (up, blk) in self.up.iter().zip(&self.blocks) {
            h = blk.forward(&up.forward(&h.upsample_nearest(2)?)?)?;
        }
        Ok(self.out.forward(&act(&self.norm.forward_channels(&h)?))?.tanh())
    }
}

/// Strided convolutions with leaky ReLU, then a linear map to one logit.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}

impl_module!(Discriminator { convs, head });

impl Discriminator {
    pub fn new(widths: &[usize], extent: usize, rng: &mut impl Rng) -> Result<Self> {
        if widths.is_empty() || extent % (1 << widths.len()) != 0 {
            return Err(invalid("discriminator", format!("extent {extent} with {} stride-2 stages", widths.len())));
        }
        let mut cin = 3;
        let convs = widths
            .iter()
            .map(|&w| {
                let c = Conv2d::new(cin, w, 3, 2, rng);
                cin = w;
                c
            })
            .collect();
        let side = extent >> widths.len();
        Ok(Discriminator {
            convs,
            head: Linear::new(cin * side * side, 1, rng),
        })
    }

    /// Logits `[N]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.leaky_relu(0.2);
        }
        let n = h.shape()[0];
        let flat = h.reshape(&[n, h.numel() / n])?;
        Ok(self.head.forward(&flat)?.reshape(&[n])?)
    }
}

/// E_prt and G; the discriminator is trained alongside but kept apart.
#[derive(Debug, Clone)]
pub struct ComposerNet {
    pub partial: PartialEncoder,
    pub generator: Generator,
    pub alpha: f64,
}

impl_module!(ComposerNet { partial, generator });

/// `(1 − M̂)(Z + P)/2 + M̂·P` for `[.., n_z, h, w]` features and a
/// broadcastable `[.., 1, h, w]` token mask.
pub fn compose(z: &Tensor, partial: &Tensor, token_mask: &Tensor) -> Result<Tensor> {
    if z.shape() != partial.shape() {
        return Err(invalid("compose", format!("codes {:?} vs partial features {:?}", z.shape(), partial.shape())));
    }
    let r = z.rank();
    let ms = token_mask.shape();
    if r < 2 || ms.len() != r || ms[r - 2..] != z.shape()[r - 2..] {
        return Err(invalid("compose", format!("token mask {ms:?} for features {:?}", z.shape())));
    }
    let hidden = token_mask.scale(-1.0).add_scalar(1.0);
    let h1 = z.add(partial)?.scale(0.5).mul(&hidden)?;
    Ok(h1.add(&partial.mul(token_mask)?)?)
}

impl ComposerNet {
    pub fn new(cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.widths.len() < 2 {
            return Err(invalid("decoder", "need at least one downsampling stage"));
        }
        Ok(ComposerNet {
            partial: PartialEncoder::new(&cfg.widths, cfg.n_z, rng),
            generator: Generator::new(&cfg.widths, cfg.n_z, rng),
            alpha: cfg.alpha,
        })
    }

    pub fn stages(&self) -> usize {
        self.partial.down.len()
    }

    pub fn n_z(&self) -> usize {
        self.partial.proj.weight.shape()[0]
    }

    /// `G(compose(Z, E_prt(X ⊙ M), M̂))` for a batch: `x [N,3,H,W]`,
    /// `z [N,n_z,h,w]`.
    pub fn decode(&self, x: &Tensor, masks: &[MaskGrid], z: &Tensor) -> Result<Tensor> {
        let token_masks = masks
            .iter()
            .map(|m| build_pyramid(m, self.alpha, self.stages()).map(|p| p.token_mask().clone()))
            .collect::<Result<Vec<_>>>()?;
        let (p, _) = self.partial.forward(x, masks)?;
        if p.shape() != z.shape() {
            return Err(invalid("decode", format!("codes {:?} vs partial features {:?}", z.shape(), p.shape())));
        }
        let h = compose(z, &p, &MaskGrid::batch_tensor(&token_masks)?)?;
        self.generator.forward(&h)
    }

    /// Single-image inference.
    pub fn decode_image(&self, image: &Image, mask: &MaskGrid, z: &Tensor) -> Result<Image> {
        let s = z.shape().to_vec();
        let z = if s.len() == 3 { z.reshape(&[1, s[0], s[1], s[2]])? } else { z.clone() };
        let out = no_grad(|| self.decode(&image.to_tensor(), std::slice::from_ref(mask), &z))?;
        Image::from_tensor(&out)
    }
}

/// Non-saturating generator loss `mean softplus(−D(x̂))`.
pub fn generator_loss(fake_logits: &Tensor) -> Tensor {
    fake_logits.neg().softplus().mean()
}

/// `mean softplus(−D(x)) + mean softplus(D(x̂))`.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok(real_logits.neg().softplus().mean().add(&fake_logits.softplus().mean())?)
}

/// Logits beyond this magnitude are clamped before the loss (and logged).
const LOGIT_LIMIT: f32 = 50.0;

fn clamp_logits(t: &Tensor) -> Tensor {
    if t.data().iter().all(|v| v.abs() <= LOGIT_LIMIT) {
        return t.clone();
    }
    warn!("discriminator logits beyond ±{LOGIT_LIMIT}, clamped");
    let limit = Tensor::new(
        t.data().iter().map(|&v| if v.abs() > LOGIT_LIMIT { LOGIT_LIMIT / v.abs() } else { 1.0 }).collect(),
        t.shape(),
    )
    .expect("same shape");
    t.mul(&limit).expect("same shape")
}

/// R1 value `mean_b ‖∇ₓD(x_b)‖²` and its gradient field.
pub fn r1_penalty(disc: &Discriminator, real: &Tensor) -> Result<(f32, Tensor)> {
    let x = real.detach().to_param();
    let out = disc.forward(&x)?.sum();
    let g = grad(&out, &[&x])?.remove(0);
    let n = real.shape()[0] as f64;
    let value = (g.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / n) as f32;
    Ok((value, Tensor::new(g, real.shape())?))
}

/// A scalar whose parameter gradient approximates that of R1:
/// `(2/N) ⟨∇θ ∇ₓD, v⟩` with `v = ∇ₓD` held fixed, the directional
/// derivative taken by central differences.
pub fn r1_surrogate(disc: &Discriminator, real: &Tensor, field: &Tensor, eps: f32) -> Result<Tensor> {
    let real = real.detach();
    let step = field.scale(eps);
    let plus = disc.forward(&real.add(&step)?)?.sum();
    let minus = disc.forward(&real.sub(&step)?)?.sum();
    let n = real.shape()[0] as f32;
    Ok(plus.sub(&minus)?.scale(2.0 / (n * 2.0 * eps)))
}

/// Substitute perceptual term: L1 pixel distance plus mean squared
/// difference of E_VQ features. `vq` should be frozen.
pub fn perceptual_loss(vq: &VqModel, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let l1 = fake.sub(real)?.abs().mean();
    let target = no_grad(|| vq.features(real))?;
    let feats = vq.features(fake)?;
    Ok(l1.add(&feats.sub(&target)?.square().mean())?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecoderLosses {
    pub generator: f32,
    pub discriminator: f32,
    pub r1: f32,
    pub perceptual: f32,
    /// `adv + r1_weight·R1 + perceptual_weight·L_P`.
    pub decode: f32,
}

/// Loss values for one real/generated batch, without any update.
pub fn decoder_losses(
    disc: &Discriminator,
    vq: &VqModel,
    real: &Tensor,
    fake: &Tensor,
    cfg: &DecoderConfig,
) -> Result<DecoderLosses> {
    let (r1, _) = r1_penalty(disc, real)?;
    no_grad(|| {
        let fl = clamp_logits(&disc.forward(fake)?);
        let rl = clamp_logits(&disc.forward(real)?);
        let g = generator_loss(&fl).item();
        let d = discriminator_loss(&rl, &fl)?.item();
        let p = perceptual_loss(vq, real, fake)?.item();
        Ok(DecoderLosses {
            generator: g,
            discriminator: d,
            r1,
            perceptual: p,
            decode: cfg.adv_weight * g + cfg.r1_weight * r1 + cfg.perceptual_weight * p,
        })
    })
}

/// Mean squared error over pixels whose mask value equals `visible`.
pub fn region_mse(a: &Tensor, b: &Tensor, masks: &[MaskGrid], visible: bool) -> f64 {
    let (s, hw) = (a.shape(), masks[0].values().len());
    let c = s[1];
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, m) in masks.iter().enumerate() {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for (p, &v) in m.values().iter().enumerate() {
                if (v == 1) == visible {
                    let d = a.data()[base + p] as f64 - b.data()[base + p] as f64;
                    sum += d * d;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct DecoderReport {
    pub losses: Vec<DecoderLosses>,
    /// Masked-region MSE of each training batch.
    pub masked_mse: Vec<f32>,
    pub visible_mse: Vec<f32>,
    /// Fraction of real and generated samples the discriminator classified
    /// correctly in each step.
    pub disc_accuracy: Vec<f32>,
}

/// Alternating adversarial training with codes `Z` from the ground-truth
/// token grids (`grids[i]` for `images[i]`).
pub fn train_decoder(
    images: &[Image],
    grids: &[TokenGrid],
    vq: &VqModel,
    cfg: &DecoderConfig,
) -> Result<(ComposerNet, Discriminator, DecoderReport)> {
    if images.len() < cfg.batch || images.len() != grids.len() || cfg.masks.is_empty() {
        return Err(invalid("train_decoder", format!("{} images, {} grids, batch {}", images.len(), grids.len(), cfg.batch)));
    }
    if vq.codebook.n_z() != cfg.n_z || vq.stages() != cfg.stages() {
        return Err(invalid("train_decoder", "VQ model and decoder config disagree on n_z or stages"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = ComposerNet::new(cfg, &mut rng)?;
    let mut disc = Discriminator::new(&cfg.disc_widths, images[0].height, &mut rng)?;
    let mut frozen = vq.clone();
    frozen.set_trainable(false);
    let mut opt_g = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: 0.5,
        beta2: 0.99,
        ..AdamConfig::default()
    });
    let mut opt_d = Adam::new(AdamConfig {
        lr: cfg.disc_lr,
        beta1: 0.5,
        beta2: 0.99,
        ..AdamConfig::default()
    });
    let extents = (images[0].height, images[0].width);
    let mask_seed = derive(cfg.seed, &[0x6465636f]);
    let mut report = DecoderReport::default();
    for step in 0..cfg.steps {
        let idx = sample(&mut rng, images.len(), cfg.batch).into_vec();
        let batch: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
        let codes: Vec<&TokenGrid> = idx.iter().map(|&i| &grids[i]).collect();
        let masks: Vec<MaskGrid> = (0..cfg.batch).map(|j| training_mask(&cfg.masks, extents, mask_seed, step, j)).collect();
        let real = Image::batch(&batch)?;
        let z = lookup_batch(&codes, &frozen.codebook, None)?;

        // generator
        let fake = net.decode(&real, &masks, &z)?;
        let fake_logits = clamp_logits(&disc.forward(&fake)?);
        let lg = generator_loss(&fake_logits);
        let lp = perceptual_loss(&frozen, &real, &fake)?;
        let loss_g = lg.scale(cfg.adv_weight).add(&lp.scale(cfg.perceptual_weight))?;
        check_finite("generator loss", loss_g.item())?;
        loss_g.backward()?;
        opt_g.step(&mut net);
        disc.zero_grad();

        // discriminator
        let fake = fake.detach();
        let real_logits = clamp_logits(&disc.forward(&real)?);
        let fake_logits = clamp_logits(&disc.forward(&fake)?);
        let ld = discriminator_loss(&real_logits, &fake_logits)?;
        let (r1, field) = r1_penalty(&disc, &real)?;
        let loss_d = ld.add(&r1_surrogate(&disc, &real, &field, 1e-2)?.scale(cfg.r1_weight))?;
        check_finite("discriminator loss", ld.item())?;
        check_finite("R1", r1)?;
        loss_d.backward()?;
        opt_d.step(&mut disc);

        let correct = real_logits.data().iter().filter(|&&v| v > 0.0).count()
            + fake_logits.data().iter().filter(|&&v| v < 0.0).count();
        report.disc_accuracy.push(correct as f32 / (2 * cfg.batch) as f32);
        report.masked_mse.push(region_mse(&fake, &real, &masks, false) as f32);
        report.visible_mse.push(region_mse(&fake, &real, &masks, true) as f32);
        let (g, d, p) = (lg.item(), ld.item(), lp.item());
        report.losses.push(DecoderLosses {
            generator: g,
            discriminator: d,
            r1,
            perceptual: p,
            decode: cfg.adv_weight * g + cfg.r1_weight * r1 + cfg.perceptual_weight * p,
        });
        if step % 100 == 0 {
            debug!(
                "decoder step {step}: L_G {g:.4} L_D {d:.4} R1 {r1:.4} L_P {p:.4} masked MSE {:.4}",
                report.masked_mse[step]
            );
        }
    }
    info!(
        "decoder: {} steps, final masked MSE {:.4}",
        cfg.steps,
        report.masked_mse.last().copied().unwrap_or(f32::NAN)
    );
    Ok((net, disc, report))
}

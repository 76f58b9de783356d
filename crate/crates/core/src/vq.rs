//! Discrete codebook, token grids and the small VQ autoencoder that supplies
//! ground-truth labels and the feature space used by losses and metrics.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenfill_tensor::{no_grad, Adam, AdamConfig, Conv2d, Tensor};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::masks::MaskGrid;
use crate::nn::{act, impl_module, ResBlk};

/// `K` learned embeddings of `n_z` channels. Label `K` is the MASK sentinel.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub embeddings: Tensor,
}

impl_module!(Codebook { embeddings });

impl Codebook {
    pub fn new(k: usize, n_z: usize, rng: &mut impl Rng) -> Self {
        Codebook {
            embeddings: Tensor::uniform(&[k, n_z], -1.0 / k as f32, 1.0 / k as f32, rng).to_param(),
        }
    }

    pub fn from_tensor(embeddings: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 {
            return Err(invalid("codebook", format!("expected [K, n_z], got {:?}", embeddings.shape())));
        }
        Ok(Codebook { embeddings })
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn n_z(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn mask_label(&self) -> usize {
        self.k()
    }

    pub fn row(&self, label: usize) -> &[f32] {
        let n = self.n_z();
        &self.embeddings.data()[label * n..(label + 1) * n]
    }

    /// Nearest code to `v` by squared distance; ties go to the lowest label.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.k() {
            let d: f64 = self.row(k).iter().zip(v).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }
}

/// Labels on the token grid; `K` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    k: usize,
    labels: Vec<usize>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, k: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(invalid("token grid", format!("{} labels for {height}x{width}", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > k) {
            return Err(invalid("token grid", format!("label {l} outside [0, {k}]")));
        }
        Ok(TokenGrid { height, width, k, labels })
    }

    pub fn all_masked(height: usize, width: usize, k: usize) -> Self {
        TokenGrid {
            height,
            width,
            k,
            labels: vec![k; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mask_label(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn set(&mut self, i: usize, label: usize) {
        assert!(label <= self.k, "label {label} outside [0, {}]", self.k);
        self.labels[i] = label;
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.labels[i] == self.k
    }

    /// Visible set D, as flat indices.
    pub fn visible(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| !self.is_masked(i)).collect()
    }

    /// Missing set D̄, as flat indices.
    pub fn missing(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn missing_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == self.k).count()
    }

    /// Replaces cells hidden by `token_mask` with MASK.
    pub fn masked_by(&self, token_mask: &MaskGrid) -> Result<Self> {
        if token_mask.extents() != (self.height, self.width) {
            return Err(Error::MaskExtent {
                op: "token grid",
                expected: (self.height, self.width),
                found: token_mask.extents(),
            });
        }
        let mut g = self.clone();
        for (i, &v) in token_mask.values().iter().enumerate() {
            if v == 0 {
                g.labels[i] = self.k;
            }
        }
        Ok(g)
    }

    /// `h w` header, then one line per row; MASK is written as `M`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.height, self.width);
        for row in self.labels.chunks(self.width) {
            let cells: Vec<String> =
                row.iter().map(|&l| if l == self.k { "M".to_string() } else { l.to_string() }).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, k: usize) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut dim = |what: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| invalid("token grid", format!("missing or bad {what}")))
        };
        let (h, w) = (dim("height")?, dim("width")?);
        let labels = tokens
            .map(|t| match t {
                "M" => Ok(k),
                _ => t
                    .parse::<usize>()
                    .ok()
                    .filter(|&l| l < k)
                    .ok_or_else(|| invalid("token grid", format!("bad label `{t}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        TokenGrid::new(h, w, k, labels)
    }
}

fn feature_dims(features: &Tensor, cb: &Codebook) -> Result<(usize, usize, usize)> {
    let s = features.shape();
    let (n, c, h, w) = match s {
        [c, h, w] => (1, *c, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => return Err(invalid("quantize", format!("expected [n_z,h,w] features, got {s:?}"))),
    };
    if c != cb.n_z() {
        return Err(invalid("quantize", format!("channel extent {c} != n_z {}", cb.n_z())));
    }
    Ok((n, h, w))
}

/// Nearest-code labels for every cell of `[N, n_z, h, w]` features.
pub fn quantize_batch(features: &Tensor, cb: &Codebook) -> Result<Vec<TokenGrid>> {
    let (n, h, w) = feature_dims(features, cb)?;
    let nz = cb.n_z();
    let hw = h * w;
    let data = features.data();
    let mut out = Vec::with_capacity(n);
    let mut v = vec![0.0f32; nz];
    for b in 0..n {
        let base = b * nz * hw;
        let labels = (0..hw)
            .map(|i| {
                for (c, slot) in v.iter_mut().enumerate() {
                    *slot = data[base + c * hw + i];
                }
                cb.nearest(&v)
            })
            .collect();
        out.push(TokenGrid::new(h, w, cb.k(), labels)?);
    }
    Ok(out)
}

/// Nearest-code labels for `[n_z, h, w]` features.
pub fn quantize(features: &Tensor, cb: &Codebook) -> Result<TokenGrid> {
    let mut grids = quantize_batch(features, cb)?;
    if grids.len() != 1 {
        return Err(invalid("quantize", "expected a single feature map"));
    }
    Ok(grids.remove(0))
}

/// `[N, n_z, h, w]` code features of the grids; differentiable with respect
/// to the embeddings. MASK cells read `mask_row` when given, else are rejected.
pub fn lookup_batch(grids: &[&TokenGrid], cb: &Codebook, mask_row: Option<&Tensor>) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| invalid("lookup", "no grids"))?;
    let (h, w) = (first.height, first.width);
    let table = match mask_row {
        Some(m) => Tensor::concat(&[&cb.embeddings, &m.reshape(&[1, cb.n_z()])?], 0)?,
        None => cb.embeddings.clone(),
    };
    let mut idx = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if (g.height, g.width) != (h, w) || g.k != cb.k() {
            return Err(invalid("lookup", "grids differ in extents or codebook size"));
        }
        if mask_row.is_none() && g.labels.contains(&g.k) {
            return Err(invalid("lookup", "MASK label without a mask embedding"));
        }
        idx.extend_from_slice(&g.labels);
    }
    let rows = Tensor::embedding(&table, &idx)?;
    Ok(rows.reshape(&[grids.len(), h * w, cb.n_z()])?.permute(&[0, 2, 1])?.reshape(&[grids.len(), cb.n_z(), h, w])?)
}

/// `[n_z, h, w]` code features of one grid.
pub fn lookup(grid: &TokenGrid, cb: &Codebook) -> Result<Tensor> {
    let z = lookup_batch(&[grid], cb, None)?;
    Ok(z.reshape(&[cb.n_z(), grid.height, grid.width])?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqConfig {
    pub k: usize,
    pub n_z: usize,
    /// Channel width at full resolution and after each 2× downsampling; the
    /// number of stages is `widths.len() - 1`.
    pub widths: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub commitment: f32,
    pub seed: u64,
}

impl VqConfig {
    pub fn stages(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct VqEncoder {
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub res: ResBlk,
    pub proj: Conv2d,
}

impl_module!(VqEncoder { stem, down, res, proj });

#[derive(Debug, Clone)]
pub struct VqDecoder {
    pub proj: Conv2d,
    pub res: ResBlk,
    pub up: Vec<Conv2d>,
    pub out: Conv2d,
}

impl_module!(VqDecoder { proj, res, up, out });

/// E_VQ, G_VQ and the codebook.
#[derive(Debug, Clone)]
pub struct VqModel {
    pub encoder: VqEncoder,
    pub decoder: VqDecoder,
    pub codebook: Codebook,
}

impl_module!(VqModel { encoder, decoder, codebook });

/// Outputs of one straight-through forward pass.
pub struct VqForward {
    pub z_e: Tensor,
    pub z_q: Tensor,
    pub recon: Tensor,
    pub grids: Vec<TokenGrid>,
}

impl VqModel {
    pub fn new(cfg: &VqConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.widths.len() < 2 {
            return Err(invalid("vq", "need at least one downsampling stage"));
        }
        let w = &cfg.widths;
        let s = cfg.stages();
        let encoder = VqEncoder {
            stem: Conv2d::new(3, w[0], 3, 1, rng),
            down: (0..s).map(|i| Conv2d::new(w[i], w[i + 1], 3, 2, rng)).collect(),
            res: ResBlk::new(w[s], w[s], 1.0, rng),
            proj: Conv2d::with_gain(w[s], cfg.n_z, 1, 1, 0.5, rng),
        };
        let decoder = VqDecoder {
            proj: Conv2d::new(cfg.n_z, w[s], 1, 1, rng),
            res: ResBlk::new(w[s], w[s], 1.0, rng),
            up: (0..s).rev().map(|i| Conv2d::new(w[i + 1], w[i], 3, 1, rng)).collect(),
            out: Conv2d::with_gain(w[0], 3, 3, 1, 0.5, rng),
        };
        Ok(VqModel {
            encoder,
            decoder,
            codebook: Codebook::new(cfg.k, cfg.n_z, rng),
        })
    }

    pub fn stages(&self) -> usize {
        self.encoder.down.len()
    }

    /// Pre-quantisation features `[N, n_z, h, w]` of `[N, 3, H, W]` images.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let e = &self.encoder;
        let mut h = act(&e.stem.forward(x)?);
        for d in &e.down {
            h = act(&d.forward(&h)?);
        }
        let h = e.res.forward(&h)?;
        Ok(e.proj.forward(&h)?)
    }

    /// Generator G_VQ: `[N, n_z, h, w]` → images in [−1, 1].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let d = &self.decoder;
        let mut h = d.res.forward(&act(&d.proj.forward(z)?))?;
        for u in &d.up {
            h = act(&u.forward(&h.upsample_nearest(2)?)?);
        }
        Ok(d.out.forward(&h)?.tanh())
    }

    /// Encodes, quantises with a straight-through estimator and decodes.
    pub fn forward(&self, x: &Tensor) -> Result<VqForward> {
        let z_e = self.features(x)?;
        let grids = quantize_batch(&z_e, &self.codebook)?;
        let z_q = lookup_batch(&grids.iter().collect::<Vec<_>>(), &self.codebook, None)?;
        let z_st = straight_through(&z_e, &z_q)?;
        let recon = self.decode(&z_st)?;
        Ok(VqForward { z_e, z_q, recon, grids })
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<TokenGrid>> {
        no_grad(|| quantize_batch(&self.features(&Image::batch(images)?)?, &self.codebook))
    }

    /// Code features of the quantised labels, `Z = lookup(E_VQ(X))`.
    pub fn quantized_features(&self, images: &[&Image]) -> Result<Tensor> {
        no_grad(|| {
            let grids = self.encode_batch(images)?;
            lookup_batch(&grids.iter().collect::<Vec<_>>(), &self.codebook, None)
        })
    }
}

/// `z_e + stopgrad(z_q − z_e)`: forward value `z_q`, gradient passed to `z_e`
/// unchanged.
pub fn straight_through(z_e: &Tensor, z_q: &Tensor) -> Result<Tensor> {
    // z_e − z_e is exactly zero, so the forward value is z_q bit for bit
    let zero = z_e.sub(&z_e.detach())?;
    Ok(z_q.detach().add(&zero)?)
}

/// Labels of a complete image.
pub fn encode_full(image: &Image, model: &VqModel) -> Result<TokenGrid> {
    Ok(model.encode_batch(&[image])?.remove(0))
}

#[derive(Debug, Clone, Default)]
pub struct VqReport {
    /// Reconstruction MSE of every step.
    pub mse: Vec<f32>,
    pub final_mse: f32,
    /// Fraction of codes used when encoding the training set.
    pub usage: f32,
}

impl VqReport {
    /// Mean MSE over consecutive windows of `window` steps.
    pub fn window_means(&self, window: usize) -> Vec<f32> {
        self.mse.chunks(window).map(|c| c.iter().sum::<f32>() / c.len() as f32).collect()
    }
}

pub(crate) fn check_finite(what: &str, v: f32) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Numerical(format!("{what} is {v}")));
    }
    Ok(())
}

/// Fraction of the codebook hit when encoding `images`.
pub fn codebook_usage(model: &VqModel, images: &[Image]) -> Result<f32> {
    let mut used = vec![false; model.codebook.k()];
    for chunk in images.chunks(32) {
        for g in model.encode_batch(&chunk.iter().collect::<Vec<_>>())? {
            for &l in g.labels() {
                used[l] = true;
            }
        }
    }
    Ok(used.iter().filter(|&&u| u).count() as f32 / used.len() as f32)
}

/// Trains the VQ autoencoder with reconstruction L2 + codebook + commitment
/// losses. The codebook is initialised from encoder outputs of the first
/// batch.
pub fn train_vq(images: &[Image], cfg: &VqConfig) -> Result<(VqModel, VqReport)> {
    if images.len() < cfg.batch {
        return Err(invalid(
            "train_vq",
            format!("{} images is fewer than one batch of {}", images.len(), cfg.batch),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = VqModel::new(cfg, &mut rng)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut report = VqReport::default();
    for step in 0..cfg.steps {
        let idx = sample(&mut rng, images.len(), cfg.batch);
        let batch: Vec<&Image> = idx.iter().map(|i| &images[i]).collect();
        let x = Image::batch(&batch)?;
        if step == 0 {
            init_codebook(&mut model, &x, &mut rng)?;
        }
        let f = model.forward(&x)?;
        let mse = f.recon.sub(&x)?.square().mean();
        let codebook = f.z_e.detach().sub(&f.z_q)?.square().mean();
        let commit = f.z_e.sub(&f.z_q.detach())?.square().mean().scale(cfg.commitment);
        let loss = mse.add(&codebook)?.add(&commit)?;
        check_finite("vq loss", loss.item())?;
        loss.backward()?;
        opt.step(&mut model);
        report.mse.push(mse.item());
        if step % 100 == 0 {
            debug!("vq step {step}: mse {:.4} loss {:.4}", mse.item(), loss.item());
        }
    }
    report.final_mse = report.mse.last().copied().unwrap_or(f32::NAN);
    report.usage = codebook_usage(&model, images)?;
    info!(
        "vq: {} steps, final mse {:.4}, codebook usage {:.2}",
        cfg.steps, report.final_mse, report.usage
    );
    Ok((model, report))
}

fn init_codebook(model: &mut VqModel, x: &Tensor, rng: &mut impl Rng) -> Result<()> {
    let z = no_grad(|| model.features(x))?;
    let s = z.shape();
    let (n, nz, hw) = (s[0], s[1], s[2] * s[3]);
    let k = model.codebook.k();
    let total = n * hw;
    let cells: Vec<usize> = if total >= k {
        sample(rng, total, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..total)).collect()
    };
    let mut rows = Vec::with_capacity(k * nz);
    for cell in cells {
        let (b, i) = (cell / hw, cell % hw);
        for c in 0..nz {
            rows.push(z.data()[(b * nz + c) * hw + i] + rng.random_range(-1e-3..1e-3));
        }
    }
    model.codebook.embeddings = Tensor::leaf(rows, &[k, nz], true)?;
    Ok(())
}

//! Stage orchestration: corpora, checkpoints, inference, evaluation,
//! ablations and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tokenfill_tensor::{Checkpoint, Module, TensorError};

use crate::compose::{train_decoder, ComposerNet, Discriminator};
use crate::config::PipelineConfig;
use crate::dataset::make_dataset;
use crate::encoder::{encode_partial, evaluate_encoder, train_encoder, training_mask, visible_grid, vq_targets, RestrictiveEncoder};
use crate::error::{with_path, Error, Result};
use crate::image::Image;
use crate::masks::{build_pyramid, generate_mask, MaskGrid, MaskKind};
use crate::metrics::{diversity, fid_proxy, mean_std};
use crate::sampler::{sample_all, SampleSchedule, StepTrace};
use crate::seed::derive;
use crate::transformer::{train_transformer, BidirectionalTransformer};
use crate::vq::{lookup, train_vq, TokenGrid, VqModel};

pub const VQ_FILE: &str = "vq.mgrd";
pub const ENCODER_FILE: &str = "encoder.mgrd";
pub const TRANSFORMER_FILE: &str = "transformer.mgrd";
pub const DECODER_FILE: &str = "decoder.mgrd";

/// Declared in every evaluation report so the numbers are never read as
/// LPIPS or Inception-FID values.
pub const DIVERSITY_DISTANCE: &str = "mean pairwise RMS distance of E_VQ features over hidden token cells (LPIPS substitute)";
pub const FID_DISTANCE: &str = "Frechet distance of Gaussian fits to pooled E_VQ features (Inception-FID substitute)";

/// Training corpus of the configuration.
pub fn corpus(cfg: &PipelineConfig) -> Result<Vec<Image>> {
    Ok(make_dataset(cfg.dataset, cfg.dataset_count, cfg.extent, cfg.dataset_seed)?
        .into_iter()
        .map(|s| s.image)
        .collect())
}

/// Held-out evaluation images, drawn from the evaluation seed.
pub fn eval_corpus(cfg: &PipelineConfig) -> Result<Vec<Image>> {
    Ok(make_dataset(cfg.dataset, cfg.eval_images, cfg.extent, derive(cfg.eval_seed, &[0]))?
        .into_iter()
        .map(|s| s.image)
        .collect())
}

/// One mask of `kind` per evaluation image.
pub fn eval_masks(cfg: &PipelineConfig, kind: MaskKind, count: usize) -> Vec<MaskGrid> {
    (0..count)
        .map(|i| generate_mask(kind, (cfg.extent, cfg.extent), derive(cfg.eval_seed, &[1, i as u64])))
        .collect()
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("mask_{index:04}.pgm"))
}

/// Writes `count` masks of `kind` as PGM files.
pub fn write_masks(dir: &Path, kind: MaskKind, count: usize, extent: usize, seed: u64) -> Result<Vec<PathBuf>> {
    with_path(dir, fs::create_dir_all(dir))?;
    (0..count)
        .map(|i| {
            let path = mask_path(dir, i);
            generate_mask(kind, (extent, extent), derive(seed, &[i as u64])).write_pgm(&path)?;
            Ok(path)
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&with_path(path, fs::read(path))?))
}

fn mismatch(file: &Path, e: TensorError) -> Error {
    Error::CheckpointMismatch(format!("{}: {e}", file.display()))
}

/// Saves `(namespace, module)` pairs into one checkpoint file and returns
/// its hash.
pub fn save_modules(path: &Path, modules: &[(&str, &dyn Module)]) -> Result<String> {
    let mut ck = Checkpoint::new();
    for (ns, m) in modules {
        ck.insert_module(ns, *m);
    }
    let bytes = ck.to_bytes();
    if let Some(parent) = path.parent() {
        with_path(parent, fs::create_dir_all(parent))?;
    }
    with_path(path, fs::write(path, &bytes))?;
    Ok(sha256_hex(&bytes))
}

/// Loads `module` from `namespace`, rejecting missing, surplus or
/// differently shaped entries.
fn load_namespace(ck: &Checkpoint, file: &Path, namespace: &str, module: &mut dyn Module) -> Result<()> {
    ck.load_module(namespace, module).map_err(|e| mismatch(file, e))?;
    let mut expected = 0;
    module.visit("", &mut |_, _| expected += 1);
    let prefix = format!("{namespace}/");
    let stored = ck.entries.iter().filter(|e| e.name.starts_with(&prefix)).count();
    if stored != expected {
        return Err(Error::CheckpointMismatch(format!(
            "{}: `{namespace}` holds {stored} tensors, the configured model has {expected}",
            file.display()
        )));
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::CheckpointMismatch(format!("{} is missing", path.display())));
    }
    Checkpoint::load(path).map_err(|e| mismatch(path, e))
}

fn shape_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn load_vq(dir: &Path, cfg: &PipelineConfig) -> Result<VqModel> {
    let path = dir.join(VQ_FILE);
    let mut vq = VqModel::new(&cfg.vq(), &mut shape_rng())?;
    load_namespace(&read_checkpoint(&path)?, &path, "vq", &mut vq)?;
    Ok(vq)
}

pub fn load_encoder(dir: &Path, cfg: &PipelineConfig) -> Result<RestrictiveEncoder> {
    let path = dir.join(ENCODER_FILE);
    let mut enc = RestrictiveEncoder::new(&cfg.encoder(), &mut shape_rng())?;
    load_namespace(&read_checkpoint(&path)?, &path, "encoder", &mut enc)?;
    Ok(enc)
}

pub fn load_transformer(dir: &Path, cfg: &PipelineConfig, vq: &VqModel) -> Result<BidirectionalTransformer> {
    let path = dir.join(TRANSFORMER_FILE);
    let mut tr = BidirectionalTransformer::new(&cfg.transformer(), &vq.codebook, &mut shape_rng())?;
    load_namespace(&read_checkpoint(&path)?, &path, "transformer", &mut tr)?;
    Ok(tr)
}

pub fn load_decoder(dir: &Path, cfg: &PipelineConfig) -> Result<(ComposerNet, Discriminator)> {
    let path = dir.join(DECODER_FILE);
    let ck = read_checkpoint(&path)?;
    let dcfg = cfg.decoder();
    let mut rng = shape_rng();
    let mut net = ComposerNet::new(&dcfg, &mut rng)?;
    let mut disc = Discriminator::new(&dcfg.disc_widths, cfg.extent, &mut rng)?;
    load_namespace(&ck, &path, "decoder", &mut net)?;
    load_namespace(&ck, &path, "disc", &mut disc)?;
    Ok((net, disc))
}

/// Result of one training stage: the checkpoint written and summary
/// numbers for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct StageOutcome {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub metrics: BTreeMap<String, f64>,
}

fn tail_mean(values: &[f32], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(|&v| v as f64).sum::<f64>() / tail.len() as f64
}

pub fn train_vq_stage(cfg: &PipelineConfig, images: &[Image], dir: &Path) -> Result<StageOutcome> {
    let (vq, report) = train_vq(images, &cfg.vq())?;
    let checkpoint = dir.join(VQ_FILE);
    let hash = save_modules(&checkpoint, &[("vq", &vq)])?;
    let metrics = BTreeMap::from([
        ("final_mse".to_string(), report.final_mse as f64),
        ("window_mse".to_string(), tail_mean(&report.mse, 100)),
        ("codebook_usage".to_string(), report.usage as f64),
    ]);
    Ok(StageOutcome { checkpoint, hash, metrics })
}

pub fn train_encoder_stage(cfg: &PipelineConfig, images: &[Image], dir: &Path) -> Result<StageOutcome> {
    let vq = load_vq(dir, cfg)?;
    let targets = vq_targets(&vq, images)?;
    let (enc, report) = train_encoder(images, &targets, &cfg.encoder())?;
    let checkpoint = dir.join(ENCODER_FILE);
    let hash = save_modules(&checkpoint, &[("encoder", &enc)])?;
    let metrics = BTreeMap::from([
        ("final_loss".to_string(), tail_mean(&report.loss, 50)),
        ("final_accuracy".to_string(), tail_mean(&report.accuracy, 50)),
    ]);
    Ok(StageOutcome { checkpoint, hash, metrics })
}

pub fn train_transformer_stage(cfg: &PipelineConfig, images: &[Image], dir: &Path) -> Result<StageOutcome> {
    let vq = load_vq(dir, cfg)?;
    let grids = vq_targets(&vq, images)?;
    let (tr, report) = train_transformer(&grids, &vq.codebook, &cfg.transformer())?;
    let checkpoint = dir.join(TRANSFORMER_FILE);
    let hash = save_modules(&checkpoint, &[("transformer", &tr)])?;
    let metrics = BTreeMap::from([("final_loss".to_string(), tail_mean(&report.loss, 50))]);
    Ok(StageOutcome { checkpoint, hash, metrics })
}

pub fn train_decoder_stage(cfg: &PipelineConfig, images: &[Image], dir: &Path) -> Result<StageOutcome> {
    let vq = load_vq(dir, cfg)?;
    let grids = vq_targets(&vq, images)?;
    let (net, disc, report) = train_decoder(images, &grids, &vq, &cfg.decoder())?;
    let checkpoint = dir.join(DECODER_FILE);
    let hash = save_modules(&checkpoint, &[("decoder", &net), ("disc", &disc)])?;
    let first = report.masked_mse.iter().take(100).map(|&v| v as f64).sum::<f64>() / report.masked_mse.len().clamp(1, 100) as f64;
    let metrics = BTreeMap::from([
        ("first_masked_mse".to_string(), first),
        ("final_masked_mse".to_string(), tail_mean(&report.masked_mse, 100)),
        ("final_visible_mse".to_string(), tail_mean(&report.visible_mse, 100)),
        ("final_decode_loss".to_string(), report.losses.last().map_or(f64::NAN, |l| l.decode as f64)),
    ]);
    Ok(StageOutcome { checkpoint, hash, metrics })
}

/// Sampler settings of one inference run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingOptions {
    pub steps: usize,
    pub temperature: f64,
    pub anneal: f64,
}

impl SamplingOptions {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        SamplingOptions {
            steps: cfg.sample_steps,
            temperature: cfg.temperature,
            anneal: cfg.anneal,
        }
    }
}

/// One completed sample with its token-level intermediates.
#[derive(Debug, Clone)]
pub struct Completion {
    pub image: Image,
    /// Encoder labels at visible cells, MASK elsewhere.
    pub visible: TokenGrid,
    pub tokens: TokenGrid,
    pub token_mask: MaskGrid,
    pub steps: Vec<StepTrace>,
}

/// All trained stages, loaded together.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub vq: VqModel,
    pub encoder: RestrictiveEncoder,
    pub transformer: BidirectionalTransformer,
    pub decoder: ComposerNet,
}

impl Pipeline {
    pub fn load(dir: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let vq = load_vq(dir, cfg)?;
        let encoder = load_encoder(dir, cfg)?;
        let transformer = load_transformer(dir, cfg, &vq)?;
        let (decoder, _) = load_decoder(dir, cfg)?;
        Ok(Pipeline {
            config: cfg.clone(),
            vq,
            encoder,
            transformer,
            decoder,
        })
    }

    /// Draws `n` completions of `image` under `mask`; sample `s` samples
    /// with seed `derive(seed, [s])`. When every token cell is visible the
    /// token stage is skipped and all samples coincide.
    pub fn inpaint(&self, image: &Image, mask: &MaskGrid, opts: &SamplingOptions, n: usize, seed: u64) -> Result<Vec<Completion>> {
        let e = self.config.extent;
        if (image.height, image.width) != (e, e) {
            return Err(Error::Config(format!(
                "image is {}x{}, the pipeline is configured for {e}x{e}",
                image.height, image.width
            )));
        }
        if mask.extents() != (e, e) {
            return Err(Error::MaskExtent {
                op: "inpaint",
                expected: (e, e),
                found: mask.extents(),
            });
        }
        let masked = image.masked(mask)?;
        let (logits, pyramid) = encode_partial(&self.encoder, &masked, mask)?;
        let token_mask = pyramid.token_mask().clone();
        let visible = visible_grid(&logits, &token_mask, self.vq.codebook.k())?;
        let missing = visible.missing_count();
        let mut out = Vec::with_capacity(n);
        for s in 0..n {
            let (tokens, steps) = if missing == 0 {
                (visible.clone(), Vec::new())
            } else {
                let schedule = SampleSchedule::new(missing, opts.steps, opts.temperature, opts.anneal)?;
                sample_all(&visible, &self.transformer, &schedule, derive(seed, &[s as u64]))?
            };
            let z = lookup(&tokens, &self.vq.codebook)?;
            let completed = self.decoder.decode_image(&masked, mask, &z)?;
            if completed.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("decoder produced non-finite pixels".into()));
            }
            out.push(Completion {
                image: completed,
                visible: visible.clone(),
                tokens,
                token_mask: token_mask.clone(),
                steps,
            });
        }
        Ok(out)
    }

    /// Inpaints every `(image, mask)` pair `n` times and scores the set.
    /// Image `i` samples with seed `derive(seed, [i])`.
    pub fn evaluate(&self, images: &[Image], masks: &[MaskGrid], setting: &str, opts: &SamplingOptions, n: usize, seed: u64) -> Result<EvalReport> {
        if n < 2 {
            return Err(Error::Config(format!("diversity needs at least 2 samples per image, got {n}")));
        }
        if images.len() != masks.len() || images.is_empty() {
            return Err(Error::Config(format!("{} images for {} masks", images.len(), masks.len())));
        }
        let mut per_image = Vec::with_capacity(images.len());
        let mut generated = Vec::with_capacity(images.len() * n);
        let (mut vis_sq, mut vis_n, mut hid_sq, mut hid_n) = (0.0f64, 0usize, 0.0f64, 0usize);
        for (i, (image, mask)) in images.iter().zip(masks).enumerate() {
            let comps = self.inpaint(image, mask, opts, n, derive(seed, &[i as u64]))?;
            let (mut v_sq, mut v_n, mut h_sq, mut h_n) = (0.0f64, 0usize, 0.0f64, 0usize);
            for c in &comps {
                let (a, b, d, e) = region_sums(&c.image, image, mask);
                v_sq += a;
                v_n += b;
                h_sq += d;
                h_n += e;
            }
            let samples: Vec<Image> = comps.iter().map(|c| c.image.clone()).collect();
            let div = diversity(&self.vq, &samples, &comps[0].token_mask)?;
            per_image.push(ImageEval {
                index: i,
                masked_fraction: mask.masked_fraction(),
                missing_tokens: comps[0].visible.missing_count(),
                visible_mse: ratio(v_sq, v_n),
                masked_mse: ratio(h_sq, h_n),
                diversity: div,
                samples: samples.iter().map(|s| sha256_hex(&s.to_raster().encode())).collect(),
            });
            vis_sq += v_sq;
            vis_n += v_n;
            hid_sq += h_sq;
            hid_n += h_n;
            generated.extend(samples);
        }
        let divs: Vec<f64> = per_image.iter().map(|p| p.diversity).collect();
        let (diversity_mean, diversity_std) = mean_std(&divs);
        let fid = fid_proxy(&self.vq, images, &generated)?;
        Ok(EvalReport {
            diversity_distance: DIVERSITY_DISTANCE.to_string(),
            fid_distance: FID_DISTANCE.to_string(),
            setting: setting.to_string(),
            images: images.len(),
            samples_per_image: n,
            sampling: *opts,
            seed,
            visible_mse: ratio(vis_sq, vis_n),
            masked_mse: ratio(hid_sq, hid_n),
            fid_proxy: fid,
            diversity_mean,
            diversity_std,
            per_image,
        })
    }
}

fn ratio(a: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        a / n as f64
    }
}

/// Squared-error sums and counts over visible and hidden pixels (all
/// channels).
fn region_sums(a: &Image, b: &Image, mask: &MaskGrid) -> (f64, usize, f64, usize) {
    let hw = a.height * a.width;
    let (mut vs, mut vn, mut hs, mut hn) = (0.0, 0, 0.0, 0);
    for c in 0..3 {
        for (p, &m) in mask.values().iter().enumerate() {
            let d = (a.data[c * hw + p] - b.data[c * hw + p]) as f64;
            if m == 1 {
                vs += d * d;
                vn += 1;
            } else {
                hs += d * d;
                hn += 1;
            }
        }
    }
    (vs, vn, hs, hn)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageEval {
    pub index: usize,
    pub masked_fraction: f64,
    pub missing_tokens: usize,
    pub visible_mse: f64,
    pub masked_mse: f64,
    pub diversity: f64,
    /// SHA-256 of each sample's PPM bytes.
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub diversity_distance: String,
    pub fid_distance: String,
    pub setting: String,
    pub images: usize,
    pub samples_per_image: usize,
    pub sampling: SamplingOptions,
    pub seed: u64,
    pub visible_mse: f64,
    pub masked_mse: f64,
    pub fid_proxy: f64,
    pub diversity_mean: f64,
    pub diversity_std: f64,
    pub per_image: Vec<ImageEval>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "diversity distance: {}", self.diversity_distance)?;
        writeln!(f, "fid distance: {}", self.fid_distance)?;
        writeln!(
            f,
            "setting {}: {} images x {} samples, k={} t0={} s={} seed={}",
            self.setting, self.images, self.samples_per_image, self.sampling.steps, self.sampling.temperature, self.sampling.anneal, self.seed
        )?;
        writeln!(f, "visible mse  {:.5}", self.visible_mse)?;
        writeln!(f, "masked mse   {:.5}", self.masked_mse)?;
        writeln!(f, "fid proxy    {:.5}", self.fid_proxy)?;
        write!(f, "diversity    {:.5} ± {:.5}", self.diversity_mean, self.diversity_std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Alpha,
    Temperature,
    Anneal,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Alpha => "alpha",
            AblationAxis::Temperature => "temperature",
            AblationAxis::Anneal => "anneal",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(AblationAxis::Alpha),
            "temperature" => Ok(AblationAxis::Temperature),
            "anneal" => Ok(AblationAxis::Anneal),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}` (expected alpha, temperature or anneal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let keys: Vec<&String> = self.rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
        write!(f, "{:>12}", self.axis)?;
        for k in &keys {
            write!(f, " {k:>16}")?;
        }
        for r in &self.rows {
            write!(f, "\n{:>12}", r.value)?;
            for k in &keys {
                write!(f, " {:>16.5}", r.metrics[*k])?;
            }
        }
        Ok(())
    }
}

/// Varies one setting with everything else held at `cfg`. The alpha axis
/// retrains the encoder per value on the configured corpus (needs the VQ
/// checkpoint in `dir`) and scores every encoder on held-out random masks,
/// both on its own visible cells and on the cells visible under every
/// value; the sampling axes re-run `evaluate` on the trained pipeline.
pub fn run_ablation(axis: AblationAxis, values: &[f64], cfg: &PipelineConfig, dir: &Path) -> Result<AblationReport> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let rows = match axis {
        AblationAxis::Alpha => alpha_rows(values, cfg, dir)?,
        AblationAxis::Temperature | AblationAxis::Anneal => {
            let pipeline = Pipeline::load(dir, cfg)?;
            let images = eval_corpus(cfg)?;
            let masks = eval_masks(cfg, cfg.eval_mask, images.len());
            let mut rows = Vec::with_capacity(values.len());
            for &v in values {
                let mut opts = SamplingOptions::from_config(cfg);
                match axis {
                    AblationAxis::Temperature => opts.temperature = v,
                    _ => opts.anneal = v,
                }
                info!("ablation {axis} = {v}");
                let r = pipeline.evaluate(&images, &masks, &cfg.eval_mask.to_string(), &opts, cfg.eval_samples, cfg.eval_seed)?;
                rows.push(AblationRow {
                    value: v,
                    metrics: BTreeMap::from([
                        ("diversity_mean".to_string(), r.diversity_mean),
                        ("diversity_std".to_string(), r.diversity_std),
                        ("fid_proxy".to_string(), r.fid_proxy),
                        ("masked_mse".to_string(), r.masked_mse),
                    ]),
                });
            }
            rows
        }
    };
    Ok(AblationReport {
        axis: axis.to_string(),
        rows,
    })
}

fn alpha_rows(values: &[f64], cfg: &PipelineConfig, dir: &Path) -> Result<Vec<AblationRow>> {
    let mut cfgs = Vec::with_capacity(values.len());
    for &a in values {
        let mut c = cfg.clone();
        c.alpha = a;
        c.validate()?;
        cfgs.push(c);
    }
    let vq = load_vq(dir, cfg)?;
    let images = corpus(cfg)?;
    let targets = vq_targets(&vq, &images)?;
    let held = eval_corpus(cfg)?;
    let held_targets = vq_targets(&vq, &held)?;
    let extents = (cfg.extent, cfg.extent);
    let masks: Vec<MaskGrid> = (0..held.len())
        .map(|i| training_mask(&cfg.train_masks, extents, derive(cfg.eval_seed, &[2]), i, 0))
        .collect();
    let common = common_token_masks(&masks, values, cfg.stages())?;
    let held_refs: Vec<&Image> = held.iter().collect();
    let target_refs: Vec<&TokenGrid> = held_targets.iter().collect();
    let mut rows = Vec::with_capacity(values.len());
    for c in &cfgs {
        info!("ablation alpha = {}", c.alpha);
        let (enc, report) = train_encoder(&images, &targets, &c.encoder())?;
        let own = evaluate_encoder(&enc, &held_refs, &target_refs, &masks, None, false)?;
        let shared = evaluate_encoder(&enc, &held_refs, &target_refs, &masks, Some(&common), false)?;
        rows.push(AblationRow {
            value: c.alpha,
            metrics: BTreeMap::from([
                ("train_loss".to_string(), tail_mean(&report.loss, 50)),
                ("eval_loss".to_string(), own.loss),
                ("eval_accuracy".to_string(), own.accuracy),
                ("common_loss".to_string(), shared.loss),
                ("common_accuracy".to_string(), shared.accuracy),
            ]),
        });
    }
    Ok(rows)
}

/// Token cells visible under every threshold in `alphas`.
pub fn common_token_masks(masks: &[MaskGrid], alphas: &[f64], stages: usize) -> Result<Vec<MaskGrid>> {
    masks
        .iter()
        .map(|m| {
            let mut acc: Option<MaskGrid> = None;
            for &a in alphas {
                let t = build_pyramid(m, a, stages)?.token_mask().clone();
                acc = Some(match acc {
                    None => t,
                    Some(prev) => {
                        let v = prev.values().iter().zip(t.values()).map(|(&x, &y)| x & y).collect();
                        MaskGrid::new(t.height(), t.width(), v)?
                    }
                });
            }
            Ok(acc.expect("at least one alpha"))
        })
        .collect()
}

/// Record of one CLI run, sufficient to reproduce it.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: String,
    pub seed: Option<u64>,
    pub checkpoints: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &PipelineConfig, seed: Option<u64>) -> Self {
        Manifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            config: cfg.to_text(),
            seed,
            checkpoints: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    /// Records the hashes of whichever stage checkpoints exist in `dir`.
    pub fn record_checkpoints(&mut self, dir: &Path) -> Result<()> {
        for name in [VQ_FILE, ENCODER_FILE, TRANSFORMER_FILE, DECODER_FILE] {
            let path = dir.join(name);
            if path.exists() {
                self.checkpoints.insert(name.to_string(), file_hash(&path)?);
            }
        }
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        with_path(path, fs::write(path, self.to_json()))
    }
}

//! Flat `key = value` pipeline configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Lists are comma separated. Unknown keys are errors.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::compose::DecoderConfig;
use crate::dataset::DatasetKind;
use crate::encoder::{ConvMode, EncoderConfig};
use crate::error::{Error, Result};
use crate::masks::MaskKind;
use crate::transformer::{Masking, TransformerConfig};
use crate::vq::VqConfig;

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
scalar_value!(usize, u64, f32, f64, DatasetKind, MaskKind);

impl<T: Value> Value for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

impl Value for ConvMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "restrictive" => Ok(ConvMode::Restrictive),
            "plain" => Ok(ConvMode::Plain),
            _ => Err(format!("unknown conv mode `{s}` (restrictive|plain)")),
        }
    }
    fn render(&self) -> String {
        match self {
            ConvMode::Restrictive => "restrictive",
            ConvMode::Plain => "plain",
        }
        .into()
    }
}

impl Value for Masking {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Masking::Uniform),
            "block" => Ok(Masking::Block),
            _ => Err(format!("unknown masking `{s}` (uniform|block)")),
        }
    }
    fn render(&self) -> String {
        match self {
            Masking::Uniform => "uniform",
            Masking::Block => "block",
        }
        .into()
    }
}

macro_rules! pipeline_config {
    ($($key:ident : $t:ty),* $(,)?) => {
        /// Every knob of the pipeline. Each random process draws from exactly
        /// one of the `*_seed` fields.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $(pub $key: $t,)*
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$t as Value>::parse_value(value.trim())
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(self.$key.render()),)*
                    _ => None,
                }
            }

            /// Canonical text form; parses back to an equal config.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($key), self.$key.render());)*
                s
            }
        }
    };
}

pipeline_config! {
    extent: usize,
    dataset: DatasetKind,
    dataset_count: usize,
    dataset_seed: u64,
    k: usize,
    n_z: usize,
    alpha: f64,
    train_masks: Vec<MaskKind>,
    vq_widths: Vec<usize>,
    vq_steps: usize,
    vq_batch: usize,
    vq_lr: f32,
    vq_commitment: f32,
    vq_seed: u64,
    enc_widths: Vec<usize>,
    enc_blocks: usize,
    enc_heads: usize,
    enc_mode: ConvMode,
    enc_steps: usize,
    enc_batch: usize,
    enc_lr: f32,
    enc_seed: u64,
    tr_dim: usize,
    tr_layers: usize,
    tr_heads: usize,
    tr_dropout: f32,
    tr_steps: usize,
    tr_batch: usize,
    tr_lr: f32,
    tr_mask_min: f64,
    tr_mask_max: f64,
    tr_masking: Masking,
    tr_seed: u64,
    dec_widths: Vec<usize>,
    dec_disc_widths: Vec<usize>,
    dec_steps: usize,
    dec_batch: usize,
    dec_lr: f32,
    dec_disc_lr: f32,
    adv_weight: f32,
    r1_weight: f32,
    perceptual_weight: f32,
    dec_seed: u64,
    sample_steps: usize,
    temperature: f64,
    anneal: f64,
    eval_images: usize,
    eval_samples: usize,
    eval_mask: MaskKind,
    eval_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// 64×64 images, K = 64, n_z = 32, an 8×8 token grid.
    pub fn desk() -> Self {
        PipelineConfig {
            extent: 64,
            dataset: DatasetKind::Mixed,
            dataset_count: 2000,
            dataset_seed: 1,
            k: 64,
            n_z: 32,
            alpha: 0.5,
            train_masks: vec![MaskKind::SmallRandom, MaskKind::LargeRandom],
            vq_widths: vec![16, 32, 64, 64],
            vq_steps: 4000,
            vq_batch: 16,
            vq_lr: 2e-3,
            vq_commitment: 0.25,
            vq_seed: 2,
            enc_widths: vec![32, 64, 128],
            enc_blocks: 2,
            enc_heads: 4,
            enc_mode: ConvMode::Restrictive,
            enc_steps: 4000,
            enc_batch: 16,
            enc_lr: 1e-3,
            enc_seed: 3,
            tr_dim: 128,
            tr_layers: 4,
            tr_heads: 4,
            tr_dropout: 0.1,
            tr_steps: 6000,
            tr_batch: 32,
            tr_lr: 5e-4,
            tr_mask_min: 0.15,
            tr_mask_max: 0.75,
            tr_masking: Masking::Uniform,
            tr_seed: 4,
            dec_widths: vec![32, 64, 64, 128],
            dec_disc_widths: vec![32, 64, 128, 128],
            dec_steps: 4000,
            dec_batch: 16,
            dec_lr: 1e-3,
            dec_disc_lr: 1e-3,
            adv_weight: 1.0,
            r1_weight: 0.1,
            perceptual_weight: 0.1,
            dec_seed: 5,
            sample_steps: 5,
            temperature: 1.0,
            anneal: 0.9,
            eval_images: 64,
            eval_samples: 8,
            eval_mask: MaskKind::Box80,
            eval_seed: 6,
        }
    }

    /// Reduced widths and step counts for the end-to-end smoke run.
    pub fn smoke() -> Self {
        PipelineConfig {
            dataset_count: 500,
            vq_widths: vec![8, 16, 32, 64],
            vq_steps: 1200,
            vq_batch: 8,
            enc_widths: vec![16, 32, 64],
            enc_blocks: 1,
            enc_steps: 400,
            enc_batch: 8,
            enc_lr: 2e-3,
            tr_dim: 64,
            tr_layers: 2,
            tr_steps: 1500,
            tr_batch: 16,
            tr_lr: 1e-3,
            dec_widths: vec![16, 32, 32, 64],
            dec_disc_widths: vec![16, 32, 64, 64],
            dec_steps: 600,
            dec_batch: 8,
            dec_lr: 1e-3,
            dec_disc_lr: 1e-3,
            adv_weight: 0.1,
            eval_images: 16,
            eval_samples: 4,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (desk|smoke)"))),
        }
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Parses a full config on top of the desk preset, then validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn stages(&self) -> usize {
        self.vq_widths.len().saturating_sub(1)
    }

    pub fn token_extent(&self) -> usize {
        self.extent >> self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let s = self.stages();
        if s == 0 {
            return fail("vq_widths needs at least two entries".into());
        }
        if self.extent == 0 || self.extent % (1 << s) != 0 {
            return fail(format!("extent {} is not divisible by 2^{s}", self.extent));
        }
        if self.enc_widths.len() != s {
            return fail(format!("enc_widths has {} entries; {s} stages need {s}", self.enc_widths.len()));
        }
        if self.dec_widths.len() != s + 1 {
            return fail(format!("dec_widths has {} entries; {s} stages need {}", self.dec_widths.len(), s + 1));
        }
        if self.dec_disc_widths.is_empty() || self.extent % (1 << self.dec_disc_widths.len()) != 0 {
            return fail(format!("extent {} does not fit {} discriminator stages", self.extent, self.dec_disc_widths.len()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if self.k < 2 || self.n_z == 0 {
            return fail(format!("K = {} and n_z = {} must be positive (K ≥ 2)", self.k, self.n_z));
        }
        if self.tr_heads == 0 || self.tr_dim % self.tr_heads != 0 {
            return fail(format!("tr_dim {} not divisible by tr_heads {}", self.tr_dim, self.tr_heads));
        }
        if self.enc_heads == 0 || self.enc_widths.last().is_some_and(|w| w % self.enc_heads != 0) {
            return fail(format!("encoder width not divisible by enc_heads {}", self.enc_heads));
        }
        if !(0.0..1.0).contains(&self.tr_dropout) {
            return fail(format!("tr_dropout {} outside [0, 1)", self.tr_dropout));
        }
        if !(0.0 < self.tr_mask_min && self.tr_mask_min <= self.tr_mask_max && self.tr_mask_max <= 1.0) {
            return fail(format!("mask ratio range {}..{}", self.tr_mask_min, self.tr_mask_max));
        }
        if self.sample_steps == 0 || !(self.temperature > 0.0) || !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return fail(format!(
                "sampler steps {} / temperature {} / anneal {}",
                self.sample_steps, self.temperature, self.anneal
            ));
        }
        if self.train_masks.is_empty() {
            return fail("train_masks is empty".into());
        }
        for (name, b) in [("vq_batch", self.vq_batch), ("enc_batch", self.enc_batch), ("tr_batch", self.tr_batch), ("dec_batch", self.dec_batch)] {
            if b == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn vq(&self) -> VqConfig {
        VqConfig {
            k: self.k,
            n_z: self.n_z,
            widths: self.vq_widths.clone(),
            steps: self.vq_steps,
            batch: self.vq_batch,
            lr: self.vq_lr,
            commitment: self.vq_commitment,
            seed: self.vq_seed,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            k: self.k,
            widths: self.enc_widths.clone(),
            blocks: self.enc_blocks,
            heads: self.enc_heads,
            alpha: self.alpha,
            mode: self.enc_mode,
            steps: self.enc_steps,
            batch: self.enc_batch,
            lr: self.enc_lr,
            masks: self.train_masks.clone(),
            seed: self.enc_seed,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        let t = self.token_extent();
        TransformerConfig {
            k: self.k,
            grid: (t, t),
            d: self.tr_dim,
            layers: self.tr_layers,
            heads: self.tr_heads,
            dropout: self.tr_dropout,
            steps: self.tr_steps,
            batch: self.tr_batch,
            lr: self.tr_lr,
            mask_ratio: (self.tr_mask_min, self.tr_mask_max),
            masking: self.tr_masking,
            fixed_masks: false,
            seed: self.tr_seed,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            n_z: self.n_z,
            widths: self.dec_widths.clone(),
            disc_widths: self.dec_disc_widths.clone(),
            alpha: self.alpha,
            steps: self.dec_steps,
            batch: self.dec_batch,
            lr: self.dec_lr,
            disc_lr: self.dec_disc_lr,
            adv_weight: self.adv_weight,
            r1_weight: self.r1_weight,
            perceptual_weight: self.perceptual_weight,
            masks: self.train_masks.clone(),
            seed: self.dec_seed,
        }
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for PipelineConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

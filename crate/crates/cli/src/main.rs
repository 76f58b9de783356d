use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use tokenfill_core::config::PipelineConfig;
use tokenfill_core::dataset::{make_dataset, read_dataset, write_dataset, DatasetKind};
use tokenfill_core::pipeline::{
    self, eval_corpus, eval_masks, run_ablation, AblationAxis, Manifest, Pipeline, SamplingOptions, StageOutcome,
};
use tokenfill_core::{Error, Image, MaskGrid, MaskKind};

#[derive(Parser)]
#[command(name = "tokenfill", version, about = "Pluralistic inpainting with restrictive token encoding")]
struct Cli {
    /// Configuration file of `key = value` lines, applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset: `desk` or `smoke`.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides one configuration key, e.g. `--set alpha=0.9`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding the stage checkpoints.
    #[arg(long, global = true, default_value = "artifacts")]
    artifacts: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a procedural image corpus as PPM files.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: Option<DatasetKind>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Writes masks of one setting as PGM files.
    MakeMasks {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: MaskKind,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
    },
    TrainVq(TrainArgs),
    TrainEncoder(TrainArgs),
    TrainTransformer(TrainArgs),
    TrainDecoder(TrainArgs),
    /// Completes one image `--samples` times.
    Inpaint {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Scores the trained pipeline on the held-out corpus.
    Eval {
        #[arg(long)]
        seed: u64,
        /// Mask setting; defaults to `eval_mask`.
        #[arg(long)]
        mask: Option<MaskKind>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Varies one setting and tabulates the outcome.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// PPM corpus directory; generated from the configuration when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SamplingArgs {
    /// Sampling steps k.
    #[arg(long)]
    steps: Option<usize>,
    /// Starting temperature t_0.
    #[arg(long)]
    temperature: Option<f64>,
    /// Annealing factor s.
    #[arg(long)]
    anneal: Option<f64>,
}

impl SamplingArgs {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(v) = self.steps {
            cfg.set("sample_steps", &v.to_string())?;
        }
        if let Some(v) = self.temperature {
            cfg.set("temperature", &v.to_string())?;
        }
        if let Some(v) = self.anneal {
            cfg.set("anneal", &v.to_string())?;
        }
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::preset(&cli.preset)?;
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn training_images(cfg: &PipelineConfig, data: Option<&Path>) -> Result<Vec<Image>> {
    let images = match data {
        Some(dir) => read_dataset(dir)?,
        None => pipeline::corpus(cfg)?,
    };
    if let Some(im) = images.iter().find(|im| (im.height, im.width) != (cfg.extent, cfg.extent)) {
        return Err(Error::Config(format!(
            "corpus image is {}x{}, configured extent is {}",
            im.height, im.width, cfg.extent
        ))
        .into());
    }
    Ok(images)
}

fn train(cli: &Cli, mut cfg: PipelineConfig, args: &TrainArgs, stage: &str) -> Result<()> {
    let (steps_key, seed_key) = match stage {
        "vq" => ("vq_steps", "vq_seed"),
        "encoder" => ("enc_steps", "enc_seed"),
        "transformer" => ("tr_steps", "tr_seed"),
        _ => ("dec_steps", "dec_seed"),
    };
    if let Some(s) = args.steps {
        cfg.set(steps_key, &s.to_string())?;
    }
    if let Some(s) = args.seed {
        cfg.set(seed_key, &s.to_string())?;
    }
    let images = training_images(&cfg, args.data.as_deref())?;
    let dir = &cli.artifacts;
    info!("training {stage} on {} images", images.len());
    let outcome: StageOutcome = match stage {
        "vq" => pipeline::train_vq_stage(&cfg, &images, dir)?,
        "encoder" => pipeline::train_encoder_stage(&cfg, &images, dir)?,
        "transformer" => pipeline::train_transformer_stage(&cfg, &images, dir)?,
        _ => pipeline::train_decoder_stage(&cfg, &images, dir)?,
    };
    for (k, v) in &outcome.metrics {
        println!("{k} = {v:.6}");
    }
    println!("wrote {} ({})", outcome.checkpoint.display(), outcome.hash);
    let mut manifest = Manifest::new(&format!("train-{stage}"), &cfg, cfg.get(seed_key).and_then(|s| s.parse().ok()));
    manifest.record_checkpoints(dir)?;
    manifest.metrics = outcome.metrics;
    manifest.write(&dir.join(format!("manifest-{stage}.json")))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::MakeDataset { out, kind, count, seed } => {
            let kind = kind.unwrap_or(cfg.dataset);
            let count = count.unwrap_or(cfg.dataset_count);
            let seed = seed.unwrap_or(cfg.dataset_seed);
            let samples = make_dataset(kind, count, cfg.extent, seed)?;
            write_dataset(out, &samples)?;
            println!("wrote {count} {kind} images to {}", out.display());
            let mut manifest = Manifest::new("make-dataset", &cfg, Some(seed));
            manifest.metrics.insert("count".into(), count as f64);
            manifest.write(&out.join("manifest.json"))?;
        }
        Command::MakeMasks { out, kind, count, seed } => {
            let paths = pipeline::write_masks(out, *kind, *count, cfg.extent, *seed)?;
            println!("wrote {} {kind} masks to {}", paths.len(), out.display());
            let mut manifest = Manifest::new("make-masks", &cfg, Some(*seed));
            for p in &paths {
                manifest.record_output(p)?;
            }
            manifest.write(&out.join("manifest.json"))?;
        }
        Command::TrainVq(a) => train(cli, cfg, a, "vq")?,
        Command::TrainEncoder(a) => train(cli, cfg, a, "encoder")?,
        Command::TrainTransformer(a) => train(cli, cfg, a, "transformer")?,
        Command::TrainDecoder(a) => train(cli, cfg, a, "decoder")?,
        Command::Inpaint {
            image,
            mask,
            out,
            samples,
            seed,
            sampling,
        } => {
            sampling.apply(&mut cfg)?;
            cfg.validate()?;
            if *samples == 0 {
                bail!(Error::Config("--samples must be at least 1".into()));
            }
            let pipeline = Pipeline::load(&cli.artifacts, &cfg)?;
            let img = Image::read_ppm(image)?;
            let m = MaskGrid::read_pgm(mask)?;
            let comps = pipeline.inpaint(&img, &m, &SamplingOptions::from_config(&cfg), *samples, *seed)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let mut manifest = Manifest::new("inpaint", &cfg, Some(*seed));
            manifest.record_checkpoints(&cli.artifacts)?;
            let visible = out.join("tokens_visible.txt");
            fs::write(&visible, comps[0].visible.to_text())?;
            manifest.record_output(&visible)?;
            for (s, c) in comps.iter().enumerate() {
                let ppm = out.join(format!("sample_{s:03}.ppm"));
                let tokens = out.join(format!("tokens_{s:03}.txt"));
                c.image.write_ppm(&ppm)?;
                fs::write(&tokens, c.tokens.to_text())?;
                manifest.record_output(&ppm)?;
                manifest.record_output(&tokens)?;
            }
            manifest.write(&out.join("manifest.json"))?;
            println!(
                "wrote {} samples to {} ({} of {} token cells sampled)",
                comps.len(),
                out.display(),
                comps[0].visible.missing_count(),
                comps[0].visible.len()
            );
        }
        Command::Eval {
            seed,
            mask,
            samples,
            images,
            out,
            sampling,
        } => {
            sampling.apply(&mut cfg)?;
            if let Some(m) = mask {
                cfg.set("eval_mask", &m.to_string())?;
            }
            if let Some(n) = samples {
                cfg.set("eval_samples", &n.to_string())?;
            }
            if let Some(n) = images {
                cfg.set("eval_images", &n.to_string())?;
            }
            cfg.validate()?;
            let pipeline = Pipeline::load(&cli.artifacts, &cfg)?;
            let corpus = eval_corpus(&cfg)?;
            let masks = eval_masks(&cfg, cfg.eval_mask, corpus.len());
            let report = pipeline.evaluate(
                &corpus,
                &masks,
                &cfg.eval_mask.to_string(),
                &SamplingOptions::from_config(&cfg),
                cfg.eval_samples,
                *seed,
            )?;
            println!("{report}");
            let mut manifest = Manifest::new("eval", &cfg, Some(*seed));
            manifest.record_checkpoints(&cli.artifacts)?;
            manifest.metrics.insert("fid_proxy".into(), report.fid_proxy);
            manifest.metrics.insert("diversity_mean".into(), report.diversity_mean);
            if let Some(path) = out {
                fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
                manifest.record_output(path)?;
                manifest.write(&path.with_extension("manifest.json"))?;
            }
        }
        Command::Ablate { axis, values, out } => {
            let report = run_ablation(*axis, values, &cfg, &cli.artifacts)?;
            println!("{report}");
            if let Some(path) = out {
                fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
                let mut manifest = Manifest::new(&format!("ablate {axis}"), &cfg, None);
                manifest.record_checkpoints(&cli.artifacts)?;
                manifest.record_output(path)?;
                manifest.write(&path.with_extension("manifest.json"))?;
            }
        }
    }
    Ok(())
}

/// 2 for configuration errors, 3 for checkpoint mismatches, 4 for
/// numerical failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::CheckpointMismatch(_)) => 3,
        Some(Error::Numerical(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

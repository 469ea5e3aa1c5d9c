use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cto::checkpoint::Checkpoint;
use cto::data::{boundary_from_mask, load_mask, synth_dataset, write_dataset, DatasetManifest, Sample, Split};
use cto::eval::{evaluate, infer_file, save_binary};
use cto::train::{checkpoint_path, TrainConfig, Trainer};
use cto::{ModelConfig, Scalar, Variant};

#[derive(Parser)]
#[command(name = "cto", version, about = "Train, evaluate and run the CTO segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory or on synthetic data.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics.json and per_image.csv.
    Eval(EvalArgs),
    /// Segment one image.
    Infer(InferArgs),
    /// Write a synthetic dataset in the images/ masks/ layout.
    Synth(SynthArgs),
    /// Derive boundary maps from a directory of masks.
    MakeBoundaries(BoundaryArgs),
}

#[derive(Args, Default)]
struct TrainArgs {
    /// Flat `key = value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root containing images/ and masks/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train on this many synthetic samples instead of --data.
    #[arg(long)]
    synth: Option<usize>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Batch 4, 64x64 images and the tiny architecture.
    #[arg(long)]
    desk: bool,
    /// `tiny` or `base`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    boundary_width: Option<usize>,
    /// `f32` or `f64`.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report directory.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Mask PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Also write `<out>_boundary.png` from the boundary head.
    #[arg(long)]
    boundary: bool,
    /// Also write `<out>_overlay.png` with the predicted contour.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BoundaryArgs {
    /// Directory of mask PNGs (or a dataset root with a masks/ subdirectory).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    width: usize,
}

/// Parses `key = value` lines; `#` starts a comment.
fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key = value", path.display(), n + 1);
        };
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

fn fill<T: std::str::FromStr>(slot: &mut Option<T>, file: &BTreeMap<String, String>, key: &str) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if slot.is_none() {
        if let Some(v) = file.get(key) {
            *slot = Some(v.parse().map_err(|e| anyhow::anyhow!("config key `{key}`: {e}"))?);
        }
    }
    Ok(())
}

impl TrainArgs {
    fn merge_file(&mut self) -> Result<()> {
        let Some(path) = &self.config else {
            return Ok(());
        };
        let file = read_config_file(path)?;
        let known = [
            "lr", "batch", "epochs", "variant", "alpha", "size", "seed", "data", "synth", "out", "checkpoint", "desk",
            "model", "classes", "boundary_width", "precision",
        ];
        if let Some(k) = file.keys().find(|k| !known.contains(&k.as_str())) {
            bail!("unknown config key `{k}`");
        }
        fill(&mut self.lr, &file, "lr")?;
        fill(&mut self.batch, &file, "batch")?;
        fill(&mut self.epochs, &file, "epochs")?;
        fill(&mut self.variant, &file, "variant")?;
        fill(&mut self.alpha, &file, "alpha")?;
        fill(&mut self.size, &file, "size")?;
        fill(&mut self.seed, &file, "seed")?;
        fill(&mut self.data, &file, "data")?;
        fill(&mut self.synth, &file, "synth")?;
        fill(&mut self.out, &file, "out")?;
        fill(&mut self.checkpoint, &file, "checkpoint")?;
        fill(&mut self.model, &file, "model")?;
        fill(&mut self.classes, &file, "classes")?;
        fill(&mut self.boundary_width, &file, "boundary_width")?;
        fill(&mut self.precision, &file, "precision")?;
        if !self.desk {
            self.desk = file.get("desk").is_some_and(|v| v == "true");
        }
        Ok(())
    }

    fn configs(&self) -> Result<(ModelConfig, TrainConfig)> {
        let mut tc = if self.desk { TrainConfig::desk() } else { TrainConfig::default() };
        let variant: Variant = self.variant.as_deref().unwrap_or("full").parse()?;
        let mut mc = match self.model.as_deref().unwrap_or(if self.desk { "tiny" } else { "base" }) {
            "tiny" => ModelConfig::tiny(variant),
            "base" => ModelConfig {
                variant,
                ..ModelConfig::default()
            },
            other => bail!("unknown model size `{other}` (expected tiny or base)"),
        };
        tc.lr = self.lr.unwrap_or(tc.lr);
        tc.batch = self.batch.unwrap_or(tc.batch);
        tc.epochs = self.epochs.unwrap_or(tc.epochs);
        tc.alpha = self.alpha.unwrap_or(tc.alpha);
        tc.image_size = self.size.unwrap_or(tc.image_size);
        tc.seed = self.seed.unwrap_or(tc.seed);
        tc.checkpoint_dir = Some(self.out.clone().unwrap_or_else(|| PathBuf::from("checkpoints")));
        mc.image_size = tc.image_size;
        mc.classes = self.classes.unwrap_or(mc.classes);
        mc.boundary_width = self.boundary_width.unwrap_or(mc.boundary_width);
        tc.validate()?;
        mc.validate()?;
        Ok((mc, tc))
    }
}

fn load_samples(root: &Path, size: usize, boundary_width: usize, split: Split) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::scan(root, split)?;
    let samples = manifest
        .samples(size, boundary_width)
        .collect::<cto::Result<Vec<_>>>()?;
    Ok(samples)
}

fn run_training<T: Scalar>(args: &TrainArgs, mc: &ModelConfig, tc: TrainConfig) -> Result<()> {
    let mut trainer = match &args.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            let mut t = Trainer::<T>::resume(&ckpt)?;
            // further epochs may be requested on resume
            t.config.epochs = args.epochs.unwrap_or(t.config.epochs);
            t.config.checkpoint_dir = tc.checkpoint_dir.clone();
            println!("resumed from {} at epoch {}", path.display(), t.epoch);
            t
        }
        None => Trainer::<T>::new(mc, tc)?,
    };
    let (size, width) = (trainer.model.config().image_size, trainer.model.config().boundary_width);
    let data = match (&args.data, args.synth) {
        (Some(root), _) => load_samples(root, size, width, Split::Train)?,
        (None, Some(n)) => synth_dataset(n, size, trainer.config.seed, width)?,
        (None, None) => bail!("pass --data <dir> or --synth <n>"),
    };
    println!(
        "training {} on {} samples, {} parameters, {}",
        trainer.model.variant(),
        data.len(),
        cto::nn::Module::param_count(&trainer.model),
        T::NAME
    );
    trainer.fit(&data, &mut |log| {
        let l = &log.loss;
        let heads: Vec<String> = l
            .ce_per_head
            .iter()
            .zip(&l.miou_per_head)
            .map(|(c, m)| format!("{c:.4}/{m:.4}"))
            .collect();
        let dice = l.boundary_dice.map_or("-".into(), |d| format!("{d:.4}"));
        println!(
            "epoch {:3} step {:5} total {:.5} ce/miou [{}] boundary {}",
            log.epoch,
            log.step,
            l.total,
            heads.join(" "),
            dice
        );
    })?;
    if let Some(dir) = &trainer.config.checkpoint_dir {
        println!("last checkpoint: {}", checkpoint_path(dir, trainer.epoch).display());
    }
    Ok(())
}

fn train(mut args: TrainArgs) -> Result<()> {
    args.merge_file()?;
    let (mc, tc) = args.configs()?;
    match args.precision.as_deref().unwrap_or("f32") {
        "f32" => run_training::<f32>(&args, &mc, tc),
        "f64" => run_training::<f64>(&args, &mc, tc),
        other => bail!("unknown precision `{other}`"),
    }
}

fn eval_with<T: Scalar>(ckpt: &Checkpoint, args: &EvalArgs) -> Result<()> {
    let mut model = ckpt.build_model::<T>()?;
    let cfg = model.config().clone();
    let data = load_samples(&args.data, cfg.image_size, cfg.boundary_width, Split::Test)?;
    let report = evaluate(&mut model, &data)?;
    report.write(&args.out)?;
    println!("{}", report.summary_line());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    if !args.checkpoint.exists() {
        bail!("checkpoint {} does not exist", args.checkpoint.display());
    }
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    match ckpt.meta.scalar.as_str() {
        "f64" => eval_with::<f64>(&ckpt, &args),
        _ => eval_with::<f32>(&ckpt, &args),
    }
}

fn infer_with<T: Scalar>(ckpt: &Checkpoint, args: &InferArgs) -> Result<()> {
    let mut model = ckpt.build_model::<T>()?;
    let out = infer_file(&mut model, &args.input, &args.out, args.boundary, args.overlay)?;
    println!("mask: {}", out.mask.display());
    for p in out.boundary.iter().chain(&out.overlay) {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    match ckpt.meta.scalar.as_str() {
        "f64" => infer_with::<f64>(&ckpt, &args),
        _ => infer_with::<f32>(&ckpt, &args),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let samples = synth_dataset(args.n, args.size, args.seed, 1)?;
    write_dataset(&samples, &args.out)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn make_boundaries(args: BoundaryArgs) -> Result<()> {
    let dir = if args.data.join("masks").is_dir() {
        args.data.join("masks")
    } else {
        args.data.clone()
    };
    std::fs::create_dir_all(&args.out)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    for path in &paths {
        let mask = load_mask(path)?;
        let boundary = boundary_from_mask(&mask, args.width);
        save_binary(&boundary, &args.out.join(path.file_name().expect("file name")))?;
    }
    println!("wrote {} boundary maps to {}", paths.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Synth(a) => synth(a),
        Command::MakeBoundaries(a) => make_boundaries(a),
    }
}

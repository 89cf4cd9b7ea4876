use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use deepunet::data::DatasetManifest;
use deepunet::model::ModelConfig;
use deepunet::training::{train_loop, TrainConfig, TrainOptions};

use crate::settings::{usage, CliResult, FileConfig, Resolved};

/// Resolved settings written next to the checkpoints; usable as `--config`.
pub const RESOLVED_FILE: &str = "resolved.conf";

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// Held-out manifest scored every --eval-every steps.
    #[arg(long, value_name = "MANIFEST")]
    val: Option<PathBuf>,
    /// Continue from a checkpoint written by the same settings.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Laptop preset: depth 4, tile 64, batch 8, 2000 steps, lr 0.0003.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Length of the learning-rate schedule.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Channels of the first convolution of each block.
    #[arg(long)]
    wide: Option<usize>,
    /// Block input/output channels.
    #[arg(long)]
    narrow: Option<usize>,
    /// Drop every additive shortcut (U-Net-like ablation).
    #[arg(long)]
    no_plus: bool,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Crops per training image and epoch.
    #[arg(long)]
    samples_per_image: Option<usize>,
    /// Stop after this many completed steps; the schedule still spans --steps.
    #[arg(long, value_name = "N")]
    stop_after: Option<u64>,
}

/// Model and training settings after applying preset, file and flags.
pub fn resolve(args: &TrainArgs, file: &FileConfig) -> CliResult<(ModelConfig, TrainConfig)> {
    let desk = file.switch(args.desk, "desk")?;
    let (mut model, mut train) = if desk {
        (ModelConfig::desk(), TrainConfig::desk())
    } else {
        (ModelConfig::full(), TrainConfig::full())
    };
    if let Some(v) = file.pick(args.depth, "depth")? {
        model.depth = v;
    }
    if let Some(v) = file.pick(args.wide, "wide")? {
        model.wide_channels = v;
    }
    if let Some(v) = file.pick(args.narrow, "narrow")? {
        model.narrow_channels = v;
    }
    model.plus_enabled = !file.switch(args.no_plus, "no-plus")?;
    if let Some(v) = file.pick(args.tile, "tile")? {
        train.tile_size = v;
    }
    if let Some(v) = file.pick(args.batch, "batch")? {
        train.batch_size = v;
    }
    if let Some(v) = file.pick(args.steps, "steps")? {
        train.total_steps = v;
    }
    if let Some(v) = file.pick(args.seed, "seed")? {
        train.seed = v;
    }
    if let Some(v) = file.pick(args.lr, "lr")? {
        train.base_lr = v;
    }
    if let Some(v) = file.pick(args.momentum, "momentum")? {
        train.momentum = v;
    }
    if let Some(v) = file.pick(args.eval_every, "eval-every")? {
        train.eval_every = v;
    }
    if let Some(v) = file.pick(args.checkpoint_every, "checkpoint-every")? {
        train.checkpoint_every = v;
    }
    if let Some(v) = file.pick(args.samples_per_image, "samples-per-image")? {
        train.samples_per_image = v;
    }
    model.validate().map_err(|e| usage(e.to_string()))?;
    train.validate().map_err(|e| usage(e.to_string()))?;
    if train.tile_size % model.required_multiple() != 0 {
        return Err(usage(format!(
            "--tile {} must be a multiple of {} for depth {}",
            train.tile_size,
            model.required_multiple(),
            model.depth
        )));
    }
    Ok((model, train))
}

fn describe(model: &ModelConfig, train: &TrainConfig) -> Resolved {
    let mut r = Resolved::default();
    r.push("depth", model.depth)
        .push("wide", model.wide_channels)
        .push("narrow", model.narrow_channels)
        .push("no-plus", !model.plus_enabled)
        .push("tile", train.tile_size)
        .push("batch", train.batch_size)
        .push("steps", train.total_steps)
        .push("seed", train.seed)
        .push("lr", train.base_lr)
        .push("momentum", train.momentum)
        .push("eval-every", train.eval_every)
        .push("checkpoint-every", train.checkpoint_every)
        .push("samples-per-image", train.samples_per_image);
    r
}

pub fn run(args: TrainArgs, file: &FileConfig) -> CliResult<()> {
    let (model, train) = resolve(&args, file)?;
    let resolved = describe(&model, &train);
    log::info!("train {}", resolved.line());

    let manifest = DatasetManifest::read(&args.manifest)?;
    if manifest.is_empty() {
        return Err(usage(format!("{} lists no images", args.manifest.display())));
    }
    let val = args.val.as_deref().map(DatasetManifest::read).transpose()?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let conf = args.out.join(RESOLVED_FILE);
    std::fs::write(&conf, resolved.file()).with_context(|| format!("writing {}", conf.display()))?;

    let opts = TrainOptions {
        out_dir: args.out.clone(),
        resume: args.resume.clone(),
        val,
        stop_after: args.stop_after,
    };
    let started = std::time::Instant::now();
    let outcome = train_loop(&model, &train, &manifest, &opts)?;
    let last = outcome
        .losses
        .last()
        .map_or("n/a".to_string(), |(_, l)| format!("{l:.6}"));
    let f1 = outcome.last_val_f1.map_or("n/a".to_string(), |f| format!("{f:.4}"));
    println!(
        "step {}/{}  final loss {last}  val F1 {f1}  checkpoint {}  seed {}  ({:.1}s)",
        outcome.step,
        train.total_steps,
        outcome.checkpoint.display(),
        train.seed,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

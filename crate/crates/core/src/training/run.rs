use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lr_at, save_checkpoint, train_step, OptimizerState, TrainConfig};
use crate::data::{
    crop_both_classes, AugmentSpec, DatasetManifest, LabeledImage, SampleStream, TileSample, DEFAULT_MAX_TRIES,
};
use crate::error::{Error, Result};
use crate::evaluation::{ConfusionCounts, MetricRow};
use crate::inference::argmax_classes;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.tsv";
/// Name of the checkpoint written after the last step.
pub const FINAL_CHECKPOINT: &str = "model.dunw";
const VAL_TILES_PER_IMAGE: usize = 4;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Held-out images scored during training.
    pub val: Option<DatasetManifest>,
    /// Stop after this many completed steps even if the schedule is longer.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: OptimizerState,
    /// Completed steps.
    pub step: u64,
    /// `(step, loss)` of every step run in this call.
    pub losses: Vec<(u64, f32)>,
    pub last_val_f1: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Fixed both-class crops of the validation images.
pub fn validation_tiles(images: &[LabeledImage], tile: usize, min_fraction: f64, seed: u64) -> Result<Vec<TileSample>> {
    let mut out = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX - i as u64);
        for _ in 0..VAL_TILES_PER_IMAGE {
            if let Some(s) = crop_both_classes(img, i, tile, min_fraction, &mut rng, DEFAULT_MAX_TRIES)? {
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Land F1 of `model` over `tiles`, pooled.
/// Seven significant digits, so decayed rates print as `0.00003` rather
/// than with the rounding noise of `0.0003 * 0.1`.
fn rounded(x: f64) -> f64 {
    format!("{x:.6e}").parse().unwrap_or(x)
}

fn tile_f1(model: &Model<f32>, tiles: &[TileSample], batch: usize) -> Result<Option<f64>> {
    let mut counts = ConfusionCounts::default();
    for chunk in tiles.chunks(batch.max(1)) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.tile.clone()).collect();
        let probs = model.predict(&Tensor::stack(&images)?)?;
        let targets: Vec<u8> = chunk.iter().flat_map(|s| s.target.iter().copied()).collect();
        counts += ConfusionCounts::from_classes(&argmax_classes(&probs), &targets);
    }
    Ok(MetricRow::new("val", counts).f1)
}

fn open_log(path: &Path, fresh: bool, header: &[String]) -> Result<File> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let text: String = header.iter().map(|h| format!("# {h}\n")).collect();
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(file)
}

/// Run the schedule of `config` on the images of `manifest`, writing
/// `metrics.tsv` and checkpoints into `opts.out_dir`.
///
/// Every source of randomness is derived from `config.seed` and all
/// reductions run in a fixed order, so a resumed run reproduces an
/// uninterrupted one bit for bit.
pub fn train_loop(
    model_config: &ModelConfig,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    let m = model_config.required_multiple();
    if !config.tile_size.is_multiple_of(m) {
        return Err(Error::invalid(
            "train",
            format!(
                "tile {} must be a multiple of {m} for depth {}",
                config.tile_size, model_config.depth
            ),
        ));
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;

    let (mut model, mut optimizer, start) = match &opts.resume {
        Some(path) => {
            let ckpt = super::load_checkpoint(path)?;
            ckpt.check_config(model_config)?;
            if !ckpt.train.same_trajectory(config) {
                return Err(Error::Checkpoint(format!(
                    "{} was written by a run with different settings ({})",
                    path.display(),
                    ckpt.train.describe()
                )));
            }
            (ckpt.model, ckpt.optimizer, ckpt.step)
        }
        None => {
            let model = Model::build(model_config.clone(), config.seed)?;
            let opt = OptimizerState::zeros_like(&model);
            (model, opt, 0)
        }
    };
    let end = opts
        .stop_after
        .map_or(config.total_steps, |s| s.min(config.total_steps));

    let images = manifest.load_all()?;
    let mut stream = SampleStream::new(
        images,
        config.tile_size,
        config.samples_per_image,
        AugmentSpec::default(),
        config.min_fraction,
        config.seed,
    )?;
    stream.skip(start * config.batch_size as u64)?;
    let val_tiles = match &opts.val {
        Some(v) => validation_tiles(&v.load_all()?, config.tile_size, config.min_fraction, config.seed)?,
        None => Vec::new(),
    };

    let log_path = opts.out_dir.join(METRICS_FILE);
    let mut header = vec![
        format!(
            "model depth={} wide_channels={} narrow_channels={} plus={} params={}",
            model_config.depth,
            model_config.wide_channels,
            model_config.narrow_channels,
            model_config.plus_enabled,
            model.parameter_count()
        ),
        format!("train {}", config.describe()),
        format!("data train_images={} val_tiles={}", manifest.len(), val_tiles.len()),
    ];
    if start > 0 {
        header.push(format!("resumed at step {start}"));
    }
    header.push("step\tlr\tloss\tval_F1".into());
    let mut log = open_log(&log_path, start == 0, &header)?;

    let mut losses = Vec::new();
    let mut last_val_f1 = None;
    let mut checkpoint = opts.out_dir.join(FINAL_CHECKPOINT);
    for step in start..end {
        let batch = stream.next_batch(config.batch_size)?;
        let loss = train_step(&mut model, &batch, &mut optimizer, step, config)?;
        losses.push((step, loss));
        let done = step + 1;
        let val = if !val_tiles.is_empty() && (done % config.eval_every == 0 || done == end) {
            let f1 = tile_f1(&model, &val_tiles, config.batch_size)?;
            last_val_f1 = f1;
            Some(f1.map_or("NA".to_string(), |f| format!("{f:.4}")))
        } else {
            None
        };
        let line = format!(
            "{step}\t{}\t{loss:.6}\t{}\n",
            rounded(lr_at(step, config)?),
            val.as_deref().unwrap_or("NA")
        );
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        if done % 50 == 0 || done == end {
            log::info!(
                "step {done}/{}: loss {loss:.4}{}",
                config.total_steps,
                val.map(|v| format!(", val F1 {v}")).unwrap_or_default()
            );
        }
        if done % config.checkpoint_every == 0 || done == end {
            let path = if done == end {
                opts.out_dir.join(FINAL_CHECKPOINT)
            } else {
                opts.out_dir.join(format!("checkpoint-{done:06}.dunw"))
            };
            save_checkpoint(&path, &model, &optimizer, config, done)?;
            checkpoint = path;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        model,
        optimizer,
        step: end.max(start),
        losses,
        last_val_f1,
        checkpoint,
    })
}

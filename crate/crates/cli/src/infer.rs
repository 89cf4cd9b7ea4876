use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;

use deepunet::data::{rgb_to_tensor, DatasetManifest};
use deepunet::evaluation::evaluate_set;
use deepunet::inference::{binarize, predict_image, TileOptions};
use deepunet::training::{load_checkpoint, write_records, Checkpoint, Record};

use crate::settings::{usage, CliResult, FileConfig, Resolved};
use crate::TileArgs;

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// RGB input image.
    #[arg(long)]
    image: PathBuf,
    /// Output mask PNG (255 sea, 0 land).
    #[arg(long)]
    out: PathBuf,
    /// Also dump the per-pixel class probabilities as named records.
    #[arg(long, value_name = "FILE")]
    probs: Option<PathBuf>,
    #[command(flatten)]
    tiles: TileArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Text report; a JSON report is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Path of the JSON report [default: --out with a .json extension].
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    #[command(flatten)]
    tiles: TileArgs,
}

/// Load a checkpoint and check it against `--no-plus`.
fn load_model(path: &Path, tiles: &TileArgs, file: &FileConfig) -> CliResult<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let no_plus = file.switch(tiles.no_plus, "no-plus")?;
    if no_plus && ckpt.model.config().plus_enabled {
        return Err(usage(format!(
            "--no-plus was given but {} was trained with Plus connections",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn tile_options(ckpt: &Checkpoint, tiles: &TileArgs, file: &FileConfig) -> CliResult<(TileOptions, Resolved)> {
    let tile = file.pick(tiles.tile, "tile")?.unwrap_or(ckpt.train.tile_size);
    let mut opts = TileOptions::new(tile);
    if let Some(s) = file.pick(tiles.stride, "stride")? {
        opts.stride = s;
    }
    if let Some(s) = file.pick(tiles.sigma, "sigma")? {
        opts.sigma = s;
    }
    if let Some(b) = file.pick(tiles.batch, "batch")? {
        opts.batch = b;
    }
    let m = ckpt.model.config().required_multiple();
    if tile == 0 || tile % m != 0 {
        return Err(usage(format!("--tile {tile} must be a positive multiple of {m}")));
    }
    if opts.stride == 0 || opts.stride > tile {
        return Err(usage(format!("--stride must lie in 1..={tile}")));
    }
    if !(opts.sigma > 0.0 && opts.sigma.is_finite()) {
        return Err(usage("--sigma must be positive"));
    }
    let mut r = Resolved::default();
    r.push("tile", opts.tile)
        .push("stride", opts.stride)
        .push("sigma", opts.sigma)
        .push("batch", opts.batch)
        .push("no-plus", !ckpt.model.config().plus_enabled)
        .push("seed", ckpt.train.seed)
        .push("step", ckpt.step);
    Ok((opts, r))
}

pub fn predict(args: PredictArgs, file: &FileConfig) -> CliResult<()> {
    let ckpt = load_model(&args.ckpt, &args.tiles, file)?;
    let (opts, resolved) = tile_options(&ckpt, &args.tiles, file)?;
    log::info!("predict {} checkpoint={}", resolved.line(), args.ckpt.display());
    let rgb = image::open(&args.image)
        .with_context(|| format!("reading {}", args.image.display()))?
        .to_rgb8();
    let probs = predict_image(&ckpt.model, &rgb_to_tensor(&rgb), &opts)?;
    binarize(&probs)?
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;

    if let Some(path) = &args.probs {
        let (h, w) = (probs.shape().h(), probs.shape().w());
        let (land, sea) = probs.data().split_at(h * w);
        let records = [("probs/land", land), ("probs/sea", sea)].map(|(name, data)| Record {
            name: name.to_string(),
            dims: vec![h, w],
            data: data.to_vec(),
        });
        let meta = serde_json::json!({
            "kind": "probabilities",
            "image": args.image.display().to_string(),
            "checkpoint": args.ckpt.display().to_string(),
            "settings": resolved.line(),
        });
        let bytes = write_records(&meta.to_string(), &records)?;
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} ({}x{})", args.out.display(), rgb.height(), rgb.width());
    Ok(())
}

pub fn evaluate(args: EvaluateArgs, file: &FileConfig) -> CliResult<()> {
    let ckpt = load_model(&args.ckpt, &args.tiles, file)?;
    let (opts, resolved) = tile_options(&ckpt, &args.tiles, file)?;
    log::info!("evaluate {} checkpoint={}", resolved.line(), args.ckpt.display());
    let manifest = DatasetManifest::read(&args.manifest)?;
    let report = evaluate_set(&ckpt.model, &manifest, &opts)?;

    let header = format!(
        "# checkpoint={} manifest={}\n# {}\n",
        args.ckpt.display(),
        args.manifest.display(),
        resolved.line()
    );
    let table = report.to_table();
    std::fs::write(&args.out, format!("{header}{table}")).with_context(|| format!("writing {}", args.out.display()))?;
    let json_path = args.json.clone().unwrap_or_else(|| args.out.with_extension("json"));
    let mut json = serde_json::to_value(&report).context("serialising report")?;
    json["checkpoint"] = args.ckpt.display().to_string().into();
    json["settings"] = resolved.line().into();
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&json).context("serialising report")?,
    )
    .with_context(|| format!("writing {}", json_path.display()))?;
    print!("{table}");
    Ok(())
}

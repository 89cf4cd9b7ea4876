use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use deepunet::data::{synth_generate, DatasetManifest, Split, SYNTH_PARAMS};

use crate::settings::{usage, CliResult, Extent, FileConfig, Resolved};

/// Manifest listing every generated pair.
pub const ALL_MANIFEST: &str = "manifest.txt";
pub const TRAIN_MANIFEST: &str = "train.txt";
pub const VAL_MANIFEST: &str = "val.txt";

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of image/mask pairs.
    #[arg(long)]
    count: Option<usize>,
    /// Image extents as HxW [default: 256x256].
    #[arg(long)]
    size: Option<Extent>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hold the last K pairs out into a validation manifest.
    #[arg(long, value_name = "K")]
    holdout: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Seed of image `index` in a set generated from `seed`; independent of
/// the number of worker threads.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

pub fn run(args: SynthArgs, file: &FileConfig) -> CliResult<()> {
    let count = file
        .pick(args.count, "count")?
        .ok_or_else(|| usage("synth needs --count"))?;
    let size = file.pick(args.size, "size")?.unwrap_or(Extent {
        height: 256,
        width: 256,
    });
    let seed = file.pick(args.seed, "seed")?.unwrap_or(0);
    let holdout = file.pick(args.holdout, "holdout")?.unwrap_or(0);
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if holdout >= count && holdout > 0 {
        return Err(usage(format!(
            "--holdout {holdout} leaves no training images out of {count}"
        )));
    }
    let mut resolved = Resolved::default();
    resolved
        .push("count", count)
        .push("size", size)
        .push("seed", seed)
        .push("holdout", holdout);
    log::info!("synth {}", resolved.line());

    let (images, masks) = (args.out.join("images"), args.out.join("masks"));
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let name = format!("synth_{i:04}.png");
            let (image, mask) = (images.join(&name), masks.join(&name));
            synth_generate(image_seed(seed, i), size.height, size.width)?.save(&image, &mask)?;
            Ok((image, mask))
        })
        .collect::<deepunet::Result<Vec<_>>>()?;

    let mut header = vec!["generator synth".to_string(), resolved.line()];
    header.extend(SYNTH_PARAMS.describe());
    let write = |entries: &[(PathBuf, PathBuf)], split: Option<Split>, name: &str| -> CliResult<()> {
        let mut m = DatasetManifest::new(entries.to_vec(), split);
        m.comments = header.clone();
        m.write(&args.out.join(name))?;
        Ok(())
    };
    write(&entries, None, ALL_MANIFEST)?;
    if holdout > 0 {
        let (train, val) = entries.split_at(count - holdout);
        write(train, Some(Split::Train), TRAIN_MANIFEST)?;
        write(val, Some(Split::Val), VAL_MANIFEST)?;
    }
    println!("wrote {count} pairs of {size} to {}", args.out.display());
    Ok(())
}

use clap::Args;

use deepunet::check::{model_grad_check, ModelCheck, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE};
use deepunet::model::ModelConfig;
use deepunet::receptive::{receptive_field, receptive_field_recurrence, CLAIMED_RECEPTIVE_FIELD};

use crate::settings::{usage, CliError, CliResult, FileConfig, Resolved};

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    depth: Option<usize>,
    /// Side of the random square input.
    #[arg(long)]
    size: Option<usize>,
    /// Number of seeds, starting at --seed.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Elements checked per parameter tensor [default: 64].
    #[arg(long, conflicts_with = "all")]
    samples: Option<usize>,
    /// Check every element of every tensor.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    wide: Option<usize>,
    #[arg(long)]
    narrow: Option<usize>,
    #[arg(long)]
    no_plus: bool,
}

pub fn gradcheck(args: GradcheckArgs, file: &FileConfig) -> CliResult<()> {
    let mut config = ModelConfig::full().with_depth(file.pick(args.depth, "depth")?.unwrap_or(2));
    if let Some(v) = file.pick(args.wide, "wide")? {
        config.wide_channels = v;
    }
    if let Some(v) = file.pick(args.narrow, "narrow")? {
        config.narrow_channels = v;
    }
    config.plus_enabled = !file.switch(args.no_plus, "no-plus")?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    let size = file.pick(args.size, "size")?.unwrap_or(16);
    if size == 0 || size % config.required_multiple() != 0 {
        return Err(usage(format!(
            "--size {size} must be a positive multiple of {}",
            config.required_multiple()
        )));
    }
    let seeds = file.pick(args.seeds, "seeds")?.unwrap_or(8);
    let first = file.pick(args.seed, "seed")?.unwrap_or(0);
    let mut check = ModelCheck::new(size);
    if !args.all {
        check = check.sampled(file.pick(args.samples, "samples")?.unwrap_or(64));
    }

    let mut resolved = Resolved::default();
    resolved
        .push("depth", config.depth)
        .push("wide", config.wide_channels)
        .push("narrow", config.narrow_channels)
        .push("no-plus", !config.plus_enabled)
        .push("size", size)
        .push("seed", first)
        .push("seeds", seeds)
        .push("samples", check.per_tensor.map_or("all".to_string(), |k| k.to_string()));
    println!(
        "gradcheck {}  h={GRAD_CHECK_STEP:e} tol={GRAD_CHECK_TOLERANCE:e}",
        resolved.line()
    );

    let mut worst = 0f64;
    let mut failed = 0usize;
    for seed in first..first + seeds {
        let r = model_grad_check(&config, seed, &check)?;
        println!(
            "seed {seed}: {} coordinates ({} refined), max relative error {:.3e} at {}, {} over tolerance",
            r.report.checked,
            r.report.refined,
            r.report.max_rel_error,
            r.worst().unwrap_or_default(),
            r.report.failures.len()
        );
        for f in r.report.failures.iter().take(5) {
            println!(
                "  {}[{}]: tape {:.6e}, finite difference {:.6e}",
                r.names[f.input], f.index, f.analytic, f.numeric
            );
        }
        worst = worst.max(r.report.max_rel_error);
        failed += r.report.failures.len();
    }
    println!("max relative error {worst:.3e} (tolerance {GRAD_CHECK_TOLERANCE:e})");
    if failed > 0 {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "gradient check failed on {failed} coordinates"
        )));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RfArgs {
    #[arg(long)]
    depth: Option<usize>,
    /// Tile side to compare the receptive field with.
    #[arg(long)]
    tile: Option<usize>,
}

pub fn rf(args: RfArgs, file: &FileConfig) -> CliResult<()> {
    let depth = file.pick(args.depth, "depth")?.unwrap_or(7);
    let tile = file.pick(args.tile, "tile")?.unwrap_or(640);
    let config = ModelConfig::full().with_depth(depth);
    config.validate().map_err(|e| usage(e.to_string()))?;
    if depth > 16 {
        return Err(usage("--depth above 16 is not supported by the exact calculator"));
    }
    let exact = receptive_field(&config);
    let recurrence = receptive_field_recurrence(&config);
    println!("depth {depth}: receptive field {exact}x{exact} pixels");
    println!("deepest-path recurrence r += (k - 1) * jump: {recurrence}x{recurrence} pixels");
    let relation = if exact >= tile {
        "at least as wide as"
    } else {
        "narrower than"
    };
    println!("tile {tile}x{tile}: the receptive field is {relation} the tile");
    if exact == CLAIMED_RECEPTIVE_FIELD {
        println!("claimed {CLAIMED_RECEPTIVE_FIELD}x{CLAIMED_RECEPTIVE_FIELD}: match");
    } else {
        println!(
            "claimed {CLAIMED_RECEPTIVE_FIELD}x{CLAIMED_RECEPTIVE_FIELD}: mismatch (computed {exact}, off by {:+})",
            exact as i64 - CLAIMED_RECEPTIVE_FIELD as i64
        );
    }
    Ok(())
}

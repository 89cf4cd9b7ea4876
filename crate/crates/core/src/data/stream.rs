//! Epochs of augmented both-class crops, reproducible from `(seed, epoch)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{augment, crop_both_classes, AugmentSpec, LabeledImage, TileSample, DEFAULT_MAX_TRIES};
use crate::error::{Error, Result};

/// One epoch worth of training crops.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub samples: Vec<TileSample>,
    /// Crops abandoned because no origin passed the class rule.
    pub skipped: usize,
}

/// Independent random stream for `(epoch, slot)`; `slot` is an image index
/// or `u32::MAX` for the shuffle.
fn rng_for(seed: u64, epoch: u64, slot: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | u64::from(slot));
    rng
}

/// Augment every image once, draw `samples_per_image` crops from each and
/// shuffle the result. Output does not depend on the worker count.
pub fn build_training_set(
    images: &[LabeledImage],
    tile: usize,
    samples_per_image: usize,
    spec: &AugmentSpec,
    min_fraction: f64,
    seed: u64,
    epoch: u64,
) -> Result<TrainingSet> {
    if images.is_empty() {
        return Err(Error::invalid("training set", "manifest lists no images"));
    }
    let per_image: Vec<Result<(Vec<TileSample>, usize)>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = rng_for(seed, epoch, i as u32);
            let spec = spec.keeping_extent(img.width(), img.height(), tile);
            let img = augment(img, &spec, &mut rng);
            let mut samples = Vec::with_capacity(samples_per_image);
            let mut skipped = 0;
            for _ in 0..samples_per_image {
                match crop_both_classes(&img, i, tile, min_fraction, &mut rng, DEFAULT_MAX_TRIES)? {
                    Some(s) => samples.push(s),
                    None => skipped += 1,
                }
            }
            Ok((samples, skipped))
        })
        .collect();
    let mut set = TrainingSet {
        samples: Vec::with_capacity(images.len() * samples_per_image),
        skipped: 0,
    };
    for r in per_image {
        let (samples, skipped) = r?;
        set.samples.extend(samples);
        set.skipped += skipped;
    }
    set.samples.shuffle(&mut rng_for(seed, epoch, u32::MAX));
    if set.skipped > 0 {
        log::info!("epoch {epoch}: skipped {} crops without both classes", set.skipped);
    }
    Ok(set)
}

/// Endless sequence of crops, regenerating a fresh epoch when one runs out.
/// Position `k` of the sequence depends only on the constructor arguments.
pub struct SampleStream {
    images: Vec<LabeledImage>,
    tile: usize,
    samples_per_image: usize,
    spec: AugmentSpec,
    min_fraction: f64,
    seed: u64,
    next_epoch: u64,
    buffer: std::vec::IntoIter<TileSample>,
    consumed: u64,
}

impl SampleStream {
    pub fn new(
        images: Vec<LabeledImage>,
        tile: usize,
        samples_per_image: usize,
        spec: AugmentSpec,
        min_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("training set", "manifest lists no images"));
        }
        if samples_per_image == 0 {
            return Err(Error::invalid("training set", "samples_per_image must be positive"));
        }
        Ok(SampleStream {
            images,
            tile,
            samples_per_image,
            spec,
            min_fraction,
            seed,
            next_epoch: 0,
            buffer: Vec::new().into_iter(),
            consumed: 0,
        })
    }

    /// Number of crops handed out so far.
    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    fn refill(&mut self) -> Result<()> {
        let set = build_training_set(
            &self.images,
            self.tile,
            self.samples_per_image,
            &self.spec,
            self.min_fraction,
            self.seed,
            self.next_epoch,
        )?;
        if set.samples.is_empty() {
            return Err(Error::invalid(
                "training set",
                format!("epoch {} produced no crop containing both classes", self.next_epoch),
            ));
        }
        self.next_epoch += 1;
        self.buffer = set.samples.into_iter();
        Ok(())
    }

    pub fn next_sample(&mut self) -> Result<TileSample> {
        loop {
            if let Some(s) = self.buffer.next() {
                self.consumed += 1;
                return Ok(s);
            }
            self.refill()?;
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<TileSample>> {
        (0..size).map(|_| self.next_sample()).collect()
    }

    /// Discard `n` crops, as when resuming part-way through training.
    pub fn skip(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.next_sample()?;
        }
        Ok(())
    }
}

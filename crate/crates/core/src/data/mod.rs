//! Labeled rasters, augmentation, both-class cropping and the synthetic
//! coastline generator.

mod augment;
mod manifest;
mod stream;
mod synth;

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use augment::{augment, AugmentSpec, Transform};
pub use manifest::{DatasetManifest, Split};
pub use stream::{build_training_set, SampleStream, TrainingSet};
pub use synth::{synth_generate, SynthParams, SYNTH_PARAMS};

/// Mask value for sea pixels.
pub const SEA: u8 = 255;
/// Mask value for land pixels.
pub const LAND: u8 = 0;
/// Class id of sea in targets and probability maps.
pub const SEA_CLASS: u8 = 1;
/// Class id of land.
pub const LAND_CLASS: u8 = 0;
/// Source mask values at or above this become sea.
pub const MASK_THRESHOLD: u8 = 128;
/// Default share of the tile each class must occupy.
pub const DEFAULT_MIN_FRACTION: f64 = 0.05;
/// Default number of random origins tried before an image is skipped.
pub const DEFAULT_MAX_TRIES: usize = 100;

/// An RGB raster and its binary sea/land mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    rgb: RgbImage,
    mask: GrayImage,
}

impl LabeledImage {
    /// Pairs `rgb` with `mask`; extents must agree and the mask must already
    /// be binary.
    pub fn new(rgb: RgbImage, mask: GrayImage) -> Result<Self> {
        if rgb.dimensions() != mask.dimensions() {
            let (a, b) = (rgb.dimensions(), mask.dimensions());
            return Err(Error::invalid(
                "labeled image",
                format!("image is {}x{} but mask is {}x{}", a.0, a.1, b.0, b.1),
            ));
        }
        if let Some(v) = mask.as_raw().iter().find(|&&v| v != SEA && v != LAND) {
            return Err(Error::invalid(
                "labeled image",
                format!("mask value {v} is not 0 or 255"),
            ));
        }
        Ok(LabeledImage { rgb, mask })
    }

    pub fn rgb(&self) -> &RgbImage {
        &self.rgb
    }

    pub fn mask(&self) -> &GrayImage {
        &self.mask
    }

    pub fn into_parts(self) -> (RgbImage, GrayImage) {
        (self.rgb, self.mask)
    }

    pub fn width(&self) -> usize {
        self.rgb.width() as usize
    }

    pub fn height(&self) -> usize {
        self.rgb.height() as usize
    }

    /// Share of sea pixels in the mask.
    pub fn sea_fraction(&self) -> f64 {
        let sea = self.mask.as_raw().iter().filter(|&&v| v == SEA).count();
        sea as f64 / self.mask.as_raw().len().max(1) as f64
    }

    pub fn save(&self, image_path: &Path, mask_path: &Path) -> Result<()> {
        let wrap = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Image { path, source }
        };
        self.rgb.save(image_path).map_err(wrap(image_path))?;
        self.mask.save(mask_path).map_err(wrap(mask_path))?;
        Ok(())
    }
}

/// Map any gray level to the binary mask alphabet.
pub fn binarize_mask(mut mask: GrayImage) -> GrayImage {
    for v in mask.iter_mut() {
        *v = if *v >= MASK_THRESHOLD { SEA } else { LAND };
    }
    mask
}

/// Decode an RGB image and its mask. Anti-aliased masks are thresholded.
pub fn load_labeled(image_path: &Path, mask_path: &Path) -> Result<LabeledImage> {
    let open = |path: &Path| {
        image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    };
    let rgb = open(image_path)?.to_rgb8();
    let mask = binarize_mask(open(mask_path)?.to_luma8());
    if rgb.dimensions() != mask.dimensions() {
        return Err(Error::invalid(
            "load_labeled",
            format!(
                "{} is {}x{} but {} is {}x{}",
                image_path.display(),
                rgb.width(),
                rgb.height(),
                mask_path.display(),
                mask.width(),
                mask.height()
            ),
        ));
    }
    LabeledImage::new(rgb, mask)
}

/// Convert an RGB raster to a `(1, 3, H, W)` tensor scaled to `[0, 1]`.
pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor<f32> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("length matches shape")
}

/// Class ids (1 = sea, 0 = land) of a binary mask, row-major.
pub fn mask_to_targets(mask: &GrayImage) -> Vec<u8> {
    mask.as_raw().iter().map(|&v| u8::from(v == SEA)).collect()
}

/// One training crop.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSample {
    /// `(1, 3, T, T)` in `[0, 1]`.
    pub tile: Tensor<f32>,
    /// `T * T` class ids, row-major.
    pub target: Vec<u8>,
    /// Index of the source image in its manifest.
    pub source_id: usize,
    /// Top-left corner `(y, x)` of the crop in the augmented source.
    pub origin: (usize, usize),
}

/// Both classes cover at least `min_fraction` of `target`.
pub fn has_both_classes(target: &[u8], min_fraction: f64) -> bool {
    let sea = target.iter().filter(|&&c| c == SEA_CLASS).count();
    both_classes(sea, target.len(), min_fraction)
}

fn both_classes(sea: usize, total: usize, min_fraction: f64) -> bool {
    let need = min_fraction * total as f64;
    sea > 0 && sea < total && sea as f64 >= need && (total - sea) as f64 >= need
}

/// Number of sea pixels in the `tile x tile` window at `(y, x)`.
fn window_sea(mask: &GrayImage, y: usize, x: usize, tile: usize) -> usize {
    let w = mask.width() as usize;
    let raw = mask.as_raw();
    (y..y + tile)
        .map(|r| raw[r * w + x..r * w + x + tile].iter().filter(|&&v| v == SEA).count())
        .sum()
}

/// Whether the crop at `(y, x)` satisfies the both-classes rule.
pub fn crop_accepted(img: &LabeledImage, y: usize, x: usize, tile: usize, min_fraction: f64) -> bool {
    both_classes(window_sea(&img.mask, y, x, tile), tile * tile, min_fraction)
}

/// Extract the crop at `(y, x)` without checking the class rule.
pub fn crop_at(img: &LabeledImage, source_id: usize, y: usize, x: usize, tile: usize) -> Result<TileSample> {
    if y + tile > img.height() || x + tile > img.width() {
        return Err(Error::invalid(
            "crop",
            format!(
                "{tile}x{tile} window at ({y}, {x}) leaves the {}x{} image",
                img.width(),
                img.height()
            ),
        ));
    }
    let w = img.width();
    let mut tile_data = vec![0f32; 3 * tile * tile];
    let mut target = Vec::with_capacity(tile * tile);
    let rgb = img.rgb.as_raw();
    let mask = img.mask.as_raw();
    for r in 0..tile {
        for c in 0..tile {
            let src = (y + r) * w + x + c;
            for ch in 0..3 {
                tile_data[(ch * tile + r) * tile + c] = f32::from(rgb[3 * src + ch]) / 255.0;
            }
            target.push(u8::from(mask[src] == SEA));
        }
    }
    Ok(TileSample {
        tile: Tensor::from_vec(Shape::new(1, 3, tile, tile), tile_data)?,
        target,
        source_id,
        origin: (y, x),
    })
}

/// Uniformly random `tile x tile` crop in which both classes cover at least
/// `min_fraction`, or `None` after `max_tries` rejected origins.
pub fn crop_both_classes<R: Rng + ?Sized>(
    img: &LabeledImage,
    source_id: usize,
    tile: usize,
    min_fraction: f64,
    rng: &mut R,
    max_tries: usize,
) -> Result<Option<TileSample>> {
    if tile == 0 || img.height() < tile || img.width() < tile {
        return Err(Error::invalid(
            "crop_both_classes",
            format!(
                "image {}x{} is smaller than the {tile}x{tile} tile",
                img.width(),
                img.height()
            ),
        ));
    }
    for _ in 0..max_tries {
        let y = rng.random_range(0..=img.height() - tile);
        let x = rng.random_range(0..=img.width() - tile);
        if crop_accepted(img, y, x, tile, min_fraction) {
            return crop_at(img, source_id, y, x, tile).map(Some);
        }
    }
    Ok(None)
}

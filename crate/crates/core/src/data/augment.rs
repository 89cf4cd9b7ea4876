use image::imageops::{self, FilterType};
use rand::Rng;

use super::LabeledImage;

/// Which random transforms [`augment`] may draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub flips: bool,
    pub rotations: bool,
    /// Inclusive range of the isotropic scale factor.
    pub scale: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flips: true,
            rotations: true,
            scale: (0.5, 2.0),
        }
    }
}

impl AugmentSpec {
    /// No geometric change at all.
    pub fn identity() -> Self {
        AugmentSpec {
            flips: false,
            rotations: false,
            scale: (1.0, 1.0),
        }
    }

    /// Raise the lower scale bound so a `width x height` image keeps both
    /// extents at least `min_extent` after scaling.
    pub fn keeping_extent(mut self, width: usize, height: usize, min_extent: usize) -> Self {
        let floor = min_extent as f64 / width.min(height).max(1) as f64;
        self.scale.0 = self.scale.0.max(floor);
        self.scale.1 = self.scale.1.max(self.scale.0);
        self
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        let (lo, hi) = self.scale;
        Transform {
            flip_h: self.flips && rng.random_bool(0.5),
            flip_v: self.flips && rng.random_bool(0.5),
            quarter_turns: if self.rotations { rng.random_range(0..4) } else { 0 },
            scale: if hi > lo { rng.random_range(lo..=hi) } else { lo },
        }
    }
}

/// One concrete geometric transform: flips, then clockwise quarter turns,
/// then scaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
    pub scale: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            flip_h: false,
            flip_v: false,
            quarter_turns: 0,
            scale: 1.0,
        }
    }

    pub fn rotate(quarter_turns: u8) -> Self {
        Transform {
            quarter_turns,
            ..Self::identity()
        }
    }

    pub fn scaled(scale: f64) -> Self {
        Transform {
            scale,
            ..Self::identity()
        }
    }

    /// Apply to image and mask together. RGB is resampled bilinearly, the
    /// mask by nearest neighbour so it stays binary.
    pub fn apply(&self, img: &LabeledImage) -> LabeledImage {
        let (mut rgb, mut mask) = (img.rgb().clone(), img.mask().clone());
        if self.flip_h {
            imageops::flip_horizontal_in_place(&mut rgb);
            imageops::flip_horizontal_in_place(&mut mask);
        }
        if self.flip_v {
            imageops::flip_vertical_in_place(&mut rgb);
            imageops::flip_vertical_in_place(&mut mask);
        }
        match self.quarter_turns % 4 {
            1 => (rgb, mask) = (imageops::rotate90(&rgb), imageops::rotate90(&mask)),
            2 => {
                imageops::rotate180_in_place(&mut rgb);
                imageops::rotate180_in_place(&mut mask);
            }
            3 => (rgb, mask) = (imageops::rotate270(&rgb), imageops::rotate270(&mask)),
            _ => {}
        }
        if self.scale != 1.0 {
            let w = ((rgb.width() as f64 * self.scale).round() as u32).max(1);
            let h = ((rgb.height() as f64 * self.scale).round() as u32).max(1);
            rgb = imageops::resize(&rgb, w, h, FilterType::Triangle);
            mask = imageops::resize(&mask, w, h, FilterType::Nearest);
        }
        LabeledImage::new(rgb, mask).expect("geometric transforms keep extents paired and masks binary")
    }
}

/// Draw a transform from `spec` and apply it to image and mask alike.
pub fn augment<R: Rng + ?Sized>(img: &LabeledImage, spec: &AugmentSpec, rng: &mut R) -> LabeledImage {
    spec.sample(rng).apply(img)
}

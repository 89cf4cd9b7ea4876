//! Sliding-window prediction over images of any size: mirrored borders,
//! overlapping tiles and Gaussian-weighted blending of their probabilities.

use image::GrayImage;

use crate::data::{LAND, SEA, SEA_CLASS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Shape, Tensor};

/// Tile origins and padding for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub tile: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Padding as `(top, bottom, left, right)`.
    pub padding: (usize, usize, usize, usize),
    /// `(y, x)` of each tile in padded coordinates, bottom row first, each
    /// row left to right.
    pub origins: Vec<(usize, usize)>,
}

impl TilePlan {
    pub fn padded_height(&self) -> usize {
        self.height + self.padding.0 + self.padding.1
    }

    pub fn padded_width(&self) -> usize {
        self.width + self.padding.2 + self.padding.3
    }

    /// How many tiles cover each pixel of the original image, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut count = vec![0u32; self.height * self.width];
        let (top, left) = (self.padding.0, self.padding.2);
        for &(oy, ox) in &self.origins {
            for y in oy.max(top)..(oy + self.tile).min(top + self.height) {
                for x in ox.max(left)..(ox + self.tile).min(left + self.width) {
                    count[(y - top) * self.width + (x - left)] += 1;
                }
            }
        }
        count
    }
}

/// Padded extent and tile starts along one axis.
fn plan_axis(len: usize, tile: usize, stride: usize) -> (usize, Vec<usize>) {
    let steps = if len <= tile { 0 } else { (len - tile).div_ceil(stride) };
    let padded = tile + steps * stride;
    (padded - len, (0..=steps).map(|k| k * stride).collect())
}

/// Cover an `h x w` image with `t x t` tiles at stride `s`. The padding makes
/// `padded - t` a multiple of `s` and is split as evenly as possible, the
/// extra pixel going to the bottom or right edge.
pub fn plan_tiles(h: usize, w: usize, t: usize, s: usize) -> Result<TilePlan> {
    if s == 0 || t < s || h == 0 || w == 0 {
        return Err(Error::invalid(
            "plan_tiles",
            format!("need t >= s >= 1 and a non-empty image, got {h}x{w}, t = {t}, s = {s}"),
        ));
    }
    let (pad_y, ys) = plan_axis(h, t, s);
    let (pad_x, xs) = plan_axis(w, t, s);
    let origins = ys.iter().rev().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    Ok(TilePlan {
        tile: t,
        stride: s,
        height: h,
        width: w,
        padding: (pad_y / 2, pad_y - pad_y / 2, pad_x / 2, pad_x - pad_x / 2),
        origins,
    })
}

/// Reflected index: `-1 -> 1`, `n -> n - 2`, no edge repetition.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Reflect-pad every plane of `image` by `(top, bottom, left, right)`.
pub fn mirror_pad<T: Scalar>(image: &Tensor<T>, padding: (usize, usize, usize, usize)) -> Result<Tensor<T>> {
    let s = image.shape();
    let (top, bottom, left, right) = padding;
    if top.max(bottom) >= s.h().max(1) || left.max(right) >= s.w().max(1) {
        return Err(Error::invalid(
            "mirror_pad",
            format!("padding {padding:?} needs an image larger than {s} to reflect"),
        ));
    }
    let (ph, pw) = (s.h() + top + bottom, s.w() + left + right);
    let cols: Vec<usize> = (0..pw).map(|x| reflect(x as isize - left as isize, s.w())).collect();
    let mut out = Vec::with_capacity(s.n() * s.c() * ph * pw);
    for plane in image.data().chunks(s.plane().max(1)) {
        for y in 0..ph {
            let row = &plane[reflect(y as isize - top as isize, s.h()) * s.w()..][..s.w()];
            out.extend(cols.iter().map(|&x| row[x]));
        }
    }
    Tensor::from_vec(Shape::new(s.n(), s.c(), ph, pw), out)
}

/// Centre-peaked blending weights for one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub size: usize,
    pub sigma: f64,
    /// Row-major `size x size` weights.
    pub data: Vec<f64>,
}

impl WeightMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.size + x]
    }
}

/// `exp(-|p - c|^2 / (2 sigma^2))` around `c = ((t - 1) / 2, (t - 1) / 2)`.
pub fn gaussian_weights(t: usize, sigma: f64) -> Result<WeightMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(
            "gaussian_weights",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    let c = (t as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(t * t);
    for y in 0..t {
        for x in 0..t {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            data.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(WeightMap { size: t, sigma, data })
}

/// Tile size, stride and blending width for [`predict_image`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileOptions {
    pub tile: usize,
    pub stride: usize,
    pub sigma: f64,
    /// Tiles evaluated together in one forward pass.
    pub batch: usize,
}

impl TileOptions {
    /// Half-tile stride and `sigma = tile / 6`.
    pub fn new(tile: usize) -> Self {
        TileOptions {
            tile,
            stride: (tile / 2).max(1),
            sigma: tile as f64 / 6.0,
            batch: 8,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }
}

/// Blend per-tile probability maps `(1, C, t, t)` laid out by `plan` into a
/// `(1, C, H, W)` map. Accumulates in `f64` in plan order.
pub fn stitch(plan: &TilePlan, weights: &WeightMap, tiles: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    if tiles.len() != plan.origins.len() || weights.size != plan.tile {
        return Err(Error::invalid(
            "stitch",
            format!(
                "{} tiles and a {0}-pixel weight map for a plan of {} tiles of {}",
                tiles.len(),
                plan.origins.len(),
                plan.tile
            ),
        ));
    }
    let c = tiles.first().map_or(2, |t| t.shape().c());
    let (h, w, t) = (plan.height, plan.width, plan.tile);
    let (top, left) = (plan.padding.0, plan.padding.2);
    let mut num = vec![0f64; c * h * w];
    let mut den = vec![0f64; h * w];
    for (&(oy, ox), tile) in plan.origins.iter().zip(tiles) {
        let expected = Shape::new(1, c, t, t);
        if tile.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "stitch",
                left: expected,
                right: tile.shape(),
            });
        }
        let data = tile.data();
        for y in oy.max(top)..(oy + t).min(top + h) {
            for x in ox.max(left)..(ox + t).min(left + w) {
                let (ty, tx) = (y - oy, x - ox);
                let wt = weights.at(ty, tx);
                let p = (y - top) * w + (x - left);
                den[p] += wt;
                for ch in 0..c {
                    num[ch * h * w + p] += wt * f64::from(data[(ch * t + ty) * t + tx]);
                }
            }
        }
    }
    let out = num
        .iter()
        .enumerate()
        .map(|(i, v)| (v / den[i % (h * w)]) as f32)
        .collect();
    Tensor::from_vec(Shape::new(1, c, h, w), out)
}

/// Per-pixel class probabilities `(1, classes, H, W)` for an image
/// `(1, 3, H, W)` of any size.
pub fn predict_image(model: &Model<f32>, image: &Tensor<f32>, opts: &TileOptions) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.n() != 1 {
        return Err(Error::invalid("predict_image", format!("expected one image, got {s}")));
    }
    let m = model.config().required_multiple();
    if opts.tile == 0 || !opts.tile.is_multiple_of(m) {
        return Err(Error::invalid(
            "predict_image",
            format!(
                "tile {} must be a positive multiple of {m} for depth {}",
                opts.tile,
                model.config().depth
            ),
        ));
    }
    let plan = plan_tiles(s.h(), s.w(), opts.tile, opts.stride)?;
    let weights = gaussian_weights(opts.tile, opts.sigma)?;
    let padded = mirror_pad(image, plan.padding)?;
    let mut probs = Vec::with_capacity(plan.origins.len());
    for chunk in plan.origins.chunks(opts.batch.max(1)) {
        let crops: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|&(y, x)| padded.crop(y, x, opts.tile, opts.tile))
            .collect::<Result<_>>()?;
        let out = model.predict(&Tensor::stack(&crops)?)?;
        for i in 0..chunk.len() {
            probs.push(out.slice_batch(i)?);
        }
    }
    stitch(&plan, &weights, &probs)
}

/// Per-pixel argmax as a mask (255 sea, 0 land); a tie goes to land.
pub fn binarize(probs: &Tensor<f32>) -> Result<GrayImage> {
    let s = probs.shape();
    if s.n() != 1 || s.c() != 2 {
        return Err(Error::invalid("binarize", format!("expected (1, 2, H, W), got {s}")));
    }
    let plane = s.plane();
    let (land, sea) = probs.data().split_at(plane);
    let px = land
        .iter()
        .zip(sea)
        .map(|(l, s)| if s > l { SEA } else { LAND })
        .collect();
    Ok(GrayImage::from_raw(s.w() as u32, s.h() as u32, px).expect("plane matches extents"))
}

/// Per-pixel class ids (1 = sea); ties go to land.
pub fn argmax_classes(probs: &Tensor<f32>) -> Vec<u8> {
    let s = probs.shape();
    let mut out = Vec::with_capacity(s.n() * s.plane());
    for item in probs.data().chunks(s.c() * s.plane()) {
        let (land, sea) = item.split_at(s.plane());
        out.extend(land.iter().zip(sea).map(|(l, s)| if s > l { SEA_CLASS } else { 0 }));
    }
    out
}

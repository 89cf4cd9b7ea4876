//! Procedural coastlines: a thresholded value-noise field gives the mask, and
//! the two classes are painted with different colours and textures under a
//! shared illumination gradient.

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledImage, LAND, SEA};
use crate::error::{Error, Result};

/// Fixed generator constants. They are echoed into manifest headers so a
/// synthetic data set can be regenerated exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub octaves: u32,
    pub persistence: f64,
    /// Lattice spacing of the coarsest octave, in pixels.
    pub base_cell: usize,
    /// Range the per-image sea fraction is drawn from.
    pub sea_fraction: (f64, f64),
    pub sea_rgb: [f64; 3],
    pub land_rgb: [f64; 3],
    /// Standard deviation of per-pixel noise on sea.
    pub sea_speckle: f64,
    /// Standard deviation of per-pixel noise on land.
    pub land_speckle: f64,
    /// Amplitude of the wave pattern on sea.
    pub wave_amplitude: f64,
    /// Relative strength of the land's low-frequency texture.
    pub land_texture: f64,
    /// Peak relative brightness change of the global illumination ramp.
    pub illumination: f64,
    pub min_extent: usize,
}

pub const SYNTH_PARAMS: SynthParams = SynthParams {
    octaves: 4,
    persistence: 0.5,
    base_cell: 64,
    sea_fraction: (0.4, 0.6),
    sea_rgb: [28.0, 92.0, 128.0],
    land_rgb: [112.0, 108.0, 64.0],
    sea_speckle: 10.0,
    land_speckle: 22.0,
    wave_amplitude: 8.0,
    land_texture: 0.25,
    illumination: 0.15,
    min_extent: 64,
};

impl SynthParams {
    /// `key=value` lines describing the generator.
    pub fn describe(&self) -> Vec<String> {
        vec![
            format!(
                "octaves={} persistence={} base_cell={}",
                self.octaves, self.persistence, self.base_cell
            ),
            format!("sea_fraction={}..{}", self.sea_fraction.0, self.sea_fraction.1),
            format!("sea_rgb={:?} land_rgb={:?}", self.sea_rgb, self.land_rgb),
            format!(
                "sea_speckle={} land_speckle={} wave_amplitude={} land_texture={} illumination={}",
                self.sea_speckle, self.land_speckle, self.wave_amplitude, self.land_texture, self.illumination
            ),
        ]
    }
}

/// Smoothed lattice noise in `[0, 1)`, one octave.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let cell = cell.max(1);
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (gy, ty) = (y / cell, smooth((y % cell) as f64 / cell as f64));
        for x in 0..w {
            let (gx, tx) = (x / cell, smooth((x % cell) as f64 / cell as f64));
            let at = |r: usize, c: usize| lattice[r * gw + c];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bottom = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn fractal_noise(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    base_cell: usize,
    octaves: u32,
    persistence: f64,
) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    let mut amplitude = 1.0;
    for octave in 0..octaves {
        let layer = value_noise(rng, h, w, base_cell >> octave);
        for (f, v) in field.iter_mut().zip(layer) {
            *f += amplitude * v;
        }
        amplitude *= persistence;
    }
    field
}

/// Deterministic synthetic coastline of `height x width` pixels.
pub fn synth_generate(seed: u64, height: usize, width: usize) -> Result<LabeledImage> {
    synth_with(&SYNTH_PARAMS, seed, height, width)
}

pub fn synth_with(p: &SynthParams, seed: u64, height: usize, width: usize) -> Result<LabeledImage> {
    if height < p.min_extent || width < p.min_extent {
        return Err(Error::invalid(
            "synth",
            format!("{width}x{height} is below the {0}x{0} minimum", p.min_extent),
        ));
    }
    let (h, w) = (height, width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = fractal_noise(&mut rng, h, w, p.base_cell, p.octaves, p.persistence);

    let target = rng.random_range(p.sea_fraction.0..=p.sea_fraction.1);
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[((target * (h * w) as f64) as usize).min(h * w - 1)];
    let sea: Vec<bool> = field.iter().map(|&v| v < threshold).collect();

    let texture = fractal_noise(&mut rng, h, w, 16, 2, 0.5);
    let wave_angle = rng.random_range(0.0..std::f64::consts::PI);
    let wave_length = rng.random_range(4.0..9.0);
    let light_angle = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let sea_noise = Normal::new(0.0, p.sea_speckle).expect("finite std");
    let land_noise = Normal::new(0.0, p.land_speckle).expect("finite std");

    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let half_diag = (cx * cx + cy * cy).sqrt();
    let (ldx, ldy) = (light_angle.cos(), light_angle.sin());
    let (wdx, wdy) = (wave_angle.cos(), wave_angle.sin());
    let mut rgb = RgbImage::new(w as u32, h as u32);
    let mut mask = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (fx, fy) = (x as f64, y as f64);
            let light = 1.0 + p.illumination * ((fx - cx) * ldx + (fy - cy) * ldy) / half_diag;
            let px: [f64; 3] = if sea[i] {
                let phase = (fx * wdx + fy * wdy) * std::f64::consts::TAU / wave_length;
                let wave = p.wave_amplitude * phase.sin();
                let n = sea_noise.sample(&mut rng);
                p.sea_rgb.map(|c| c + wave + n)
            } else {
                let shade = 1.0 + p.land_texture * (2.0 * texture[i] / 1.5 - 1.0);
                let n = land_noise.sample(&mut rng);
                p.land_rgb.map(|c| c * shade + n)
            };
            rgb.put_pixel(
                x as u32,
                y as u32,
                Rgb(px.map(|c| (c * light).round().clamp(0.0, 255.0) as u8)),
            );
            mask.put_pixel(x as u32, y as u32, Luma([if sea[i] { SEA } else { LAND }]));
        }
    }
    LabeledImage::new(rgb, mask)
}

//! Theoretical receptive field of one output pixel, measured in input pixels
//! along one axis.
//!
//! Two calculators are provided. [`receptive_field_recurrence`] is the usual
//! `r += (k - 1) * j` recurrence along the deepest path. [`receptive_field`]
//! back-propagates an exact pixel interval through every path of the network
//! (encoder skips included) and takes the worst case over output alignments,
//! which pooling followed by nearest upsampling makes position dependent.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Shape, Tensor};
use crate::Tape;

/// Layer kinds understood by [`chain_receptive_field`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfLayer {
    /// Stride-1 convolution with a centred odd kernel.
    Conv { kernel: usize },
    /// 2x2, stride-2 max pooling.
    Pool,
    /// Nearest-neighbour x2 upsampling.
    Upsample,
}

/// Closed pixel interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Span {
    lo: i64,
    hi: i64,
}

impl Span {
    fn point(p: i64) -> Self {
        Span { lo: p, hi: p }
    }

    fn len(self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    fn hull(self, other: Span) -> Span {
        Span {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    fn conv(self, kernel: usize) -> Span {
        let r = (kernel as i64 - 1) / 2;
        Span {
            lo: self.lo - r,
            hi: self.hi + r,
        }
    }

    /// Input span of a 2x2/2 max pool whose outputs cover `self`.
    fn pool(self) -> Span {
        Span {
            lo: 2 * self.lo,
            hi: 2 * self.hi + 1,
        }
    }

    /// Source span of a nearest x2 upsample whose outputs cover `self`.
    fn upsample(self) -> Span {
        Span {
            lo: self.lo.div_euclid(2),
            hi: self.hi.div_euclid(2),
        }
    }

    fn back(self, layer: RfLayer) -> Span {
        match layer {
            RfLayer::Conv { kernel } => self.conv(kernel),
            RfLayer::Pool => self.pool(),
            RfLayer::Upsample => self.upsample(),
        }
    }
}

/// Exact receptive field of a plain feed-forward chain, worst case over
/// output alignments.
pub fn chain_receptive_field(layers: &[RfLayer]) -> usize {
    let pools = layers.iter().filter(|l| **l == RfLayer::Pool).count() as u32;
    (0..1i64 << pools.min(20))
        .map(|p| layers.iter().rev().fold(Span::point(p), |s, &l| s.back(l)).len())
        .max()
        .unwrap_or(1)
}

/// Textbook recurrence over the deepest path: each layer adds
/// `(kernel - 1) * jump`; pooling doubles the jump and upsampling halves it.
pub fn receptive_field_recurrence(config: &ModelConfig) -> usize {
    let mut r = 1usize;
    let mut jump = 1usize;
    let conv = |r: &mut usize, jump: usize, k: usize| *r += (k - 1) * jump;
    for _ in 0..3 {
        conv(&mut r, jump, 3);
    }
    r += jump;
    jump *= 2;
    for _ in 1..config.depth {
        conv(&mut r, jump, 3);
        conv(&mut r, jump, 3);
        r += jump;
        jump *= 2;
    }
    for _ in 0..config.depth {
        jump /= 2;
        conv(&mut r, jump, 3);
        conv(&mut r, jump, 3);
    }
    conv(&mut r, jump, 1);
    r
}

struct Network {
    depth: usize,
}

impl Network {
    fn stem(&self, s: Span) -> Span {
        s.conv(3).conv(3).conv(3)
    }

    /// Input span feeding the positions `s` of encoder output `level`.
    fn encoder(&self, level: usize, s: Span) -> Span {
        if level == 0 {
            return self.stem(s);
        }
        // the shortcut keeps `s` itself, which the convolutions already cover
        let t = s.conv(3).conv(3).hull(s);
        self.encoder(level - 1, t.pool())
    }

    /// Input span feeding the positions `s` of the decoder output at `level`.
    fn decoder(&self, level: usize, s: Span) -> Span {
        let c = s.conv(3).conv(3);
        let via_skip = self.encoder(level, c);
        let prev = c.upsample();
        let via_prev = if level + 1 == self.depth {
            self.encoder(self.depth - 1, prev.pool())
        } else {
            self.decoder(level + 1, prev)
        };
        via_skip.hull(via_prev)
    }
}

/// Exact receptive field of the full network (worst-aligned output pixel).
pub fn receptive_field(config: &ModelConfig) -> usize {
    let net = Network { depth: config.depth };
    (0..1i64 << config.depth.min(20))
        .map(|p| net.decoder(0, Span::point(p)).len())
        .max()
        .unwrap_or(1)
}

/// Receptive-field side length the full-resolution network is claimed to have.
pub const CLAIMED_RECEPTIVE_FIELD: usize = 4220;

const IMPULSE_HEIGHT: usize = 8;
const IMPULSE_ROW: usize = 4;
/// Output pixels measured on each side of the centre column.
const IMPULSE_PROBES: usize = 32;

/// Network of the given depth with every weight 1 and every bias 0, so that
/// no path cancels another and every ReLU stays open.
fn positive_model(depth: usize) -> Result<Model<f64>> {
    let config = ModelConfig::full().with_depth(depth).with_channels(2, 1);
    let mut model = Model::<f64>::constant(config, 1.0)?;
    let specs = model.specs();
    for (spec, p) in specs.iter().zip(model.params_mut()) {
        if spec.name.ends_with(".bias") {
            p.data_mut().fill(0.0);
        }
    }
    Ok(model)
}

fn logit_row(model: &Model<f64>, width: usize, impulse: Option<usize>) -> Result<Vec<f64>> {
    let mut image = Tensor::<f64>::zeros(Shape::new(1, 3, IMPULSE_HEIGHT, width));
    if let Some(x) = impulse {
        for c in 0..3 {
            image.data_mut()[(c * IMPULSE_HEIGHT + IMPULSE_ROW) * width + x] = 1.0;
        }
    }
    let mut tape = Tape::inference();
    let input = tape.leaf(image);
    let trace = model.forward_on(&mut tape, input, false)?;
    let logits = tape.value(trace.logits);
    Ok((0..width).map(|x| logits.at(0, 0, IMPULSE_ROW, x)).collect())
}

/// Horizontal receptive field measured by brute force: a positive network
/// sees one impulse at a time on a zero `8 x width` image, and for every
/// output pixel the span of impulse columns that move its logit is
/// recorded. Returns the widest span over the 64 central output pixels.
/// Independent of [`receptive_field`], which it is meant to check.
pub fn impulse_receptive_field(depth: usize, width: usize) -> Result<usize> {
    let model = positive_model(depth)?;
    let m = model.config().required_multiple();
    if !width.is_multiple_of(m) || width < 2 * IMPULSE_PROBES + 2 {
        return Err(Error::invalid(
            "impulse_receptive_field",
            format!(
                "width {width} must be a multiple of {m} and above {}",
                2 * IMPULSE_PROBES + 1
            ),
        ));
    }
    let base = logit_row(&model, width, None)?;
    let mut lo = vec![usize::MAX; width];
    let mut hi = vec![0usize; width];
    for q in 0..width {
        let moved = logit_row(&model, width, Some(q))?;
        for o in 0..width {
            if moved[o] != base[o] {
                lo[o] = lo[o].min(q);
                hi[o] = hi[o].max(q);
            }
        }
    }
    let mut widest = 0;
    for o in width / 2 - IMPULSE_PROBES..width / 2 + IMPULSE_PROBES {
        if lo[o] == 0 || hi[o] == width - 1 {
            return Err(Error::invalid(
                "impulse_receptive_field",
                format!("the field of pixel {o} reaches the border of a {width}-wide image"),
            ));
        }
        widest = widest.max(hi[o] - lo[o] + 1);
    }
    Ok(widest)
}

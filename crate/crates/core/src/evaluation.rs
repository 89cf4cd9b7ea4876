//! Confusion counts and the land/overall precision, recall and F1 metrics.
//!
//! Land is the positive class of the headline numbers. A metric whose
//! denominator is zero is undefined and reported as `None`, never as 0 or 1.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use image::GrayImage;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{load_labeled, rgb_to_tensor, DatasetManifest, LAND, SEA};
use crate::error::{Error, Result};
use crate::inference::{binarize, predict_image, TileOptions};
use crate::model::Model;

/// Pixel tallies for both classes of a binary, exhaustive labelling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp_land: u64,
    pub fp_land: u64,
    pub fn_land: u64,
    pub tp_sea: u64,
    pub fp_sea: u64,
    pub fn_sea: u64,
}

impl ConfusionCounts {
    /// Counts from the 2x2 table `(land hit, land predicted as sea, sea
    /// predicted as land, sea hit)`.
    pub fn from_table(land_land: u64, land_as_sea: u64, sea_as_land: u64, sea_sea: u64) -> Self {
        ConfusionCounts {
            tp_land: land_land,
            fp_land: sea_as_land,
            fn_land: land_as_sea,
            tp_sea: sea_sea,
            fp_sea: land_as_sea,
            fn_sea: sea_as_land,
        }
    }

    /// Tally class ids (1 = sea, 0 = land) pixel by pixel.
    pub fn from_classes(pred: &[u8], gt: &[u8]) -> Self {
        let mut table = [0u64; 4];
        for (&p, &g) in pred.iter().zip(gt) {
            table[usize::from(g != 0) * 2 + usize::from(p != 0)] += 1;
        }
        Self::from_table(table[0], table[1], table[2], table[3])
    }

    pub fn total(&self) -> u64 {
        self.tp_land + self.fn_land + self.tp_sea + self.fn_sea
    }

    fn check(&self) {
        assert_eq!(self.fp_land, self.fn_sea, "binary confusion counts lost their symmetry");
        assert_eq!(self.fp_sea, self.fn_land, "binary confusion counts lost their symmetry");
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp_land: self.tp_land + o.tp_land,
            fp_land: self.fp_land + o.fp_land,
            fn_land: self.fn_land + o.fn_land,
            tp_sea: self.tp_sea + o.tp_sea,
            fp_sea: self.fp_sea + o.fp_sea,
            fn_sea: self.fn_sea + o.fn_sea,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Compare a predicted mask with ground truth (255 sea, 0 land).
pub fn confusion(pred: &GrayImage, gt: &GrayImage) -> Result<ConfusionCounts> {
    if pred.dimensions() != gt.dimensions() {
        return Err(Error::invalid(
            "confusion",
            format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            ),
        ));
    }
    for (what, img) in [("prediction", pred), ("ground truth", gt)] {
        if let Some(v) = img.as_raw().iter().find(|&&v| v != SEA && v != LAND) {
            return Err(Error::invalid("confusion", format!("{what} has non-binary value {v}")));
        }
    }
    let to_class = |img: &GrayImage| -> Vec<u8> { img.as_raw().iter().map(|&v| u8::from(v == SEA)).collect() };
    let c = ConfusionCounts::from_classes(&to_class(pred), &to_class(gt));
    c.check();
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `(LP, LR)`: land precision and recall.
pub fn land_precision_recall(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    (
        ratio(c.tp_land, c.tp_land + c.fp_land),
        ratio(c.tp_land, c.tp_land + c.fn_land),
    )
}

/// Precision and recall with sea as the positive class.
pub fn sea_precision_recall(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    (
        ratio(c.tp_sea, c.tp_sea + c.fp_sea),
        ratio(c.tp_sea, c.tp_sea + c.fn_sea),
    )
}

/// `(OP, OR)`: pooled over both classes. For binary exhaustive masks both
/// equal pixel accuracy.
pub fn overall_precision_recall(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    let hits = c.tp_land + c.tp_sea;
    (
        ratio(hits, c.tp_land + c.fp_land + c.tp_sea + c.fp_sea),
        ratio(hits, c.tp_land + c.fn_land + c.tp_sea + c.fn_sea),
    )
}

/// Harmonic mean; undefined when both arguments are zero.
pub fn f1(precision: f64, recall: f64) -> Option<f64> {
    let sum = precision + recall;
    (sum > 0.0).then(|| 2.0 * precision * recall / sum)
}

/// The metric row for one image or for a pooled set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub lp: Option<f64>,
    pub lr: Option<f64>,
    pub op: Option<f64>,
    pub or_: Option<f64>,
    pub f1: Option<f64>,
    pub pixels: u64,
    pub counts: ConfusionCounts,
}

impl MetricRow {
    pub fn new(name: impl Into<String>, counts: ConfusionCounts) -> Self {
        let (lp, lr) = land_precision_recall(&counts);
        let (op, or_) = overall_precision_recall(&counts);
        MetricRow {
            name: name.into(),
            lp,
            lr,
            op,
            or_,
            f1: lp.zip(lr).and_then(|(p, r)| f1(p, r)),
            pixels: counts.total(),
            counts,
        }
    }
}

/// Unweighted mean of the per-image metrics; an image whose metric is
/// undefined is left out of that metric's mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacroAverage {
    pub lp: Option<f64>,
    pub lr: Option<f64>,
    pub op: Option<f64>,
    pub or_: Option<f64>,
    pub f1: Option<f64>,
}

impl MacroAverage {
    fn of(rows: &[MetricRow]) -> Self {
        let mean = |get: fn(&MetricRow) -> Option<f64>| {
            let vals: Vec<f64> = rows.iter().filter_map(get).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        MacroAverage {
            lp: mean(|r| r.lp),
            lr: mean(|r| r.lr),
            op: mean(|r| r.op),
            or_: mean(|r| r.or_),
            f1: mean(|r| r.f1),
        }
    }
}

/// Per-image rows, their macro average and the micro-averaged aggregate
/// (pooled counts), which is the headline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: Vec<MetricRow>,
    pub macro_average: MacroAverage,
    pub aggregate: MetricRow,
}

impl EvalReport {
    pub fn from_counts(per_image: Vec<(String, ConfusionCounts)>) -> Self {
        let pooled = per_image.iter().map(|(_, c)| *c).sum();
        let images: Vec<MetricRow> = per_image.into_iter().map(|(n, c)| MetricRow::new(n, c)).collect();
        EvalReport {
            macro_average: MacroAverage::of(&images),
            images,
            aggregate: MetricRow::new("aggregate", pooled),
        }
    }

    /// Fixed-width table: one row per image, the macro average, and the
    /// aggregate last.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "undef".to_string(), |v| format!("{:.4}", v));
        let width = self.images.iter().map(|r| r.name.len()).chain([9]).max().unwrap_or(9);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>10}\n",
            "name", "LP", "LR", "OP", "OR", "F1", "pixels"
        );
        let mut row = |name: &str, v: [Option<f64>; 5], pixels: String| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>10}",
                name,
                cell(v[0]),
                cell(v[1]),
                cell(v[2]),
                cell(v[3]),
                cell(v[4]),
                pixels
            );
        };
        for r in &self.images {
            row(&r.name, [r.lp, r.lr, r.op, r.or_, r.f1], r.pixels.to_string());
        }
        let m = &self.macro_average;
        row("macro", [m.lp, m.lr, m.op, m.or_, m.f1], "-".into());
        let a = &self.aggregate;
        row(&a.name, [a.lp, a.lr, a.op, a.or_, a.f1], a.pixels.to_string());
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields serialise")
    }
}

/// Predict every image of `manifest` with tiled inference and score it.
pub fn evaluate_set(model: &Model<f32>, manifest: &DatasetManifest, opts: &TileOptions) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::invalid("evaluate", "manifest lists no images"));
    }
    let per_image = manifest
        .entries
        .par_iter()
        .map(|(image, mask)| {
            let img = load_labeled(image, mask)?;
            let probs = predict_image(model, &rgb_to_tensor(img.rgb()), opts)?;
            let counts = confusion(&binarize(&probs)?, img.mask())?;
            Ok((display_name(image), counts))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_counts(per_image))
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

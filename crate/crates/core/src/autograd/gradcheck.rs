//! Central finite-difference verification of tape gradients.

use rayon::prelude::*;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// A stencil that crosses a ReLU or max-pool switch is shrunk by this factor
/// at most [`MAX_REFINEMENTS`] times.
pub const REFINE_FACTOR: f64 = 10.0;
pub const MAX_REFINEMENTS: u32 = 4;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, as `(input, element)`.
    pub worst: Option<(usize, usize)>,
    pub failures: Vec<GradFailure>,
    /// Coordinates whose `±h` stencil crossed a switch and were re-measured
    /// with a smaller step.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Fold another report into this one.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.refined += other.refined;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst);
        }
        self.failures.extend(other.failures);
    }
}

/// Compare every element's tape gradient against a central difference with
/// step `h`. `f` builds a single-value loss from the inputs it is handed.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    grad_check_coords(f, inputs, &coords, h, tol)
}

/// Like [`grad_check`], restricted to the listed element indices of each input.
///
/// A central difference is only an oracle where the function is smooth over
/// the whole stencil. When a perturbation flips any ReLU or max-pool switch
/// the step is divided by [`REFINE_FACTOR`] until it no longer does.
pub fn grad_check_coords<F>(
    f: F,
    inputs: &[Tensor<f64>],
    coords: &[Vec<usize>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    assert_eq!(coords.len(), inputs.len(), "one coordinate list per input");
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
        .collect();
    drop(tape);

    let eval = |which: usize, index: usize, delta: f64| -> Result<(f64, Vec<u8>)> {
        let mut tape = Tape::inference().logging_switches();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which && delta != 0.0 {
                    let mut t = t.clone();
                    t.data_mut()[index] += delta;
                    tape.leaf(t)
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        let loss = f(&mut tape, &vars)?;
        let pattern = tape.switch_pattern().unwrap_or_default().to_vec();
        Ok((tape.value(loss).item(), pattern))
    };
    let (_, base) = eval(0, 0, 0.0)?;

    let jobs: Vec<(usize, usize)> = coords
        .iter()
        .enumerate()
        .flat_map(|(i, idx)| idx.iter().map(move |&j| (i, j)))
        .collect();
    let results: Vec<(usize, usize, f64, f64, bool)> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let mut step = h;
            let mut refined = false;
            for attempt in 0..=MAX_REFINEMENTS {
                let (plus, p_pat) = eval(i, j, step)?;
                let (minus, m_pat) = eval(i, j, -step)?;
                let smooth = p_pat == base && m_pat == base;
                if smooth || attempt == MAX_REFINEMENTS {
                    return Ok((i, j, analytic[i].data()[j], (plus - minus) / (2.0 * step), refined));
                }
                step /= REFINE_FACTOR;
                refined = true;
            }
            unreachable!("the last attempt always returns")
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        tolerance: tol,
        ..Default::default()
    };
    for (input, index, a, n, refined) in results {
        let rel = relative_error(a, n);
        report.checked += 1;
        report.refined += usize::from(refined);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some((input, index));
        }
        if !(rel <= tol) {
            report.failures.push(GradFailure {
                input,
                index,
                analytic: a,
                numeric: n,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

//! Finite-difference check of the whole network's loss gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check_coords, GradCheckReport};
use crate::error::Result;
use crate::model::{forward_graph, Model, ModelConfig};
use crate::tensor::{Shape, Tensor};

/// Central-difference step, applied to the 64-bit replay.
pub const GRAD_CHECK_STEP: f64 = 1e-3;
/// Largest accepted relative error between tape and finite difference.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheck {
    /// Height and width of the random input image.
    pub extent: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Elements checked per parameter tensor (and of the image); `None`
    /// checks every element.
    pub per_tensor: Option<usize>,
}

impl ModelCheck {
    pub fn new(extent: usize) -> Self {
        ModelCheck {
            extent,
            step: GRAD_CHECK_STEP,
            tolerance: GRAD_CHECK_TOLERANCE,
            per_tensor: None,
        }
    }

    pub fn sampled(mut self, per_tensor: usize) -> Self {
        self.per_tensor = Some(per_tensor);
        self
    }
}

/// A report together with the names of the checked inputs; the last input
/// is the image.
#[derive(Clone, Debug)]
pub struct ModelCheckReport {
    pub names: Vec<String>,
    pub report: GradCheckReport,
}

impl ModelCheckReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }

    /// `name[index]` of the coordinate with the largest error.
    pub fn worst(&self) -> Option<String> {
        self.report.worst.map(|(i, j)| format!("{}[{j}]", self.names[i]))
    }
}

/// Compare the tape gradient of the pixelwise cross-entropy of a freshly
/// initialised model against central differences, for every parameter
/// tensor and the input image. The model, image and target are all drawn
/// from `seed`.
pub fn model_grad_check(config: &ModelConfig, seed: u64, check: &ModelCheck) -> Result<ModelCheckReport> {
    let model: Model<f64> = Model::build(config.clone(), seed)?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c4ec);
    let shape = Shape::new(1, config.input_channels, check.extent, check.extent);
    let image = Tensor::<f64>::uniform(shape, 0.0, 1.0, &mut rng);
    let targets: Vec<u8> = (0..check.extent * check.extent)
        .map(|_| rng.random_range(0..2))
        .collect();

    let mut inputs = model.params().to_vec();
    inputs.push(image);
    let mut names: Vec<String> = model.specs().into_iter().map(|s| s.name).collect();
    names.push("image".into());
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| match check.per_tensor {
            Some(k) if k < t.len() => {
                let mut idx = sample(&mut rng, t.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..t.len()).collect(),
        })
        .collect();

    let n_params = inputs.len() - 1;
    let f = |tape: &mut crate::Tape<f64>, vars: &[crate::Var]| {
        let trace = forward_graph(config, tape, &vars[..n_params], vars[n_params])?;
        tape.cross_entropy_loss(trace.probs, &targets)
    };
    let report = grad_check_coords(f, &inputs, &coords, check.step, check.tolerance)?;
    Ok(ModelCheckReport { names, report })
}

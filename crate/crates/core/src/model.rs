//! The DeepUNet network: a three-convolution stem, a chain of DownBlocks
//! with additive shortcuts, a mirrored chain of UpBlocks fed by the encoder
//! skips, and a 1x1 classification head followed by a channel softmax.
//!
//! Parameters are named and ordered by [`param_specs`]; that list is the
//! single source of truth for construction, checkpoints and optimizer state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of pooling stages, and of upsampling stages.
    pub depth: usize,
    /// Output channels of the first convolution in each block.
    pub wide_channels: usize,
    /// Block input/output channels.
    pub narrow_channels: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    /// `false` drops every additive shortcut, giving a U-Net-like network.
    pub plus_enabled: bool,
    pub upsample_mode: UpsampleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Seven stages, 64 wide / 32 narrow channels, RGB in, two classes out.
    pub fn full() -> Self {
        ModelConfig {
            depth: 7,
            wide_channels: 64,
            narrow_channels: 32,
            input_channels: 3,
            num_classes: 2,
            plus_enabled: true,
            upsample_mode: UpsampleMode::Nearest,
        }
    }

    /// Laptop-sized variant used for end-to-end runs on 64x64 tiles.
    pub fn desk() -> Self {
        ModelConfig {
            depth: 4,
            ..Self::full()
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_channels(mut self, wide: usize, narrow: usize) -> Self {
        self.wide_channels = wide;
        self.narrow_channels = narrow;
        self
    }

    pub fn with_plus(mut self, plus: bool) -> Self {
        self.plus_enabled = plus;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("model config", "depth must be at least 1"));
        }
        if self.depth > 24 {
            return Err(Error::invalid(
                "model config",
                format!("depth {} is too large", self.depth),
            ));
        }
        if self.narrow_channels == 0 || self.wide_channels < self.narrow_channels {
            return Err(Error::invalid(
                "model config",
                format!(
                    "need wide_channels >= narrow_channels >= 1, got {} and {}",
                    self.wide_channels, self.narrow_channels
                ),
            ));
        }
        if self.input_channels == 0 || self.num_classes < 2 {
            return Err(Error::invalid(
                "model config",
                "need at least one input channel and two classes",
            ));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Name, shape and fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    /// Natural extents for serialization: 4 for kernels, 1 for biases.
    pub dims: Vec<usize>,
    pub fan_in: usize,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, c_in: usize, c_out: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: Shape::new(c_out, c_in, k, k),
        dims: vec![c_out, c_in, k, k],
        fan_in: c_in * k * k,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: Shape::new(c_out, 1, 1, 1),
        dims: vec![c_out],
        fan_in: c_in * k * k,
    });
}

/// Every parameter of the network in canonical order: stem, down stages
/// `1..depth`, up stages `0..depth`, head.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let (wide, narrow) = (config.wide_channels, config.narrow_channels);
    let mut specs = Vec::new();
    conv_specs(&mut specs, "stem.0", config.input_channels, wide, 3);
    conv_specs(&mut specs, "stem.1", wide, wide, 3);
    conv_specs(&mut specs, "stem.2", wide, narrow, 3);
    for stage in 1..config.depth {
        conv_specs(&mut specs, &format!("down.{stage}.conv1"), narrow, wide, 3);
        conv_specs(&mut specs, &format!("down.{stage}.conv2"), wide, narrow, 3);
    }
    for stage in 0..config.depth {
        conv_specs(&mut specs, &format!("up.{stage}.conv1"), 2 * narrow, wide, 3);
        conv_specs(&mut specs, &format!("up.{stage}.conv2"), wide, narrow, 3);
    }
    conv_specs(&mut specs, "head", narrow, config.num_classes, 1);
    specs
}

/// Total number of scalar parameters.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    Ok(param_specs(config).iter().map(|s| s.shape.numel()).sum())
}

/// One row of the layer table: what each stage of the network does.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        name: String,
        kernel: usize,
        filters: usize,
    },
    Pool {
        name: String,
    },
    Upsample {
        name: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    Down,
    Up,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
}

impl Model<f32> {
    /// He-initialised weights (`N(0, 2 / fan_in)`) and zero biases, fully
    /// determined by `(config, seed)`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&config)
            .iter()
            .map(|spec| {
                if spec.name.ends_with(".bias") {
                    Tensor::zeros(spec.shape)
                } else {
                    Tensor::randn(spec.shape, (2.0 / spec.fan_in as f64).sqrt(), &mut rng)
                }
            })
            .collect();
        Ok(Model { config, params })
    }
}

impl<T: Scalar> Model<T> {
    /// Every weight and bias set to `value`.
    pub fn constant(config: ModelConfig, value: T) -> Result<Self> {
        config.validate()?;
        let params = param_specs(&config)
            .iter()
            .map(|s| Tensor::full(s.shape, value))
            .collect();
        Ok(Model { config, params })
    }

    pub fn from_parameters(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::invalid(
                "model",
                format!("expected {} parameter tensors, got {}", specs.len(), params.len()),
            ));
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.shape != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "model parameter",
                    left: spec.shape,
                    right: p.shape(),
                });
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        param_specs(&self.config)
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.specs().into_iter().map(|s| s.name).zip(self.params.iter())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_params().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Same weights with the shortcut additions switched on or off.
    pub fn with_plus(&self, plus: bool) -> Self {
        Model {
            config: self.config.clone().with_plus(plus),
            params: self.params.clone(),
        }
    }

    /// Layer table grouped by path, in execution order.
    pub fn layers(&self) -> Vec<(Path, Vec<Layer>)> {
        let c = &self.config;
        let conv = |name: String, kernel, filters| Layer::Conv { name, kernel, filters };
        let mut stages = vec![(
            Path::Down,
            vec![
                conv("stem.0".into(), 3, c.wide_channels),
                conv("stem.1".into(), 3, c.wide_channels),
                conv("stem.2".into(), 3, c.narrow_channels),
                Layer::Pool { name: "pool.0".into() },
            ],
        )];
        for s in 1..c.depth {
            stages.push((
                Path::Down,
                vec![
                    conv(format!("down.{s}.conv1"), 3, c.wide_channels),
                    conv(format!("down.{s}.conv2"), 3, c.narrow_channels),
                    Layer::Pool {
                        name: format!("pool.{s}"),
                    },
                ],
            ));
        }
        for s in 0..c.depth {
            stages.push((
                Path::Up,
                vec![
                    Layer::Upsample {
                        name: format!("upsample.{s}"),
                    },
                    conv(format!("up.{s}.conv1"), 3, c.wide_channels),
                    conv(format!("up.{s}.conv2"), 3, c.narrow_channels),
                ],
            ));
        }
        stages
    }

    pub fn pooling_stages(&self) -> usize {
        self.layers()
            .iter()
            .flat_map(|(_, l)| l)
            .filter(|l| matches!(l, Layer::Pool { .. }))
            .count()
    }

    pub fn upsampling_stages(&self) -> usize {
        self.layers()
            .iter()
            .flat_map(|(_, l)| l)
            .filter(|l| matches!(l, Layer::Upsample { .. }))
            .count()
    }

    /// Put the parameters on `tape`, as gradient-requiring leaves when
    /// `trainable`.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.leaf(p.clone())
                }
            })
            .collect()
    }

    /// Record a full forward pass on `tape`.
    pub fn forward_on(&self, tape: &mut Tape<T>, image: Var, trainable: bool) -> Result<ForwardTrace> {
        let params = self.register(tape, trainable);
        forward_graph(&self.config, tape, &params, image)
    }

    /// Per-pixel class probabilities `(batch, classes, H, W)`.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.leaf(image.clone());
        let trace = self.forward_on(&mut tape, x, false)?;
        Ok(tape.value(trace.probs).clone())
    }
}

/// Tape handles of one convolution's weight and bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

/// Parameter handles grouped by role, in [`param_specs`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub stem: [ConvVars; 3],
    pub down: Vec<BlockVars>,
    pub up: Vec<BlockVars>,
    pub head: ConvVars,
}

impl ModelVars {
    pub fn from_flat(config: &ModelConfig, params: &[Var]) -> Result<Self> {
        let expected = param_specs(config).len();
        if params.len() != expected {
            return Err(Error::invalid(
                "forward",
                format!("expected {expected} parameter handles, got {}", params.len()),
            ));
        }
        let mut convs = params.chunks(2).map(|c| ConvVars {
            weight: c[0],
            bias: c[1],
        });
        let mut next = || convs.next().expect("count checked");
        let stem = [next(), next(), next()];
        let down = (1..config.depth)
            .map(|_| BlockVars {
                conv1: next(),
                conv2: next(),
            })
            .collect();
        let up = (0..config.depth)
            .map(|_| BlockVars {
                conv1: next(),
                conv2: next(),
            })
            .collect();
        let head = next();
        Ok(ModelVars { stem, down, up, head })
    }
}

/// Handles of the interesting intermediate tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub params: Vec<Var>,
    /// Input of each DownBlock, stage `1..depth`.
    pub block_inputs: Vec<Var>,
    /// Encoder outputs before pooling, shallowest first (stem output first).
    pub skips: Vec<Var>,
    /// Deepest pooled feature map, input of the first UpBlock.
    pub innermost: Var,
    pub logits: Var,
    pub probs: Var,
}

fn conv3(tape: &mut Tape<impl Scalar>, x: Var, p: ConvVars) -> Result<Var> {
    tape.conv2d(x, p.weight, p.bias, 1, 1)
}

fn in_channels<T: Scalar>(tape: &Tape<T>, conv: ConvVars) -> usize {
    tape.value(conv.weight).shape().c()
}

/// `y = conv2(relu(conv1(x))) (+ x)`; returns `(maxpool(y), y)`.
pub fn down_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    block: BlockVars,
    plus_enabled: bool,
) -> Result<(Var, Var)> {
    let xs = tape.value(x).shape();
    if xs.c() != in_channels(tape, block.conv1) {
        return Err(Error::ShapeMismatch {
            op: "down block",
            left: xs,
            right: tape.value(block.conv1.weight).shape(),
        });
    }
    if !xs.h().is_multiple_of(2) || !xs.w().is_multiple_of(2) {
        return Err(Error::invalid(
            "down block",
            format!("spatial extents of {xs} must be even"),
        ));
    }
    let h = conv3(tape, x, block.conv1)?;
    let h = tape.relu(h)?;
    let mut y = conv3(tape, h, block.conv2)?;
    if plus_enabled {
        y = tape.add(y, x)?;
    }
    let (pooled, _) = tape.maxpool2x2(y)?;
    Ok((pooled, y))
}

/// `u = upsample(prev)`, `out = conv2(relu(conv1([u, skip]))) (+ u)`.
pub fn up_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    prev: Var,
    skip: Var,
    block: BlockVars,
    plus_enabled: bool,
) -> Result<Var> {
    let (ps, ss) = (tape.value(prev).shape(), tape.value(skip).shape());
    if ss.h() != 2 * ps.h() || ss.w() != 2 * ps.w() || ss.n() != ps.n() {
        return Err(Error::ShapeMismatch {
            op: "up block (skip must be twice the previous feature's extent)",
            left: ps,
            right: ss,
        });
    }
    let u = tape.upsample_nearest2x(prev)?;
    let cat = tape.concat_channels(&[u, skip])?;
    let h = conv3(tape, cat, block.conv1)?;
    let h = tape.relu(h)?;
    let mut out = conv3(tape, h, block.conv2)?;
    if plus_enabled {
        out = tape.add(out, u)?;
    }
    Ok(out)
}

/// Forward pass over externally supplied parameter handles (ordered as in
/// [`param_specs`]).
pub fn forward_graph<T: Scalar>(
    config: &ModelConfig,
    tape: &mut Tape<T>,
    params: &[Var],
    image: Var,
) -> Result<ForwardTrace> {
    let vars = ModelVars::from_flat(config, params)?;
    let s = tape.value(image).shape();
    let m = config.required_multiple();
    if !s.h().is_multiple_of(m) || !s.w().is_multiple_of(m) || s.h() == 0 || s.w() == 0 {
        return Err(Error::invalid(
            "forward",
            format!(
                "input {s}: height and width must be positive multiples of {m} (2^depth, depth {})",
                config.depth
            ),
        ));
    }
    if s.c() != config.input_channels {
        return Err(Error::invalid(
            "forward",
            format!("input {s} must have {} channels", config.input_channels),
        ));
    }

    let mut x = conv3(tape, image, vars.stem[0])?;
    x = tape.relu(x)?;
    x = conv3(tape, x, vars.stem[1])?;
    x = tape.relu(x)?;
    let stem_out = conv3(tape, x, vars.stem[2])?;
    let (mut pooled, _) = tape.maxpool2x2(stem_out)?;

    let mut skips = vec![stem_out];
    let mut block_inputs = Vec::with_capacity(config.depth - 1);
    for block in &vars.down {
        block_inputs.push(pooled);
        let (p, y) = down_block_forward(tape, pooled, *block, config.plus_enabled)?;
        skips.push(y);
        pooled = p;
    }
    let innermost = pooled;

    let mut feat = innermost;
    for (block, skip) in vars.up.iter().zip(skips.iter().rev()) {
        feat = up_block_forward(tape, feat, *skip, *block, config.plus_enabled)?;
    }
    let logits = tape.conv2d(feat, vars.head.weight, vars.head.bias, 1, 0)?;
    let probs = tape.softmax_channels(logits)?;
    Ok(ForwardTrace {
        params: params.to_vec(),
        block_inputs,
        skips,
        innermost,
        logits,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig::full().with_depth(2).with_channels(6, 4)
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(tiny(), 42).unwrap();
        let b = Model::build(tiny(), 42).unwrap();
        assert_eq!(a, b);
        let c = Model::build(tiny(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn full_config_has_seven_pool_and_upsample_stages() {
        let m = Model::<f32>::constant(ModelConfig::full(), 0.0).unwrap();
        assert_eq!(m.pooling_stages(), 7);
        assert_eq!(m.upsampling_stages(), 7);
        let downs = m.layers().iter().filter(|(p, _)| *p == Path::Down).count();
        assert_eq!(downs, 7);
    }

    #[test]
    fn parameter_count_hand_sum() {
        let cfg = ModelConfig::full().with_depth(1).with_channels(4, 2);
        // stem: 3->4, 4->4, 4->2 (3x3); up: 4->4, 4->2 (3x3); head 2->2 (1x1)
        let hand =
            (9 * 3 * 4 + 4) + (9 * 4 * 4 + 4) + (9 * 4 * 2 + 2) + (9 * 4 * 4 + 4) + (9 * 4 * 2 + 2) + (2 * 2 + 2);
        assert_eq!(parameter_count(&cfg).unwrap(), hand);
        assert_eq!(Model::build(cfg, 0).unwrap().parameter_count(), hand);
    }

    #[test]
    fn parameter_count_rejects_zero_depth_and_grows_superlinearly() {
        assert!(parameter_count(&ModelConfig::full().with_depth(0)).is_err());
        let count = |w, n| parameter_count(&ModelConfig::full().with_depth(3).with_channels(w, n)).unwrap();
        assert!(count(64, 32) > count(64, 16));
        // channel counts enter quadratically, so doubling the widths more than doubles
        assert!(count(128, 64) > 2 * count(64, 32));
        assert!(count(64, 64) > 2 * count(32, 32));
    }

    #[test]
    fn biases_start_at_zero() {
        let m = Model::build(tiny(), 1).unwrap();
        for (name, t) in m.named_params() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn down_block_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::randn(Shape::new(1, 32, 64, 64), 1.0, &mut rng));
        let z = |tape: &mut Tape<f32>, s| tape.leaf(Tensor::zeros(s));
        let block = BlockVars {
            conv1: ConvVars {
                weight: z(&mut tape, Shape::new(64, 32, 3, 3)),
                bias: z(&mut tape, Shape::new(64, 1, 1, 1)),
            },
            conv2: ConvVars {
                weight: z(&mut tape, Shape::new(32, 64, 3, 3)),
                bias: z(&mut tape, Shape::new(32, 1, 1, 1)),
            },
        };
        let (pooled, skip) = down_block_forward(&mut tape, x, block, true).unwrap();
        assert_eq!(tape.value(skip), tape.value(x));
        assert_eq!(tape.value(pooled).shape(), Shape::new(1, 32, 32, 32));
        assert_eq!(tape.value(skip).shape(), Shape::new(1, 32, 64, 64));
    }

    fn random_block(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, c_in: usize, wide: usize, narrow: usize) -> BlockVars {
        let mut conv = |tape: &mut Tape<f64>, i, o| ConvVars {
            weight: tape.leaf(Tensor::randn(Shape::new(o, i, 3, 3), 0.3, rng)),
            bias: tape.leaf(Tensor::randn(Shape::new(o, 1, 1, 1), 0.1, rng)),
        };
        BlockVars {
            conv1: conv(tape, c_in, wide),
            conv2: conv(tape, wide, narrow),
        }
    }

    #[test]
    fn plus_on_and_off_differ_by_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, &mut rng));
        let block = random_block(&mut tape, &mut rng, 4, 6, 4);
        let (_, on) = down_block_forward(&mut tape, x, block, true).unwrap();
        let (_, off) = down_block_forward(&mut tape, x, block, false).unwrap();
        let (on, off, xv) = (tape.value(on), tape.value(off), tape.value(x));
        for i in 0..xv.len() {
            assert!((on.data()[i] - off.data()[i] - xv.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn down_block_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::randn(Shape::new(1, 3, 8, 8), 1.0, &mut rng));
        let block = random_block(&mut tape, &mut rng, 4, 6, 4);
        assert!(down_block_forward(&mut tape, x, block, true).is_err());
    }

    #[test]
    fn up_block_shapes_and_zero_weight_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::<f32>::new();
        let prev = tape.leaf(Tensor::randn(Shape::new(1, 32, 5, 5), 1.0, &mut rng));
        let skip = tape.leaf(Tensor::randn(Shape::new(1, 32, 10, 10), 1.0, &mut rng));
        let z = |tape: &mut Tape<f32>, s| tape.leaf(Tensor::zeros(s));
        let block = BlockVars {
            conv1: ConvVars {
                weight: z(&mut tape, Shape::new(64, 64, 3, 3)),
                bias: z(&mut tape, Shape::new(64, 1, 1, 1)),
            },
            conv2: ConvVars {
                weight: z(&mut tape, Shape::new(32, 64, 3, 3)),
                bias: z(&mut tape, Shape::new(32, 1, 1, 1)),
            },
        };
        let out = up_block_forward(&mut tape, prev, skip, block, true).unwrap();
        assert_eq!(tape.value(out).shape(), Shape::new(1, 32, 10, 10));
        let u = tape.upsample_nearest2x(prev).unwrap();
        assert_eq!(tape.value(out), tape.value(u));

        let bad = tape.leaf(Tensor::zeros(Shape::new(1, 32, 9, 10)));
        assert!(up_block_forward(&mut tape, prev, bad, block, true).is_err());
    }

    #[test]
    fn up_block_gradient_reaches_prev_and_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prev = Tensor::<f64>::randn(Shape::new(1, 2, 2, 2), 1.0, &mut rng);
        let skip = Tensor::<f64>::randn(Shape::new(1, 2, 4, 4), 1.0, &mut rng);
        let weights: Vec<Tensor<f64>> = vec![
            Tensor::randn(Shape::new(3, 4, 3, 3), 0.5, &mut rng),
            Tensor::randn(Shape::new(3, 1, 1, 1), 0.1, &mut rng),
            Tensor::randn(Shape::new(2, 3, 3, 3), 0.5, &mut rng),
            Tensor::randn(Shape::new(2, 1, 1, 1), 0.1, &mut rng),
        ];
        let proj = Tensor::<f64>::randn(Shape::new(1, 2, 4, 4), 1.0, &mut rng);
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            let block = BlockVars {
                conv1: ConvVars {
                    weight: tape.leaf(weights[0].clone()),
                    bias: tape.leaf(weights[1].clone()),
                },
                conv2: ConvVars {
                    weight: tape.leaf(weights[2].clone()),
                    bias: tape.leaf(weights[3].clone()),
                },
            };
            let out = up_block_forward(tape, v[0], v[1], block, true)?;
            let p = tape.leaf(proj.clone());
            let m = tape.mul(out, p)?;
            tape.sum(m)
        };
        let report = crate::autograd::grad_check(f, &[prev.clone(), skip.clone()], 1e-3, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");

        let mut tape = Tape::<f64>::new();
        let vars = [tape.param(prev), tape.param(skip)];
        let loss = f(&mut tape, &vars).unwrap();
        let g = tape.backward(loss).unwrap();
        for v in vars {
            assert!(g.get(v).unwrap().data().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn forward_shape_law_and_softmax_sums() {
        let model = Model::build(ModelConfig::desk().with_channels(8, 4), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::uniform(Shape::new(2, 3, 64, 48), 0.0, 1.0, &mut rng);
        let probs = model.predict(&img).unwrap();
        assert_eq!(probs.shape(), Shape::new(2, 2, 64, 48));
        for n in 0..2 {
            for y in 0..64 {
                for x in 0..48 {
                    let s = probs.at(n, 0, y, x) + probs.at(n, 1, y, x);
                    assert!((s - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn forward_rejects_indivisible_extent() {
        let model = Model::build(tiny(), 0).unwrap();
        let err = model.predict(&Tensor::zeros(Shape::new(1, 3, 10, 8))).unwrap_err();
        assert!(err.to_string().contains("multiples of 4"), "{err}");
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let model = Model::<f32>::constant(tiny(), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = Tensor::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng);
        let probs = model.predict(&img).unwrap();
        assert!(probs.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn plus_toggle_keeps_shapes() {
        let on = Model::build(tiny(), 5).unwrap();
        let off = on.with_plus(false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Tensor::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng);
        let (a, b) = (on.predict(&img).unwrap(), off.predict(&img).unwrap());
        assert_eq!(a.shape(), b.shape());
        assert_ne!(a, b);
    }
}

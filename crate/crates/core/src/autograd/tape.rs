use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    Relu(usize),
    MaxPool {
        input: usize,
        argmax: Vec<u8>,
    },
    Upsample(usize),
    Concat(Vec<usize>),
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    Softmax(usize),
    CrossEntropy {
        probs: usize,
        targets: Vec<u8>,
    },
    /// Cross-entropy over the output of a softmax node; the gradient skips the
    /// softmax and lands on its logits directly.
    SoftmaxCrossEntropy {
        logits: usize,
        probs: usize,
        targets: Vec<u8>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the list is topologically sorted
/// by construction. A tape built with [`Tape::inference`] records values only.
pub struct Tape<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    switches: Option<Vec<u8>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
            switches: None,
        }
    }

    /// A tape that never records gradient information.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Also log which side of every ReLU and max-pool switch each element
    /// took, see [`Tape::switch_pattern`].
    pub fn logging_switches(mut self) -> Self {
        self.switches = Some(Vec::new());
        self
    }

    /// ReLU activity bits and max-pool winners of every op recorded so far,
    /// if logging was requested. Two inputs with equal patterns lie on the
    /// same smooth piece of the recorded function.
    pub fn switch_pattern(&self) -> Option<&[u8]> {
        self.switches.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is retained by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    /// Record `op` if any input needs a gradient, otherwise store a constant.
    fn record(&mut self, value: Tensor<T>, op: Op, inputs: &[usize]) -> Var {
        // inputs are only scanned once the output is known to be bad
        debug_assert!(
            value.is_finite() || !inputs.iter().all(|&i| self.nodes[i].value.is_finite()),
            "non-finite output from {op:?}"
        );
        let rg = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        match op {
            _ if rg => self.push(value, op, true),
            // kept so the loss value does not depend on the recording mode
            Op::Softmax(_) => self.push(value, op, false),
            _ => self.push(value, Op::Leaf, false),
        }
    }

    /// Zero-padded cross-correlation. `weight` is `(out, in, kh, kw)`, `bias`
    /// holds `out` values.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (i, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let geom = ConvGeom::new(
            self.nodes[i].value.shape(),
            self.nodes[w].value.shape(),
            self.nodes[b].value.shape(),
            stride,
            padding,
        )?;
        let out = kernels::conv2d_forward(&self.nodes[i].value, &self.nodes[w].value, &self.nodes[b].value, &geom);
        Ok(self.record(
            out,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                geom,
            },
            &[i, w, b],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let out = kernels::relu_forward(&self.nodes[i].value);
        if let Some(log) = &mut self.switches {
            log.extend(self.nodes[i].value.data().iter().map(|&v| u8::from(v > T::zero())));
        }
        Ok(self.record(out, Op::Relu(i), &[i]))
    }

    /// 2x2 max pooling with stride 2; returns the pooled tensor and the
    /// per-window winner offsets (`dy * 2 + dx`).
    pub fn maxpool2x2(&mut self, input: Var) -> Result<(Var, Vec<u8>)> {
        let i = self.check(input)?;
        let (out, argmax) = kernels::maxpool_forward(&self.nodes[i].value)?;
        let winners = argmax.clone();
        if let Some(log) = &mut self.switches {
            log.extend_from_slice(&winners);
        }
        let var = self.record(out, Op::MaxPool { input: i, argmax }, &[i]);
        Ok((var, winners))
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let out = kernels::upsample_forward(&self.nodes[i].value);
        Ok(self.record(out, Op::Upsample(i), &[i]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = kernels::concat_forward(&values)?;
        Ok(self.record(out, Op::Concat(idx.clone()), &idx))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.record(out, Op::Add(ia, ib), &[ia, ib]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.record(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    /// Sum of all elements as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let total = self.nodes[i].value.data().iter().copied().sum();
        Ok(self.record(Tensor::scalar(total), Op::Sum(i), &[i]))
    }

    /// Per-pixel softmax across channels.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let i = self.check(logits)?;
        let out = kernels::softmax_forward(&self.nodes[i].value);
        Ok(self.record(out, Op::Softmax(i), &[i]))
    }

    /// Mean over pixels of `-ln(max(p_true, 1e-7))`. `targets` holds one class
    /// id per pixel in `(batch, height, width)` order.
    ///
    /// When `probs` was produced by [`Tape::softmax_channels`] the loss is
    /// taken from the logits as `logsumexp(z) - z_true`, which cannot reach
    /// `ln 0` and so skips the floor, and the backward pass uses the fused
    /// `(p - onehot)` form. Value and gradient then describe the same
    /// function even for pixels whose true-class probability underflows.
    pub fn cross_entropy_loss(&mut self, probs: Var, targets: &[u8]) -> Result<Var> {
        let p = self.check(probs)?;
        kernels::check_targets(self.nodes[p].value.shape(), targets)?;
        let (loss, op, src) = match self.nodes[p].op {
            Op::Softmax(logits) => (
                kernels::softmax_cross_entropy_forward(&self.nodes[logits].value, targets),
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs: p,
                    targets: targets.to_vec(),
                },
                logits,
            ),
            _ => (
                kernels::cross_entropy_forward(&self.nodes[p].value, targets),
                Op::CrossEntropy {
                    probs: p,
                    targets: targets.to_vec(),
                },
                p,
            ),
        };
        Ok(self.record(Tensor::scalar(loss), op, &[src]))
    }

    /// Reverse pass from a single-element `loss`. Gradients of every
    /// gradient-requiring leaf reachable from `loss` are returned; uses of one
    /// tensor along several paths accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if !self.nodes[root].requires_grad {
            return Err(Error::Detached);
        }
        if self.nodes[root].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must hold a single value, got {}", self.nodes[root].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_input = self.nodes[*input].requires_grad;
                    let cg = kernels::conv2d_backward(
                        &g,
                        &self.nodes[*input].value,
                        &self.nodes[*weight].value,
                        geom,
                        need_input,
                    );
                    if let Some(dx) = cg.input {
                        self.accumulate(&mut grads, *input, dx);
                    }
                    self.accumulate(&mut grads, *weight, cg.weight);
                    let bias_shape = self.nodes[*bias].value.shape();
                    self.accumulate(&mut grads, *bias, cg.bias.reshape(bias_shape)?);
                }
                Op::Relu(input) => {
                    let dx = kernels::relu_backward(&g, &self.nodes[*input].value);
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::MaxPool { input, argmax } => {
                    let dx = kernels::maxpool_backward(&g, argmax, self.nodes[*input].value.shape());
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Upsample(input) => {
                    let dx = kernels::upsample_backward(&g, self.nodes[*input].value.shape());
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.shape().c();
                        let slice = g.slice_channels(start, start + c)?;
                        start += c;
                        self.accumulate(&mut grads, p, slice);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = Tensor::from_vec(
                        va.shape(),
                        g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
                    )?;
                    let db = Tensor::from_vec(
                        vb.shape(),
                        g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect(),
                    )?;
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Sum(input) => {
                    let shape = self.nodes[*input].value.shape();
                    self.accumulate(&mut grads, *input, Tensor::full(shape, g.item()));
                }
                Op::Softmax(input) => {
                    let dx = kernels::softmax_backward(&g, &node.value);
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::CrossEntropy { probs, targets } => {
                    let dp = kernels::cross_entropy_backward(g.item(), &self.nodes[*probs].value, targets);
                    self.accumulate(&mut grads, *probs, dp);
                }
                Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                    let dl = kernels::softmax_cross_entropy_backward(g.item(), &self.nodes[*probs].value, targets);
                    self.accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], index: usize, g: Tensor<T>) {
        if !self.nodes[index].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[index].value.shape());
        match &mut grads[index] {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }

    /// Gradient of a leaf, or zeros of `shape` when the loss does not reach it.
    pub fn take_or_zeros(&mut self, var: Var, shape: Shape) -> Tensor<T> {
        self.take(var).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

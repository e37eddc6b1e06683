//! A small reverse-mode automatic differentiation engine.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated; calling
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients
//! into every node that needs one. A tape is built fresh for each forward
//! pass and thrown away afterwards.

mod adam;
mod checkpoint;
mod conv;
mod init;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use conv::Padding;
pub use init::glorot_uniform_init;
pub use tensor::Tensor;

use conv::ConvGeometry;

use crate::error::{invalid, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: Padding,
    /// When false the weight and bias receive no gradient, even if they were
    /// recorded as trainable leaves. Input gradients still flow.
    pub trainable: bool,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::Same,
            trainable: true,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        trainable: bool,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    LeakyRelu {
        input: Var,
        alpha: f64,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    SumSquaredError {
        pred: Var,
        target: Var,
    },
    L2Penalty {
        weights: Vec<Var>,
        lambda: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded sequence of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input or parameter. Any gradient carried by `tensor` is
    /// dropped; the tape keeps its own.
    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> Var {
        tensor.clear_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// `input` is `N x C_in x H x W`, `weight` is `C_out x C_in x k x k` and
    /// `bias`, when present, has `C_out` entries.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        opts: Conv2dOptions,
    ) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let geom = ConvGeometry::new(dims, self.value(weight).shape(), opts.stride, opts.padding)?;
        if let Some(b) = bias {
            if self.value(b).numel() != geom.c_out {
                return invalid(format!(
                    "bias has {} entries for {} output channels",
                    self.value(b).numel(),
                    geom.c_out
                ));
            }
        }
        let out = conv::forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = vec![geom.batch, geom.c_out, geom.h_out, geom.w_out];
        let params_need =
            opts.trainable && (self.needs(weight) || bias.is_some_and(|b| self.needs(b)));
        let requires = self.needs(input) || params_need;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                trainable: opts.trainable,
            },
            requires,
        ))
    }

    /// Stride-1 "same" transposed convolution: the adjoint of
    /// [`conv2d`](Self::conv2d) with the same `weight`. `weight` is laid out
    /// `C_in x C_out x k x k`, i.e. exactly as the forward conv that maps
    /// `C_out` channels to `C_in`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let ws = self.value(weight).shape().to_vec();
        let [w_in, w_out, k, k2] = ws[..] else {
            return invalid(format!("transposed conv weight must be 4-D, got {ws:?}"));
        };
        if w_in != c || k != k2 {
            return invalid(format!(
                "transposed conv weight {ws:?} does not match {c} input channels"
            ));
        }
        // The underlying forward conv maps w_out channels (H x W) to c.
        let geom = ConvGeometry::new((n, w_out, h, w), &ws, 1, Padding::Same)?;
        let mut out = vec![0.0; n * geom.in_len()];
        conv::input_grad(
            self.value(input).data(),
            self.value(weight).data(),
            &geom,
            &mut out,
        );
        let requires = self.needs(input) || self.needs(weight);
        Ok(self.push(
            Tensor::new(vec![n, w_out, h, w], out)?,
            Op::ConvTranspose2d {
                input,
                weight,
                geom,
            },
            requires,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&alpha) {
            return invalid(format!("leaky ReLU slope {alpha} outside [0, 1)"));
        }
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v })
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let requires = self.needs(input);
        Ok(self.push(t, Op::LeakyRelu { input, alpha }, requires))
    }

    /// Stacks 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return invalid("concat needs at least one input");
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return invalid(format!(
                    "concat inputs disagree: {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(v).shape()
                ));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let requires = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(vec![n, total, h, w], data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            requires,
        ))
    }

    /// Channels `start..end` of a 4-D tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if start >= end || end > c {
            return invalid(format!(
                "channel range {start}..{end} invalid for {c} channels"
            ));
        }
        let plane = h * w;
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for s in 0..n {
            data.extend_from_slice(&src[(s * c + start) * plane..(s * c + end) * plane]);
        }
        let requires = self.needs(input);
        Ok(self.push(
            Tensor::new(vec![n, end - start, h, w], data)?,
            Op::SliceChannels { input, start },
            requires,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return invalid(format!(
                "add shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, requires))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let t = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * factor).collect(),
        )?;
        let requires = self.needs(input);
        Ok(self.push(t, Op::Scale { input, factor }, requires))
    }

    /// Batch-averaged squared error, `(1/M) * sum((pred - target)^2)` where
    /// `M` is the leading (batch) dimension.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return invalid(format!(
                "loss shapes differ: {:?} vs {:?}",
                p.shape(),
                t.shape()
            ));
        }
        let m = p.shape()[0] as f64;
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let requires = self.needs(pred) || self.needs(target);
        Ok(self.push(
            Tensor::scalar(sum / m),
            Op::SumSquaredError { pred, target },
            requires,
        ))
    }

    /// `lambda * sum_j ||W_j||^2`.
    pub fn l2_penalty(&mut self, weights: &[Var], lambda: f64) -> Result<Var> {
        let sum: f64 = weights
            .iter()
            .map(|&w| self.value(w).data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        let requires = weights.iter().any(|&w| self.needs(w));
        Ok(self.push(
            Tensor::scalar(lambda * sum),
            Op::L2Penalty {
                weights: weights.to_vec(),
                lambda,
            },
            requires,
        ))
    }

    /// Back-propagates from a scalar node, filling gradients of every node
    /// that requires one. Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            propagate(node, g, before)?;
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidState(
                        "non-finite gradient during backward".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn grad_slot(nodes: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![0.0; n]))
}

fn accumulate(nodes: &mut [Node], v: Var, g: &[f64]) {
    if let Some(slot) = grad_slot(nodes, v) {
        slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

/// Pushes the gradient `g` of `node` into its inputs, all of which live in
/// `before` (tape order guarantees inputs precede outputs).
fn propagate(node: &Node, g: &[f64], before: &mut [Node]) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            trainable,
        } => {
            if *trainable && before[weight.0].requires_grad {
                let dw = conv::weight_grad(before[input.0].value.data(), g, geom);
                accumulate(before, *weight, &dw);
            }
            if let Some(b) = bias {
                if *trainable && before[b.0].requires_grad {
                    let db = conv::bias_grad(g, geom);
                    accumulate(before, *b, &db);
                }
            }
            if before[input.0].requires_grad {
                let w = before[weight.0].value.data().to_vec();
                let slot = grad_slot(before, *input).expect("input requires grad");
                conv::input_grad(g, &w, geom, slot);
            }
        }
        Op::ConvTranspose2d {
            input,
            weight,
            geom,
        } => {
            // Forward was y = conv_input_grad(x, W). Its adjoint in x is the
            // forward conv; in W it is the conv weight gradient with the
            // roles of input and output swapped.
            if before[weight.0].requires_grad {
                let dw = conv::weight_grad(g, before[input.0].value.data(), geom);
                accumulate(before, *weight, &dw);
            }
            if before[input.0].requires_grad {
                let dx = conv::forward(g, before[weight.0].value.data(), None, geom);
                accumulate(before, *input, &dx);
            }
        }
        Op::LeakyRelu { input, alpha } => {
            if before[input.0].requires_grad {
                let dx: Vec<f64> = before[input.0]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { alpha * gy })
                    .collect();
                accumulate(before, *input, &dx);
            }
        }
        Op::Concat { inputs } => {
            let (n, total, h, w) = node.value.dims4()?;
            let plane = h * w;
            let mut offset = 0;
            for &v in inputs {
                let c = before[v.0].value.shape()[1];
                if before[v.0].requires_grad {
                    let mut part = Vec::with_capacity(n * c * plane);
                    for s in 0..n {
                        let start = (s * total + offset) * plane;
                        part.extend_from_slice(&g[start..start + c * plane]);
                    }
                    accumulate(before, v, &part);
                }
                offset += c;
            }
        }
        Op::SliceChannels { input, start } => {
            if before[input.0].requires_grad {
                let (n, c, h, w) = before[input.0].value.dims4()?;
                let width = node.value.shape()[1];
                let plane = h * w;
                let slot = grad_slot(before, *input).expect("input requires grad");
                for s in 0..n {
                    let dst = &mut slot[(s * c + start) * plane..(s * c + start + width) * plane];
                    let src = &g[s * width * plane..(s + 1) * width * plane];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Add { a, b } => {
            accumulate(before, *a, g);
            accumulate(before, *b, g);
        }
        Op::Scale { input, factor } => {
            let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
            accumulate(before, *input, &dx);
        }
        Op::SumSquaredError { pred, target } => {
            let p = before[pred.0].value.data();
            let t = before[target.0].value.data();
            let k = 2.0 * g[0] / before[pred.0].value.shape()[0] as f64;
            let diff: Vec<f64> = p.iter().zip(t).map(|(a, b)| k * (a - b)).collect();
            accumulate(before, *pred, &diff);
            let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
            accumulate(before, *target, &neg);
        }
        Op::L2Penalty { weights, lambda } => {
            let k = 2.0 * lambda * g[0];
            for &w in weights {
                if before[w.0].requires_grad {
                    let dw: Vec<f64> = before[w.0].value.data().iter().map(|v| k * v).collect();
                    accumulate(before, w, &dw);
                }
            }
        }
    }
    Ok(())
}

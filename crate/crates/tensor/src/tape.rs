//! Reverse-mode differentiation tape.
//!
//! Operations are recorded in topological order (inputs before
//! consumers) and values are computed eagerly. `backward` replays the
//! tape once in reverse, summing gradient contributions over fan-out.
//! Gradients are only propagated into subgraphs that can reach a leaf,
//! so constant data (frozen parameters, masks) costs nothing extra.

use crate::error::TensorError;
use crate::kernels;
use crate::tensor::Tensor;
use crate::Result;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `mul * x + add` elementwise; only the slope matters backward.
    Affine {
        input: NodeId,
        mul: f64,
    },
    Sum(NodeId),
    Relu(NodeId),
    Clamp01(NodeId),
    Sigmoid(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    Resize(NodeId),
    Rotate {
        input: NodeId,
        angle_deg: f64,
    },
    Crop {
        input: NodeId,
        row: usize,
        col: usize,
    },
    Embed {
        input: NodeId,
        row: usize,
        col: usize,
    },
    ConcatChannels(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when this node's subgraph contains a gradient-requiring leaf.
    grad_path: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar output with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. the node, if one was propagated to it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input that gradients will be computed for.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Record constant data; backward will not descend into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, grad_path: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad_path,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode {
                node: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn path(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].grad_path)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), self.path(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), self.path(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), self.path(&[a, b])))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, input: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| mul * v + add);
        Ok(self.push(value, Op::Affine { input, mul }, self.path(&[input])))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = Tensor::scalar(self.value(input).sum());
        Ok(self.push(value, Op::Sum(input), self.path(&[input])))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| v.max(0.0));
        Ok(self.push(value, Op::Relu(input), self.path(&[input])))
    }

    /// Clamp into `[0, 1]`. Identity (bitwise) for in-range values.
    pub fn clamp01(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| v.clamp(0.0, 1.0));
        Ok(self.push(value, Op::Clamp01(input), self.path(&[input])))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(self.push(value, Op::Sigmoid(input), self.path(&[input])))
    }

    /// Cross-correlation of a `[c,h,w]` input with a `[o,c,kh,kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let value = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            dilation,
            padding,
        )?;
        let mut involved = vec![input, kernel];
        involved.extend(bias);
        let grad_path = self.path(&involved);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                dilation,
                padding,
            },
            grad_path,
        ))
    }

    /// Corner-aligned bilinear resize of a `[c,h,w]` tensor.
    pub fn bilinear_resize(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        self.check(input)?;
        let value = kernels::resize_forward(self.value(input), out_h, out_w)?;
        Ok(self.push(value, Op::Resize(input), self.path(&[input])))
    }

    /// Rotation about the tensor center; out-of-bounds source reads 0.
    pub fn rotate(&mut self, input: NodeId, angle_deg: f64) -> Result<NodeId> {
        self.check(input)?;
        if !(-180.0..=180.0).contains(&angle_deg) {
            return Err(TensorError::invalid(
                "rotate",
                format!("angle {} outside [-180, 180]", angle_deg),
            ));
        }
        let value = kernels::rotate_forward(self.value(input), angle_deg)?;
        Ok(self.push(
            value,
            Op::Rotate { input, angle_deg },
            self.path(&[input]),
        ))
    }

    /// Spatial crop of a `[c,h,w]` tensor.
    pub fn crop(
        &mut self,
        input: NodeId,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    ) -> Result<NodeId> {
        self.check(input)?;
        let (c_n, in_h, in_w) = self.value(input).dims3()?;
        if row + height > in_h || col + width > in_w {
            return Err(TensorError::shape(
                "crop",
                format!(
                    "window {}x{} at ({},{}) exceeds input {}x{}",
                    height, width, row, col, in_h, in_w
                ),
            ));
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; c_n * height * width];
        for c in 0..c_n {
            for y in 0..height {
                let src = (c * in_h + row + y) * in_w + col;
                let dst = (c * height + y) * width;
                out[dst..dst + width].copy_from_slice(&x[src..src + width]);
            }
        }
        let value = Tensor::new(vec![c_n, height, width], out)?;
        Ok(self.push(value, Op::Crop { input, row, col }, self.path(&[input])))
    }

    /// Place a `[c,h,w]` tensor into a zero canvas of `out_h x out_w`.
    pub fn embed(
        &mut self,
        input: NodeId,
        out_h: usize,
        out_w: usize,
        row: usize,
        col: usize,
    ) -> Result<NodeId> {
        self.check(input)?;
        let (c_n, in_h, in_w) = self.value(input).dims3()?;
        if row + in_h > out_h || col + in_w > out_w {
            return Err(TensorError::shape(
                "embed",
                format!(
                    "content {}x{} at ({},{}) exceeds canvas {}x{}",
                    in_h, in_w, row, col, out_h, out_w
                ),
            ));
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; c_n * out_h * out_w];
        for c in 0..c_n {
            for y in 0..in_h {
                let src = (c * in_h + y) * in_w;
                let dst = (c * out_h + row + y) * out_w + col;
                out[dst..dst + in_w].copy_from_slice(&x[src..src + in_w]);
            }
        }
        let value = Tensor::new(vec![c_n, out_h, out_w], out)?;
        Ok(self.push(value, Op::Embed { input, row, col }, self.path(&[input])))
    }

    /// Concatenate `[c_i,h,w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(TensorError::invalid("concat_channels", "no inputs"));
        }
        for &id in inputs {
            self.check(id)?;
        }
        let (_, h, w) = self.value(inputs[0]).dims3()?;
        let mut total_c = 0;
        for &id in inputs {
            let (c, ih, iw) = self.value(id).dims3()?;
            if (ih, iw) != (h, w) {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("spatial dims {}x{} differ from {}x{}", ih, iw, h, w),
                ));
            }
            total_c += c;
        }
        let mut out = Vec::with_capacity(total_c * h * w);
        for &id in inputs {
            out.extend_from_slice(self.value(id).data());
        }
        let value = Tensor::new(vec![total_c, h, w], out)?;
        let grad_path = self.path(inputs);
        Ok(self.push(value, Op::ConcatChannels(inputs.to_vec()), grad_path))
    }

    /// Smallest distance of any recorded nonlinearity input to its kink
    /// (0 for relu, {0, 1} for clamp). Finite-difference oracles are only
    /// trustworthy when this is comfortably larger than the probe step.
    pub fn min_kink_distance(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            let (input, thresholds): (NodeId, &[f64]) = match node.op {
                Op::Relu(input) => (input, &[0.0]),
                Op::Clamp01(input) => (input, &[0.0, 1.0]),
                _ => continue,
            };
            for &v in self.nodes[input.0].value.data() {
                for &t in thresholds {
                    let d = (v - t).abs();
                    if min.map_or(true, |m| d < m) {
                        min = Some(d);
                    }
                }
            }
        }
        min
    }

    /// Reverse sweep from a scalar output. Returns the gradient of the
    /// output with respect to every node on a gradient path; accumulation
    /// over fan-out is by summation.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.check(output)?;
        let out_value = self.value(output);
        if out_value.numel() != 1 {
            return Err(TensorError::NonScalarOutput {
                shape: out_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(out_value.shape().to_vec(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].grad_path {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(grad);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &grad, |g, _| g.clone())?;
                    self.accumulate(&mut grads, *b, &grad, |g, _| g.clone())?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &grad, |g, _| g.clone())?;
                    self.accumulate(&mut grads, *b, &grad, |g, _| g.map(|v| -v))?;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].grad_path {
                        let contrib = grad.zip(self.value(b), |g, v| g * v)?;
                        self.add_grad(&mut grads, a, contrib)?;
                    }
                    if self.nodes[b.0].grad_path {
                        let contrib = grad.zip(self.value(a), |g, v| g * v)?;
                        self.add_grad(&mut grads, b, contrib)?;
                    }
                }
                Op::Affine { input, mul } => {
                    let contrib = grad.map(|g| g * mul);
                    self.add_grad(&mut grads, *input, contrib)?;
                }
                Op::Sum(input) => {
                    let up = grad.data()[0];
                    let contrib =
                        Tensor::filled(self.value(*input).shape().to_vec(), up);
                    self.add_grad(&mut grads, *input, contrib)?;
                }
                Op::Relu(input) => {
                    let contrib =
                        grad.zip(self.value(*input), |g, v| if v > 0.0 { g } else { 0.0 })?;
                    self.add_grad(&mut grads, *input, contrib)?;
                }
                Op::Clamp01(input) => {
                    let contrib = grad.zip(self.value(*input), |g, v| {
                        if v > 0.0 && v < 1.0 {
                            g
                        } else {
                            0.0
                        }
                    })?;
                    self.add_grad(&mut grads, *input, contrib)?;
                }
                Op::Sigmoid(input) => {
                    // Node value is the sigmoid output s; ds/dx = s(1-s).
                    let contrib = grad.zip(&self.nodes[i].value, |g, s| g * s * (1.0 - s))?;
                    self.add_grad(&mut grads, *input, contrib)?;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    dilation,
                    padding,
                } => {
                    let (input, kernel, bias) = (*input, *kernel, *bias);
                    let mut g_in = self
                        .nodes[input.0]
                        .grad_path
                        .then(|| Tensor::zeros(self.value(input).shape().to_vec()));
                    let mut g_k = self
                        .nodes[kernel.0]
                        .grad_path
                        .then(|| Tensor::zeros(self.value(kernel).shape().to_vec()));
                    let mut g_b = bias.and_then(|b| {
                        self.nodes[b.0]
                            .grad_path
                            .then(|| Tensor::zeros(self.value(b).shape().to_vec()))
                    });
                    kernels::conv2d_backward(
                        self.value(input),
                        self.value(kernel),
                        &grad,
                        *stride,
                        *dilation,
                        *padding,
                        g_in.as_mut(),
                        g_k.as_mut(),
                        g_b.as_mut(),
                    )?;
                    if let Some(g) = g_in {
                        self.add_grad(&mut grads, input, g)?;
                    }
                    if let Some(g) = g_k {
                        self.add_grad(&mut grads, kernel, g)?;
                    }
                    if let (Some(b), Some(g)) = (bias, g_b) {
                        self.add_grad(&mut grads, b, g)?;
                    }
                }
                Op::Resize(input) => {
                    let shape = self.value(*input).dims3()?;
                    let mut g_in = Tensor::zeros(self.value(*input).shape().to_vec());
                    kernels::resize_backward(shape, &grad, &mut g_in)?;
                    self.add_grad(&mut grads, *input, g_in)?;
                }
                Op::Rotate { input, angle_deg } => {
                    let shape = self.value(*input).dims3()?;
                    let mut g_in = Tensor::zeros(self.value(*input).shape().to_vec());
                    kernels::rotate_backward(shape, *angle_deg, &grad, &mut g_in)?;
                    self.add_grad(&mut grads, *input, g_in)?;
                }
                Op::Crop { input, row, col } => {
                    let (c_n, in_h, in_w) = self.value(*input).dims3()?;
                    let (_, gh, gw) = grad.dims3()?;
                    let mut g_in = Tensor::zeros(vec![c_n, in_h, in_w]);
                    {
                        let gi = g_in.data_mut();
                        let g = grad.data();
                        for c in 0..c_n {
                            for y in 0..gh {
                                let dst = (c * in_h + row + y) * in_w + col;
                                let src = (c * gh + y) * gw;
                                gi[dst..dst + gw].copy_from_slice(&g[src..src + gw]);
                            }
                        }
                    }
                    self.add_grad(&mut grads, *input, g_in)?;
                }
                Op::Embed { input, row, col } => {
                    let (c_n, in_h, in_w) = self.value(*input).dims3()?;
                    let (_, gh, gw) = grad.dims3()?;
                    let mut g_in = Tensor::zeros(vec![c_n, in_h, in_w]);
                    {
                        let gi = g_in.data_mut();
                        let g = grad.data();
                        for c in 0..c_n {
                            for y in 0..in_h {
                                let src = (c * gh + row + y) * gw + col;
                                let dst = (c * in_h + y) * in_w;
                                gi[dst..dst + in_w].copy_from_slice(&g[src..src + in_w]);
                            }
                        }
                    }
                    self.add_grad(&mut grads, *input, g_in)?;
                }
                Op::ConcatChannels(inputs) => {
                    let (_, h, w) = grad.dims3()?;
                    let mut offset = 0;
                    for &id in inputs {
                        let (c, _, _) = self.value(id).dims3()?;
                        let span = c * h * w;
                        if self.nodes[id.0].grad_path {
                            let slice =
                                grad.data()[offset..offset + span].to_vec();
                            let contrib = Tensor::new(vec![c, h, w], slice)?;
                            self.add_grad(&mut grads, id, contrib)?;
                        }
                        offset += span;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: NodeId,
        grad: &Tensor,
        f: impl Fn(&Tensor, &Tensor) -> Tensor,
    ) -> Result<()> {
        if !self.nodes[target.0].grad_path {
            return Ok(());
        }
        let contrib = f(grad, self.value(target));
        self.add_grad(grads, target, contrib)
    }

    fn add_grad(
        &self,
        grads: &mut [Option<Tensor>],
        target: NodeId,
        contrib: Tensor,
    ) -> Result<()> {
        if !self.nodes[target.0].grad_path {
            return Ok(());
        }
        grads[target.0] = Some(match grads[target.0].take() {
            Some(existing) => existing.zip(&contrib, |a, b| a + b)?,
            None => contrib,
        });
        Ok(())
    }
}

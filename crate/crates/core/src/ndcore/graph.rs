use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, ConvDims};
use super::{Gradients, ParameterSet, RunningStats, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Training mode enables batch statistics and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv1d,
    Depthwise,
    BatchNorm,
    LeakyRelu,
    MaxPool,
    Dropout,
    Linear,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Abs,
    ConcatWidth,
    ConcatBatch,
    SliceBatch,
    SumSquares,
    Scale,
    BceMean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dims: ConvDims,
    },
    Depthwise {
        x: NodeId,
        w: NodeId,
        kernel: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        /// Empty when the op is an identity (eval mode or zero rate).
        mask: Vec<f64>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        features: usize,
        out: usize,
    },
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Abs(NodeId),
    ConcatWidth(NodeId, NodeId),
    ConcatBatch(NodeId, NodeId),
    SliceBatch {
        x: NodeId,
        start: usize,
    },
    SumSquares(NodeId),
    Scale {
        x: NodeId,
        factor: f64,
    },
    BceMean {
        p: NodeId,
        labels: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Depthwise { .. } => OpKind::Depthwise,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Linear { .. } => OpKind::Linear,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Abs(_) => OpKind::Abs,
            Op::ConcatWidth(..) => OpKind::ConcatWidth,
            Op::ConcatBatch(..) => OpKind::ConcatBatch,
            Op::SliceBatch { .. } => OpKind::SliceBatch,
            Op::SumSquares(_) => OpKind::SumSquares,
            Op::Scale { .. } => OpKind::Scale,
            Op::BceMean { .. } => OpKind::BceMean,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the log terms of the loss.
pub const BCE_EPS: f64 = 1e-12;

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    /// Accumulated gradients of leaves, persisted across backward calls.
    leaf_grads: Vec<Option<Tensor>>,
    /// Gradients of every node from the most recent backward pass.
    pass_grads: Vec<Option<Tensor>>,
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, delta: Vec<f64>) {
    match &mut grads[id.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => {
            let shape = nodes[id.0].value.shape().to_vec();
            *slot = Some(Tensor::new(shape, delta).expect("gradient matches node shape"));
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(
            value.all_finite() || matches!(op, Op::Leaf),
            "non-finite value from {:?}",
            op.kind()
        );
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn nodes_of_kind(&self, kind: OpKind) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.kind() == kind)
            .map(NodeId)
            .collect()
    }

    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// A constant or input leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding the named parameter. Repeated calls return the same node,
    /// so every use of a parameter shares one gradient.
    pub fn param(&mut self, set: &ParameterSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = set.get(name)?.value.clone();
        let id = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn dims3(&self, id: NodeId, op: &'static str) -> Result<(usize, usize, usize)> {
        self.value(id).dims3().map_err(|_| {
            Error::shape(
                op,
                format!(
                    "input shape {:?} is not (batch, channels, width)",
                    self.value(id).shape()
                ),
            )
        })
    }

    // ------------------------------------------------------------------
    // Layer ops

    /// Cross-correlation over width with full channel mixing.
    /// `w` is `(out_channels, in_channels, kernel)`, `b` is `(out_channels)`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, padding: usize) -> Result<NodeId> {
        let (n, cin, width) = self.dims3(x, "conv1d")?;
        let (cout, wcin, kernel) = match self.value(w).shape()[..] {
            [o, i, k] => (o, i, k),
            ref s => {
                return Err(Error::shape(
                    "conv1d",
                    format!("weight shape {s:?} is not (out, in, kernel)"),
                ))
            }
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv1d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias shape {:?}, expected [{cout}]", self.value(b).shape()),
                ));
            }
        }
        let out_width = kernels::output_width(width, kernel, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!("kernel {kernel} does not fit width {width} with padding {padding}"),
            )
        })?;
        let dims = ConvDims {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            width,
            kernel,
            stride,
            padding,
            out_width,
        };
        let out = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new(vec![n, cout, out_width], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, dims }))
    }

    /// Per-channel convolution, same padding, stride 1. `w` is `(channels, 1, kernel)`.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (n, c, width) = self.dims3(x, "depthwise_conv1d")?;
        let kernel = match self.value(w).shape()[..] {
            [wc, 1, k] if wc == c => k,
            ref s => {
                return Err(Error::shape(
                    "depthwise_conv1d",
                    format!("weight shape {s:?} does not match {c} channels"),
                ))
            }
        };
        if kernel % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("kernel {kernel} must be odd for same padding"),
            ));
        }
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), n, c, width, kernel);
        let value = Tensor::new(vec![n, c, width], out)?;
        Ok(self.push(value, Op::Depthwise { x, w, kernel }))
    }

    /// 1×1 channel mixing followed by a per-channel width convolution.
    pub fn separable_conv1d(&mut self, x: NodeId, pointwise: NodeId, depthwise: NodeId) -> Result<NodeId> {
        if self.value(pointwise).shape().get(2) != Some(&1) {
            return Err(Error::shape(
                "separable_conv1d",
                format!(
                    "pointwise weight shape {:?} must have kernel 1",
                    self.value(pointwise).shape()
                ),
            ));
        }
        let mixed = self.conv1d(x, pointwise, None, 1, 0)?;
        self.depthwise_conv1d(mixed, depthwise)
    }

    /// Batch normalization over `(batch × width)` per channel. In train mode
    /// the batch statistics are used and folded into `running`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut RunningStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, width) = self.dims3(x, "batch_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] || running.mean.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("affine/stat parameters do not match {c} channels"),
            ));
        }
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, width);
                running.update(&mean, &var, momentum);
                (mean, var, true)
            }
            Mode::Eval => {
                if !running.is_initialized() {
                    return Err(Error::UninitializedRunningStats("batch_norm".into()));
                }
                (running.mean.clone(), running.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batch_norm_apply(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &inv_std,
            n,
            c,
            width,
        );
        let value = Tensor::new(vec![n, c, width], y)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Elementwise `max(x, slope·x)` for `slope` in (0, 1).
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            if *v <= 0.0 {
                *v *= slope;
            }
        }
        self.push(value, Op::LeakyRelu { x, slope })
    }

    /// Windowed max along width; ties route to the first index.
    pub fn max_pool1d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (n, c, width) = self.dims3(x, "max_pool1d")?;
        if window == 0 || stride == 0 {
            return Err(Error::shape("max_pool1d", "window and stride must be positive"));
        }
        if window > width {
            return Err(Error::shape(
                "max_pool1d",
                format!("window {window} exceeds width {width}"),
            ));
        }
        let out_width = (width - window) / stride + 1;
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), n * c, width, window, stride, out_width);
        let value = Tensor::new(vec![n, c, out_width], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors scaled by `1/(1 − rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let mut value = self.value(x).clone();
        let mask = if mode == Mode::Train && rate > 0.0 {
            let scale = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..value.len())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
                .collect();
            for (v, m) in value.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            mask
        } else {
            Vec::new()
        };
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Fully connected layer on the flattened `(channels × width)` features of
    /// each sample. `w` is `(out, features)`; output is `(batch, out, 1)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let n = xs[0];
        let features: usize = xs[1..].iter().product();
        let out = match self.value(w).shape()[..] {
            [o, f] if f == features => o,
            ref s => {
                return Err(Error::shape(
                    "linear",
                    format!("weight shape {s:?} does not take {features} features"),
                ))
            }
        };
        if self.value(b).shape() != [out] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?}, expected [{out}]", self.value(b).shape()),
            ));
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            features,
            out,
        );
        let value = Tensor::new(vec![n, out, 1], y)?;
        Ok(self.push(value, Op::Linear { x, w, b, features, out }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = kernels::sigmoid(*v);
        }
        self.push(value, Op::Sigmoid(x))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(a, b, name)?;
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = v.abs();
        }
        self.push(value, Op::Abs(x))
    }

    /// Join `(n, c, w₁)` and `(n, c, w₂)` into `(n, c, w₁ + w₂)`.
    pub fn concat_width(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, c, wa) = self.dims3(a, "concat_width")?;
        let (nb, cb, wb) = self.dims3(b, "concat_width")?;
        if (n, c) != (nb, cb) {
            return Err(Error::shape("concat_width", format!("({n}, {c}) vs ({nb}, {cb})")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * c * (wa + wb));
        for r in 0..n * c {
            data.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        let value = Tensor::new(vec![n, c, wa + wb], data)?;
        Ok(self.push(value, Op::ConcatWidth(a, b)))
    }

    /// Stack two batches along the batch axis.
    pub fn concat_batch(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, c, w) = self.dims3(a, "concat_batch")?;
        let (nb, cb, wb) = self.dims3(b, "concat_batch")?;
        if (c, w) != (cb, wb) {
            return Err(Error::shape("concat_batch", format!("({c}, {w}) vs ({cb}, {wb})")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![na + nb, c, w], data)?;
        Ok(self.push(value, Op::ConcatBatch(a, b)))
    }

    /// Samples `start .. start + len` of a batch.
    pub fn slice_batch(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c, w) = self.dims3(x, "slice_batch")?;
        if start + len > n {
            return Err(Error::shape(
                "slice_batch",
                format!("{start}..{} of batch {n}", start + len),
            ));
        }
        let data = self.value(x).data()[start * c * w..(start + len) * c * w].to_vec();
        let value = Tensor::new(vec![len, c, w], data)?;
        Ok(self.push(value, Op::SliceBatch { x, start }))
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v *= factor;
        }
        self.push(value, Op::Scale { x, factor })
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
    pub fn bce_mean(&mut self, p: NodeId, labels: &[f64]) -> Result<NodeId> {
        let pv = self.value(p).data();
        if pv.len() != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "bce_mean",
                format!("{} probabilities vs {} labels", pv.len(), labels.len()),
            ));
        }
        let n = labels.len() as f64;
        let total: f64 = pv
            .iter()
            .zip(labels)
            .map(|(&p, &y)| y * p.max(BCE_EPS).ln() + (1.0 - y) * (1.0 - p).max(BCE_EPS).ln())
            .sum();
        Ok(self.push(
            Tensor::scalar(-total / n),
            Op::BceMean {
                p,
                labels: labels.to_vec(),
            },
        ))
    }

    // ------------------------------------------------------------------
    // Differentiation

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`]; parameters off the loss path keep
    /// a zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let gd = g.data();
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv1d { x, w, b, dims } => {
                    let (dx, dw, db) =
                        kernels::conv1d_backward(gd, nodes[x.0].value.data(), nodes[w.0].value.data(), dims);
                    accumulate(&mut grads, nodes, *x, dx);
                    accumulate(&mut grads, nodes, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, nodes, *b, db);
                    }
                }
                Op::Depthwise { x, w, kernel } => {
                    let (n, c, width) = nodes[x.0].value.dims3()?;
                    let (dx, dw) = kernels::depthwise_backward(
                        gd,
                        nodes[x.0].value.data(),
                        nodes[w.0].value.data(),
                        n,
                        c,
                        width,
                        *kernel,
                    );
                    accumulate(&mut grads, nodes, *x, dx);
                    accumulate(&mut grads, nodes, *w, dw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, width) = nodes[x.0].value.dims3()?;
                    let (dx, dgamma, dbeta) = kernels::batch_norm_backward(
                        gd,
                        xhat,
                        nodes[gamma.0].value.data(),
                        inv_std,
                        *batch_stats,
                        n,
                        c,
                        width,
                    );
                    accumulate(&mut grads, nodes, *x, dx);
                    accumulate(&mut grads, nodes, *gamma, dgamma);
                    accumulate(&mut grads, nodes, *beta, dbeta);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &g)| if v > 0.0 { g } else { g * slope })
                        .collect();
                    accumulate(&mut grads, nodes, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; nodes[x.0].value.len()];
                    for (&j, &g) in argmax.iter().zip(gd) {
                        dx[j] += g;
                    }
                    accumulate(&mut grads, nodes, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = if mask.is_empty() {
                        gd.to_vec()
                    } else {
                        gd.iter().zip(mask).map(|(g, m)| g * m).collect()
                    };
                    accumulate(&mut grads, nodes, *x, dx);
                }
                Op::Linear { x, w, b, features, out } => {
                    let n = nodes[x.0].value.shape()[0];
                    let (dx, dw, db) = kernels::linear_backward(
                        gd,
                        nodes[x.0].value.data(),
                        nodes[w.0].value.data(),
                        n,
                        *features,
                        *out,
                    );
                    accumulate(&mut grads, nodes, *x, dx);
                    accumulate(&mut grads, nodes, *w, dw);
                    accumulate(&mut grads, nodes, *b, db);
                }
                Op::Sigmoid(x) => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&y, &g)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, nodes, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, nodes, *a, gd.to_vec());
                    accumulate(&mut grads, nodes, *b, gd.to_vec());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, nodes, *a, gd.to_vec());
                    accumulate(&mut grads, nodes, *b, gd.iter().map(|g| -g).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let da = gd.iter().zip(vb).map(|(g, q)| g * q).collect();
                    let db = gd.iter().zip(va).map(|(g, p)| g * p).collect();
                    accumulate(&mut grads, nodes, *a, da);
                    accumulate(&mut grads, nodes, *b, db);
                }
                Op::Abs(x) => {
                    let dx = nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &g)| {
                            if v > 0.0 {
                                g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, nodes, *x, dx);
                }
                Op::ConcatWidth(a, b) => {
                    let (n, c, wa) = nodes[a.0].value.dims3()?;
                    let wb = nodes[b.0].value.shape()[2];
                    let mut da = Vec::with_capacity(n * c * wa);
                    let mut db = Vec::with_capacity(n * c * wb);
                    for r in 0..n * c {
                        let row = &gd[r * (wa + wb)..(r + 1) * (wa + wb)];
                        da.extend_from_slice(&row[..wa]);
                        db.extend_from_slice(&row[wa..]);
                    }
                    accumulate(&mut grads, nodes, *a, da);
                    accumulate(&mut grads, nodes, *b, db);
                }
                Op::ConcatBatch(a, b) => {
                    let la = nodes[a.0].value.len();
                    accumulate(&mut grads, nodes, *a, gd[..la].to_vec());
                    accumulate(&mut grads, nodes, *b, gd[la..].to_vec());
                }
                Op::SliceBatch { x, start } => {
                    let xv = &nodes[x.0].value;
                    let per = xv.len() / xv.shape()[0];
                    let mut dx = vec![0.0; xv.len()];
                    dx[start * per..start * per + gd.len()].copy_from_slice(gd);
                    accumulate(&mut grads, nodes, *x, dx);
                }
                Op::SumSquares(x) => {
                    let dx = nodes[x.0].value.data().iter().map(|v| 2.0 * v * gd[0]).collect();
                    accumulate(&mut grads, nodes, *x, dx);
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, nodes, *x, gd.iter().map(|g| g * factor).collect());
                }
                Op::BceMean { p, labels } => {
                    let n = labels.len() as f64;
                    let dp = nodes[p.0]
                        .value
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            let mut d = 0.0;
                            if p > BCE_EPS {
                                d -= y / p;
                            }
                            if 1.0 - p > BCE_EPS {
                                d += (1.0 - y) / (1.0 - p);
                            }
                            gd[0] * d / n
                        })
                        .collect();
                    accumulate(&mut grads, nodes, *p, dp);
                }
            }
            grads[i] = Some(g);
        }

        if self.leaf_grads.len() < grads.len() {
            self.leaf_grads.resize(grads.len(), None);
        }
        for (i, g) in grads.iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.nodes[i].op, g) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        self.pass_grads = grads;
        Ok(())
    }

    /// Gradient of a node. Leaves report their accumulated gradient; other
    /// nodes report the gradient from the latest backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        match self.nodes[id.0].op {
            Op::Leaf => self.leaf_grads.get(id.0).and_then(Option::as_ref),
            _ => self.pass_grads.get(id.0).and_then(Option::as_ref),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
        self.pass_grads.clear();
    }

    /// One gradient per entry of `set`; zeros for parameters that never
    /// reached the loss.
    pub fn gradients(&self, set: &ParameterSet) -> Gradients {
        set.iter()
            .map(|(name, p)| {
                let g = self
                    .param_node(name)
                    .and_then(|id| self.grad(id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
                (name.to_string(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t3(n: usize, c: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![n, c, w], data).unwrap()
    }

    #[test]
    fn conv_scaling() {
        let mut g = Graph::new();
        let x = g.input(t3(1, 1, 3, vec![1.0, 2.0, 3.0]));
        let w = g.input(t3(1, 1, 1, vec![2.0]));
        let b = g.input(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = g.conv1d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data = vec![0.5, -1.0, 3.0, 2.0, 7.0];
        let x = g.input(t3(1, 1, 5, data.clone()));
        let w = g.input(t3(1, 1, 3, vec![0.0, 1.0, 0.0]));
        let y = g.conv1d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input(t3(1, 2, 4, vec![0.0; 8]));
        let w = g.input(t3(1, 3, 1, vec![0.0; 3]));
        assert!(matches!(g.conv1d(x, w, None, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::new();
        let x = g.input(t3(1, 1, 3, vec![-1.0, 0.0, 2.0]));
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).data(), &[-0.1, 0.0, 2.0]);
        let x = g.input(t3(1, 1, 2, vec![0.5, 4.0]));
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).data(), &[0.5, 4.0]);
    }

    #[test]
    fn max_pool_values_and_ties() {
        let mut g = Graph::new();
        let x = g.input(t3(1, 1, 4, vec![1.0, 3.0, 2.0, 4.0]));
        let y = g.max_pool1d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let x = g.input(t3(1, 1, 4, vec![5.0; 4]));
        let y = g.max_pool1d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 5.0]);
        let s = g.sum_squares(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[10.0, 0.0, 10.0, 0.0]);

        let x = g.input(t3(1, 1, 2, vec![1.0, 2.0]));
        assert!(g.max_pool1d(x, 3, 1).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let x = g.input(t3(1, 1, 10, data.clone()));
        let y = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let y = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new();
        let n = 100_000;
        let x = g.input(t3(1, 1, n, vec![1.0; n]));
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let out = g.value(y).data();
        let survivors = out.iter().filter(|v| **v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.5).abs() <= 0.01, "{survivors}");
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() <= 0.02, "{mean}");
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let mut g = Graph::new();
        let x = g.input(t3(2, 1, 3, vec![4.0; 6]));
        let gamma = g.input(Tensor::new(vec![1], vec![1.7]).unwrap());
        let beta = g.input(Tensor::new(vec![1], vec![0.3]).unwrap());
        let mut rs = RunningStats::new(1);
        let y = g.batch_norm(x, gamma, beta, &mut rs, Mode::Train, 0.1, 1e-5).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
        assert_eq!(rs.updates, 1);
        assert!((rs.mean[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_standardized_input_passes_through() {
        // per-channel mean 0, biased variance 1
        let data = vec![1.0, -1.0, 1.0, -1.0, 2.0, 0.0, -2.0, 0.0];
        let mut g = Graph::new();
        let x = g.input(t3(1, 2, 4, data.clone()));
        let gamma = g.input(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
        let beta = g.input(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        let mut rs = RunningStats::new(2);
        let y = g.batch_norm(x, gamma, beta, &mut rs, Mode::Train, 0.1, 1e-5).unwrap();
        let scaled: Vec<f64> = vec![
            1.0,
            -1.0,
            1.0,
            -1.0,
            2.0 / 2.0_f64.sqrt(),
            0.0,
            -2.0 / 2.0_f64.sqrt(),
            0.0,
        ];
        for (a, b) in g.value(y).data().iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_norm_eval_requires_training_pass() {
        let mut g = Graph::new();
        let x = g.input(t3(1, 1, 2, vec![1.0, 2.0]));
        let gamma = g.input(Tensor::new(vec![1], vec![1.0]).unwrap());
        let beta = g.input(Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut rs = RunningStats::new(1);
        assert!(matches!(
            g.batch_norm(x, gamma, beta, &mut rs, Mode::Eval, 0.1, 1e-5),
            Err(Error::UninitializedRunningStats(_))
        ));
    }

    #[test]
    fn sigmoid_and_concat() {
        let mut g = Graph::new();
        let x = g.input(t3(1, 1, 1, vec![0.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data(), &[0.5]);
        let a = g.input(t3(2, 3, 4, vec![1.0; 24]));
        let b = g.input(t3(2, 3, 5, vec![2.0; 30]));
        let c = g.concat_width(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 9]);
        assert_eq!(g.value(c).data()[3..6], [1.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_squares_gradient_is_two_theta() {
        let mut set = ParameterSet::new(0);
        let theta = vec![0.5, -1.25, 3.0];
        set.insert("theta", ParamKind::Weight, Tensor::new(vec![3], theta.clone()).unwrap())
            .unwrap();
        set.insert(
            "unused",
            ParamKind::Weight,
            Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = g.param(&set, "theta").unwrap();
        let loss = g.sum_squares(p);
        g.backward(loss).unwrap();
        let grads = g.gradients(&set);
        let expected: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        assert_eq!(grads["theta"].data(), &expected[..]);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);

        // a second pass without zeroing doubles the accumulated gradient
        g.backward(loss).unwrap();
        let twice: Vec<f64> = expected.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.gradients(&set)["theta"].data(), &twice[..]);
        g.zero_grad();
        assert_eq!(g.gradients(&set)["theta"].data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(t3(1, 1, 2, vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.input(t3(1, 1, 1, vec![0.5]));
        let l = g.bce_mean(p, &[1.0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

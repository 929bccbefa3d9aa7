use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d_output_size, conv_backward, conv_forward, ConvGeom};
use super::{gemm, MatRef, ParamId, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
    /// Batch statistics feed the running averages; dropout is off.
    Calibrate,
}

pub type BnMode = Mode;

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.1,
        }
    }
}

enum Op<T> {
    Input,
    Variable,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        out_channels: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LeakyRelu {
        input: NodeId,
        leak: T,
    },
    Dropout {
        input: NodeId,
        mask: Vec<T>,
    },
    AvgPool2d {
        input: NodeId,
        size: usize,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Reshape {
        input: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    Sum {
        input: NodeId,
    },
    Mean {
        input: NodeId,
    },
    Square {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<T>,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    Mse {
        pred: NodeId,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations for one forward pass.
///
/// Nodes are appended in execution order, so the tape is topologically
/// sorted by construction and [`Graph::backward`] walks it in reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(what: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} produced a non-finite value"
        )))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Leaf whose gradient is reported through [`Gradients::node`].
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Variable, true)
    }

    /// Leaf bound to a learnable tensor; its gradient lands in the `ParamSet`.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        let t = params.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("param shape");
        let needs = t.requires_grad;
        self.push(value, Op::Param(id), needs)
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects NCHW input and OIHW kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                xs[1], ks[1]
            )));
        }
        if ks[2] != ks[3] {
            return Err(Error::shape(format!(
                "conv2d kernel must be square, got {ks:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    ks[0]
                )));
            }
        }
        let out_h = conv2d_output_size(xs[2], ks[2], stride, padding)?;
        let out_w = conv2d_output_size(xs[3], ks[3], stride, padding)?;
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ks[2],
            stride,
            padding,
            out_h,
            out_w,
        };
        let out = conv_forward(
            &geom,
            xs[0],
            ks[0],
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let needs = self.ng(input) || self.ng(kernel) || bias.is_some_and(|b| self.ng(b));
        let value = Tensor::new(vec![xs[0], ks[0], out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_channels: ks[0],
            },
            needs,
        ))
    }

    /// Per-channel normalisation over every axis except axis 1.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mode: BnMode,
        stats: &mut RunningStats<T>,
    ) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::invalid("batch_norm eps must be positive"));
        }
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!(
                "batch_norm needs at least 2 axes, got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if n == 0 {
            return Err(Error::shape("batch_norm on an empty batch"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm gamma/beta must have {c} entries, got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batch_norm running statistics sized for a different layer",
            ));
        }
        let spatial: usize = shape[2..].iter().product();
        let count = n * spatial;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps_t = T::from_f64_lossy(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let batch_stats = mode != Mode::Eval;
        if batch_stats {
            let inv = T::one() / T::from_usize(count).unwrap();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    mean[ch] += x[base..base + spatial].iter().copied().sum::<T>();
                }
            }
            for m in &mut mean {
                *m *= inv;
            }
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    let mu = mean[ch];
                    var[ch] += x[base..base + spatial]
                        .iter()
                        .map(|&v| (v - mu) * (v - mu))
                        .sum::<T>();
                }
            }
            for v in &mut var {
                *v *= inv;
            }
            let mom = T::from_f64_lossy(stats.momentum);
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                let (mu, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in base..base + spatial {
                    let h = (x[i] - mu) * is;
                    xhat[i] = h;
                    out[i] = gc * h + bc;
                }
            }
        }
        let needs = self.ng(input) || self.ng(gamma) || self.ng(beta);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, leak: f64) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&leak) {
            return Err(Error::invalid(format!("leak {leak} outside [0, 1]")));
        }
        let leak = T::from_f64_lossy(leak);
        let x = self.value(input);
        let out: Vec<T> = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { leak * v })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.ng(input);
        Ok(self.push(value, Op::LeakyRelu { input, leak }, needs))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` in train mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode != Mode::Train || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.ng(input);
        Ok(self.push(value, Op::Dropout { input, mask }, needs))
    }

    /// Non-overlapping `size×size` average pooling (trailing rows/cols dropped).
    pub fn avg_pool2d(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::shape(format!("avg_pool2d({size}) on shape {s:?}")));
        }
        let (oh, ow) = (s[2] / size, s[3] / size);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        let inv = T::one() / T::from_usize(size * size).unwrap();
        for plane in 0..s[0] * s[1] {
            let src = &x[plane * s[2] * s[3]..(plane + 1) * s[2] * s[3]];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for dy in 0..size {
                    let row = &src[(oy * size + dy) * s[3]..];
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        for dx in 0..size {
                            acc += row[ox * size + dx];
                        }
                        dst[oy * ow + ox] += acc;
                    }
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let needs = self.ng(input);
        Ok(self.push(value, Op::AvgPool2d { input, size }, needs))
    }

    /// Mean over the spatial axes: NCHW → NC.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!(
                "global_avg_pool expects NCHW, got {s:?}"
            )));
        }
        let plane = s[2] * s[3];
        let inv = T::one() / T::from_usize(plane).unwrap();
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        let needs = self.ng(input);
        Ok(self.push(value, Op::GlobalAvgPool { input }, needs))
    }

    /// `x·Wᵀ + b` with `x: (N,F)`, `W: (O,F)`, `b: (O)`.
    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "linear expects (N,F)·(O,F)ᵀ, got {xs:?} and {ws:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(format!(
                    "linear bias shape {:?} does not match {} outputs",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let mut out = vec![T::zero(); xs[0] * ws[0]];
        gemm(
            MatRef::new(self.value(input).data(), xs[0], xs[1]),
            MatRef::new(self.value(weight).data(), ws[0], ws[1]).t(),
            &mut out,
            T::zero(),
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(ws[0]) {
                for (v, &bo) in row.iter_mut().zip(bd) {
                    *v += bo;
                }
            }
        }
        let needs = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        let value = Tensor::new(vec![xs[0], ws[0]], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).clone().reshape(shape)?;
        let needs = self.ng(input);
        Ok(self.push(value, Op::Reshape { input }, needs))
    }

    /// Concatenate along axis 1; all other axes must agree.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape(format!(
                "concat needs at least 2 axes, got {s0:?}"
            )));
        }
        let inner: usize = s0[2..].iter().product();
        let mut channels = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape(format!(
                    "concat shape mismatch: {s0:?} vs {s:?}"
                )));
            }
            channels += s[1];
        }
        let n = s0[0];
        let mut out = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &id in inputs {
                let v = self.value(id);
                let block = v.shape()[1] * inner;
                out.extend_from_slice(&v.data()[s * block..(s + 1) * block]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let needs = inputs.iter().any(|&i| self.ng(i));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let factor = T::from_f64_lossy(factor);
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.ng(input);
        Ok(self.push(value, Op::Scale { input, factor }, needs))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let total = self.value(input).data().iter().copied().sum::<T>();
        let needs = self.ng(input);
        Ok(self.push(Tensor::scalar(total), Op::Sum { input }, needs))
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let m = x.data().iter().copied().sum::<T>() / T::from_usize(x.len()).unwrap();
        let needs = self.ng(input);
        Ok(self.push(Tensor::scalar(m), Op::Mean { input }, needs))
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v * v).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.ng(input);
        Ok(self.push(value, Op::Square { input }, needs))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.ng(input);
        Ok(self.push(value, Op::Sigmoid { input }, needs))
    }

    /// Mean sigmoid binary cross-entropy of one logit per sample.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.len() != targets.len() || z.is_empty() {
            return Err(Error::shape(format!(
                "bce_with_logits: {} logits vs {} targets",
                z.len(),
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("binary target {t} outside [0, 1]")));
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::from_f64_lossy(t)).collect();
        let mut total = T::zero();
        for (&zi, &yi) in z.data().iter().zip(&targets) {
            total += zi.max(T::zero()) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let loss = total / T::from_usize(targets.len()).unwrap();
        check_finite("bce_with_logits", &[loss])?;
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets },
            needs,
        ))
    }

    /// Mean softmax cross-entropy over rows of `(N, C)` logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        self.softmax_cross_entropy_masked(logits, &t)
    }

    /// Like [`Graph::softmax_cross_entropy`]; rows whose target is `None` are
    /// left out of both the mean and the gradient. All rows masked gives 0.
    pub fn softmax_cross_entropy_masked(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
    ) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let c = s[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::invalid(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        let mut counted = 0usize;
        for (r, row) in z.chunks(c).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * c + j] = e;
                denom += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= denom;
            }
            if let Some(t) = targets[r] {
                total += mx + denom.ln() - row[t];
                counted += 1;
            }
        }
        let loss = if counted == 0 {
            T::zero()
        } else {
            total / T::from_usize(counted).unwrap()
        };
        check_finite("softmax_cross_entropy", &[loss])?;
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::shape(format!(
                "mse: {} predictions vs {} targets",
                p.len(),
                target.len()
            )));
        }
        let target: Vec<T> = target.iter().map(|&t| T::from_f64_lossy(t)).collect();
        let total = p
            .data()
            .iter()
            .zip(&target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
        let loss = total / T::from_usize(target.len()).unwrap();
        let needs = self.ng(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, needs))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: Vec::new(),
            variables: BTreeMap::new(),
        };
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                if node.needs_grad {
                    out.params.push((pid, g));
                }
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            if let Op::Variable = node.op {
                out.variables.insert(NodeId(idx), g);
            }
        }
        // parameters recorded after the loss still get a zero gradient
        for node in self.nodes.iter().skip(loss.0 + 1) {
            if let Op::Param(pid) = node.op {
                if node.needs_grad {
                    out.params.push((pid, vec![T::zero(); node.value.len()]));
                }
            }
        }
        out.params.reverse();
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Variable | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_channels,
            } => {
                let batch = self.shape(*input)[0];
                let cg = conv_backward(
                    geom,
                    batch,
                    *out_channels,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    self.ng(*input),
                    self.ng(*kernel),
                    bias.is_some_and(|b| self.ng(b)),
                );
                if let Some(d) = cg.input {
                    accumulate(grads, *input, d);
                }
                if let Some(d) = cg.kernel {
                    accumulate(grads, *kernel, d);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    accumulate(grads, *b, d);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.shape(*input);
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        for i in base..base + spatial {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.ng(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    if *batch_stats {
                        let m = T::from_usize(n * spatial).unwrap();
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * spatial;
                                // dxhat = g·γ; dx = inv_std/M · (M·dxhat − Σdxhat − x̂·Σ(dxhat·x̂))
                                let k = gam[ch] * inv_std[ch] / m;
                                for i in base..base + spatial {
                                    dx[i] = k * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                                }
                            }
                        }
                    } else {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * spatial;
                                let k = gam[ch] * inv_std[ch];
                                for i in base..base + spatial {
                                    dx[i] = k * g[i];
                                }
                            }
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                if self.ng(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.ng(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::LeakyRelu { input, leak } => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { *leak * gi })
                    .collect();
                accumulate(grads, *input, d);
            }
            Op::Dropout { input, mask } => {
                let d = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                accumulate(grads, *input, d);
            }
            Op::AvgPool2d { input, size } => {
                let s = self.shape(*input);
                let (oh, ow) = (s[2] / size, s[3] / size);
                let inv = T::one() / T::from_usize(size * size).unwrap();
                let mut d = vec![T::zero(); s.iter().product()];
                for plane in 0..s[0] * s[1] {
                    let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut d[plane * s[2] * s[3]..(plane + 1) * s[2] * s[3]];
                    for oy in 0..oh {
                        for dy in 0..*size {
                            let row = (oy * size + dy) * s[3];
                            for ox in 0..ow {
                                let v = src[oy * ow + ox] * inv;
                                for dx in 0..*size {
                                    dst[row + ox * size + dx] = v;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::GlobalAvgPool { input } => {
                let s = self.shape(*input);
                let plane = s[2] * s[3];
                let inv = T::one() / T::from_usize(plane).unwrap();
                let mut d = Vec::with_capacity(s.iter().product());
                for &gi in g {
                    d.extend(std::iter::repeat_n(gi * inv, plane));
                }
                accumulate(grads, *input, d);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weight);
                let dy = MatRef::new(g, xs[0], ws[0]);
                if self.ng(*input) {
                    let mut dx = vec![T::zero(); xs[0] * xs[1]];
                    gemm(
                        dy,
                        MatRef::new(self.value(*weight).data(), ws[0], ws[1]),
                        &mut dx,
                        T::zero(),
                    );
                    accumulate(grads, *input, dx);
                }
                if self.ng(*weight) {
                    let mut dw = vec![T::zero(); ws[0] * ws[1]];
                    gemm(
                        dy.t(),
                        MatRef::new(self.value(*input).data(), xs[0], xs[1]),
                        &mut dw,
                        T::zero(),
                    );
                    accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias {
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); ws[0]];
                        for row in g.chunks(ws[0]) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Reshape { input } => accumulate(grads, *input, g.to_vec()),
            Op::Concat { inputs } => {
                let s0 = self.shape(inputs[0]);
                let n = s0[0];
                let inner: usize = s0[2..].iter().product();
                let total: usize = node.value.shape()[1] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let block = self.shape(id)[1] * inner;
                    if self.ng(id) {
                        let mut d = Vec::with_capacity(n * block);
                        for s in 0..n {
                            let start = s * total + offset;
                            d.extend_from_slice(&g[start..start + block]);
                        }
                        accumulate(grads, id, d);
                    }
                    offset += block;
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    let d = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, g.iter().map(|&v| v * *factor).collect());
            }
            Op::Sum { input } => {
                accumulate(grads, *input, vec![g[0]; self.value(*input).len()]);
            }
            Op::Mean { input } => {
                let n = self.value(*input).len();
                let v = g[0] / T::from_usize(n).unwrap();
                accumulate(grads, *input, vec![v; n]);
            }
            Op::Square { input } => {
                let two = T::one() + T::one();
                let d = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| two * x * gi)
                    .collect();
                accumulate(grads, *input, d);
            }
            Op::Sigmoid { input } => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gi)| gi * s * (T::one() - s))
                    .collect();
                accumulate(grads, *input, d);
            }
            Op::BceWithLogits { logits, targets } => {
                let inv = g[0] / T::from_usize(targets.len()).unwrap();
                let d = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * inv)
                    .collect();
                accumulate(grads, *logits, d);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let counted = targets.iter().filter(|t| t.is_some()).count();
                let mut d = vec![T::zero(); probs.len()];
                if counted > 0 {
                    let inv = g[0] / T::from_usize(counted).unwrap();
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for j in 0..c {
                                let onehot = if j == *t { T::one() } else { T::zero() };
                                d[r * c + j] = (probs[r * c + j] - onehot) * inv;
                            }
                        }
                    }
                }
                accumulate(grads, *logits, d);
            }
            Op::Mse { pred, target } => {
                let two = T::one() + T::one();
                let inv = g[0] * two / T::from_usize(target.len()).unwrap();
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| (p - t) * inv)
                    .collect();
                accumulate(grads, *pred, d);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, d: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(d) {
                *a += b;
            }
        }
        slot => *slot = Some(d),
    }
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    variables: BTreeMap<NodeId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a [`Graph::variable`] leaf.
    pub fn node(&self, id: NodeId) -> Option<&[T]> {
        self.variables.get(&id).map(Vec::as_slice)
    }

    /// Summed gradient of a parameter over all its uses in the graph.
    pub fn param(&self, id: ParamId) -> Option<Vec<T>> {
        let mut acc: Option<Vec<T>> = None;
        for (pid, g) in &self.params {
            if *pid == id {
                match &mut acc {
                    Some(a) => a.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    /// Add every parameter gradient into the matching tensor's `grad`.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        for (pid, g) in &self.params {
            params.get_mut(*pid).accumulate_grad(g)?;
        }
        Ok(())
    }
}

use rand::Rng;

use super::arch::{HeadKind, HeadRole, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Mode, NodeId, ParamId, ParamSet, RunningStats, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Whether dense layers keep their input when concatenating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConcatMode {
    #[default]
    Dense,
    /// Zero the carried features and keep only the new ones (ablation).
    DropCarry,
}

/// Graph nodes of the heads after one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeadNodes {
    pub presence: Option<NodeId>,
    pub location: Option<NodeId>,
    pub bbox: Option<NodeId>,
}

/// Head values of an eval-mode forward pass.
#[derive(Clone, Debug)]
pub struct HeadOutputs<T> {
    /// `(N, 1)` presence logits.
    pub presence: Option<Tensor<T>>,
    /// `(N, 3)` location logits.
    pub location: Option<Tensor<T>>,
    /// `(N, 4)` pre-sigmoid box coordinates.
    pub bbox: Option<Tensor<T>>,
}

/// Instantiated network: spec, learnable tensors and batch-norm buffers.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    spec: NetworkSpec,
    params: ParamSet<T>,
    bn: Vec<RunningStats<T>>,
    layer_params: Vec<Vec<ParamId>>,
    layer_bn: Vec<Option<usize>>,
    concat_mode: ConcatMode,
}

impl<T: Scalar> Network<T> {
    /// He-normal convolutions, unit-gain batch norm, small uniform heads.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag("network-init")]);
        let leak = spec.arch.leak;
        let mut params = ParamSet::new();
        let mut bn = Vec::new();
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        let mut layer_bn = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut ids = Vec::new();
            for (j, shape) in layer.param_shapes().into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match (layer, j, shape.len()) {
                    (LayerSpec::BatchNorm { .. } | LayerSpec::DenseUnit { .. }, 0, 1) => {
                        vec![1.0; n]
                    }
                    (_, _, 4) => {
                        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                        let std = (2.0 / ((1.0 + leak * leak) * fan_in)).sqrt();
                        (0..n).map(|_| std * rng::normal(&mut rng)).collect()
                    }
                    (LayerSpec::Head { in_features, .. }, 0, 2) => {
                        let bound = 1.0 / (*in_features as f64).sqrt();
                        (0..n)
                            .map(|_| rng::uniform(&mut rng, -bound, bound))
                            .collect()
                    }
                    _ => vec![0.0; n],
                };
                let t = Tensor::from_f64(&shape, &data).expect("shape from spec");
                ids.push(params.push(format!("layer{i}.{j}"), t));
            }
            layer_params.push(ids);
            layer_bn.push(layer.bn_channels().map(|c| {
                bn.push(RunningStats::new(c));
                bn.len() - 1
            }));
        }
        Network {
            spec,
            params,
            bn,
            layer_params,
            layer_bn,
            concat_mode: ConcatMode::Dense,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[RunningStats<T>] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.bn
    }

    pub fn concat_mode(&self) -> ConcatMode {
        self.concat_mode
    }

    pub fn set_concat_mode(&mut self, mode: ConcatMode) {
        self.concat_mode = mode;
    }

    /// Parameter ids of one layer, in blob order.
    pub fn layer_params(&self, layer: usize) -> &[ParamId] {
        &self.layer_params[layer]
    }

    pub fn input_size(&self) -> usize {
        self.spec.arch.input_size
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let a = &self.spec.arch;
        if shape.len() != 4
            || shape[1] != a.in_channels
            || shape[2] != a.input_size
            || shape[3] != a.input_size
        {
            return Err(Error::shape(format!(
                "network expects (N, {}, {}, {}) input, got {shape:?}",
                a.in_channels, a.input_size, a.input_size
            )));
        }
        if shape[0] == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    /// Record a forward pass on `graph`. Train mode updates batch-norm
    /// running statistics.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        graph: &mut Graph<T>,
        input: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<HeadNodes> {
        let mut stats = std::mem::take(&mut self.bn);
        let out = self.forward_with(graph, input, mode, rng, &mut stats);
        self.bn = stats;
        out
    }

    fn forward_with<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        mode: Mode,
        rng: &mut R,
        stats: &mut [RunningStats<T>],
    ) -> Result<HeadNodes> {
        self.check_input(g.shape(input))?;
        let mut cur = input;
        let mut pooled = None;
        let mut heads = HeadNodes::default();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let ids = &self.layer_params[i];
            let p = |g: &mut Graph<T>, j: usize| g.param(&self.params, ids[j]);
            match *layer {
                LayerSpec::Conv {
                    stride,
                    padding,
                    bias,
                    ..
                } => {
                    let k = p(g, 0);
                    let b = if bias { Some(p(g, 1)) } else { None };
                    cur = g.conv2d(cur, k, b, stride, padding)?;
                }
                LayerSpec::BatchNorm { .. } => {
                    let (gamma, beta) = (p(g, 0), p(g, 1));
                    let s = &mut stats[self.layer_bn[i].expect("bn layer")];
                    cur = g.batch_norm(cur, gamma, beta, BN_EPS, mode, s)?;
                }
                LayerSpec::LeakyRelu { leak } => cur = g.leaky_relu(cur, leak)?,
                LayerSpec::Dropout { rate } => cur = g.dropout(cur, rate, mode, rng)?,
                LayerSpec::AvgPool { size } => cur = g.avg_pool2d(cur, size)?,
                LayerSpec::DenseUnit { leak, dropout, .. } => {
                    let (gamma, beta, k) = (p(g, 0), p(g, 1), p(g, 2));
                    let s = &mut stats[self.layer_bn[i].expect("bn layer")];
                    let mut h = g.batch_norm(cur, gamma, beta, BN_EPS, mode, s)?;
                    h = g.leaky_relu(h, leak)?;
                    h = g.conv2d(h, k, None, 1, 1)?;
                    h = g.dropout(h, dropout, mode, rng)?;
                    let carry = match self.concat_mode {
                        ConcatMode::Dense => cur,
                        ConcatMode::DropCarry => g.scale(cur, 0.0)?,
                    };
                    cur = g.concat(&[carry, h])?;
                }
                LayerSpec::GlobalAvgPool => pooled = Some(g.global_avg_pool(cur)?),
                LayerSpec::Flatten => {
                    let n = g.shape(cur)[0];
                    let f = g.value(cur).len() / n;
                    pooled = Some(g.reshape(cur, &[n, f])?);
                }
                LayerSpec::Head { role, .. } => {
                    let features = pooled.ok_or_else(|| Error::shape("head before pooling"))?;
                    let (w, b) = (p(g, 0), p(g, 1));
                    let out = g.linear(features, w, Some(b))?;
                    match role {
                        HeadRole::Presence => heads.presence = Some(out),
                        HeadRole::Location => heads.location = Some(out),
                        HeadRole::Box => heads.bbox = Some(out),
                    }
                }
            }
        }
        Ok(heads)
    }

    /// Re-estimate every batch-norm layer's running statistics as the plain
    /// average of batch statistics over `images`, with the current weights.
    pub fn recalibrate_batch_norm(&mut self, images: &[&[f32]], batch_size: usize) -> Result<()> {
        if images.is_empty() || self.bn.is_empty() {
            return Ok(());
        }
        let momenta: Vec<f64> = self.bn.iter().map(|s| s.momentum).collect();
        for s in &mut self.bn {
            *s = RunningStats::new(s.mean.len());
        }
        let size = self.input_size();
        let mut rng = rng::stream(0, &[]);
        let mut result = Ok(());
        for (k, chunk) in images.chunks(batch_size.max(1)).enumerate() {
            for s in &mut self.bn {
                s.momentum = 1.0 / (k + 1) as f64;
            }
            let mut g = Graph::new();
            let x = match batch_tensor::<T>(chunk, size) {
                Ok(t) => g.input(t),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            };
            if let Err(e) = self.forward(&mut g, x, Mode::Calibrate, &mut rng) {
                result = Err(e);
                break;
            }
        }
        for (s, m) in self.bn.iter_mut().zip(momenta) {
            s.momentum = m;
        }
        result
    }

    /// Eval-mode forward pass. Pure: the network is not modified.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<HeadOutputs<T>> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let mut stats = self.bn.clone();
        // eval mode never draws from the generator
        let mut rng = rng::stream(0, &[]);
        let heads = self.forward_with(&mut g, x, Mode::Eval, &mut rng, &mut stats)?;
        let take = |id: Option<NodeId>| id.map(|i| g.value(i).clone());
        Ok(HeadOutputs {
            presence: take(heads.presence),
            location: take(heads.location),
            bbox: take(heads.bbox),
        })
    }

    /// `(fracture_logits (N,1), location_logits (N,3))` of a dual-head network.
    pub fn forward_dual(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.spec.arch.head != HeadKind::BinaryPlus3Class {
            return Err(Error::invalid(
                "forward_dual needs a binary-plus-3class network",
            ));
        }
        let out = self.predict(batch)?;
        Ok((
            out.presence.expect("presence head"),
            out.location.expect("location head"),
        ))
    }

    /// Replace all learnable values and batch-norm buffers from flat blobs.
    pub(crate) fn load_blobs(&mut self, params: &[Vec<T>], bn: &[(Vec<T>, Vec<T>)]) -> Result<()> {
        if params.len() != self.params.len() || bn.len() != self.bn.len() {
            return Err(Error::Checkpoint(
                "tensor count does not match the network".into(),
            ));
        }
        for (t, src) in self.params.iter_mut().zip(params) {
            if t.len() != src.len() {
                return Err(Error::Checkpoint(
                    "tensor length does not match the network".into(),
                ));
            }
            t.data_mut().copy_from_slice(src);
            t.clear_grad();
        }
        for (s, (m, v)) in self.bn.iter_mut().zip(bn) {
            if s.mean.len() != m.len() || s.var.len() != v.len() {
                return Err(Error::Checkpoint(
                    "running statistics do not match the network".into(),
                ));
            }
            s.mean.copy_from_slice(m);
            s.var.copy_from_slice(v);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            bn: self
                .bn
                .iter()
                .map(|s| RunningStats {
                    mean: s
                        .mean
                        .iter()
                        .map(|v| U::from_f64_lossy(v.to_f64().unwrap()))
                        .collect(),
                    var: s
                        .var
                        .iter()
                        .map(|v| U::from_f64_lossy(v.to_f64().unwrap()))
                        .collect(),
                    momentum: s.momentum,
                })
                .collect(),
            layer_params: self.layer_params.clone(),
            layer_bn: self.layer_bn.clone(),
            concat_mode: self.concat_mode,
        }
    }
}

/// Stack single-channel square images into an `(N, 1, S, S)` tensor.
pub fn batch_tensor<T: Scalar>(images: &[&[f32]], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.len() != size * size {
            return Err(Error::shape(format!(
                "image has {} pixels, expected {size}×{size}",
                img.len()
            )));
        }
        data.extend(img.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![images.len(), 1, size, size], data)
}

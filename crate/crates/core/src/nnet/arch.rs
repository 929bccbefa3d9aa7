//! Declarative architectures and the registry that builds them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Output head layout of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// One presence logit.
    #[serde(rename = "binary", alias = "binary-only")]
    Binary,
    /// Presence logit plus a 3-way location head.
    #[serde(rename = "binary-plus-3class")]
    BinaryPlus3Class,
    /// Four box coordinates (pre-sigmoid).
    #[serde(rename = "regression-4")]
    Regression4,
}

/// How the trunk's feature map is reduced before the heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadPooling {
    /// Global average pooling; works for any input size.
    #[default]
    Global,
    /// Flatten the final map; keeps spatial layout (used for box regression).
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Registered architecture name, `densenet` or `plain-cnn` by default.
    pub kind: String,
    pub depth: usize,
    pub growth_rate: usize,
    pub stem_channels: usize,
    #[serde(default = "one")]
    pub stem_stride: usize,
    pub transition_factor: f64,
    pub head: HeadKind,
    #[serde(default)]
    pub head_pooling: HeadPooling,
    pub input_size: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    pub leak: f64,
    pub dropout_rate: f64,
}

fn one() -> usize {
    1
}

/// Parameter count reported for the full-size fracture network. Recorded as
/// metadata only: block and stem layout are not recoverable from the count.
pub const REFERENCE_FRACTURE_PARAMETERS: u64 = 1_434_176;
/// Parameter count reported for the ten-layer fully convolutional baseline.
pub const REFERENCE_BASELINE_PARAMETERS: u64 = 4_722_944;

impl ArchConfig {
    /// Full-size fracture classifier: 172 layers, 12 features per layer.
    pub fn reference_fracture() -> Self {
        ArchConfig {
            kind: "densenet".into(),
            depth: 172,
            growth_rate: 12,
            stem_channels: 24,
            stem_stride: 1,
            transition_factor: 1.0,
            head: HeadKind::BinaryPlus3Class,
            head_pooling: HeadPooling::Global,
            input_size: 1024,
            in_channels: 1,
            leak: 0.5,
            dropout_rate: 0.2,
        }
    }

    /// Desk-scale fracture classifier trained by default.
    pub fn desk_fracture() -> Self {
        ArchConfig {
            depth: 22,
            input_size: 64,
            ..Self::reference_fracture()
        }
    }

    /// Small plain CNN used for gates and box regression.
    pub fn plain(
        depth: usize,
        stem: usize,
        growth: usize,
        head: HeadKind,
        input_size: usize,
    ) -> Self {
        ArchConfig {
            kind: "plain-cnn".into(),
            depth,
            growth_rate: growth,
            stem_channels: stem,
            stem_stride: 1,
            transition_factor: 1.0,
            head,
            head_pooling: if head == HeadKind::Regression4 {
                HeadPooling::Flatten
            } else {
                HeadPooling::Global
            },
            input_size,
            in_channels: 1,
            leak: 0.5,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid(
                "stem_channels and in_channels must be positive",
            ));
        }
        if self.input_size == 0 || self.stem_stride == 0 {
            return Err(Error::invalid(
                "input_size and stem_stride must be positive",
            ));
        }
        if !(self.transition_factor > 0.0 && self.transition_factor <= 1.0) {
            return Err(Error::invalid("transition_factor must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(Error::invalid("leak must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Role of an output head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadRole {
    Presence,
    Location,
    Box,
}

/// One layer descriptor. Channel counts are explicit so a spec can be
/// checked and counted without instantiating it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    LeakyRelu {
        leak: f64,
    },
    Dropout {
        rate: f64,
    },
    AvgPool {
        size: usize,
    },
    /// Pre-activation dense layer: BN → leaky relu → 3×3 conv → dropout, with
    /// the result concatenated onto its input.
    DenseUnit {
        in_channels: usize,
        growth: usize,
        leak: f64,
        dropout: f64,
    },
    GlobalAvgPool,
    Flatten,
    Head {
        role: HeadRole,
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    /// Shapes of the learnable tensors this layer owns, in blob order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_channels, in_channels, kernel, kernel]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            LayerSpec::BatchNorm { channels } => vec![vec![channels], vec![channels]],
            LayerSpec::DenseUnit {
                in_channels,
                growth,
                ..
            } => vec![
                vec![in_channels],
                vec![in_channels],
                vec![growth, in_channels, 3, 3],
            ],
            LayerSpec::Head {
                in_features,
                out_features,
                ..
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => Vec::new(),
        }
    }

    /// Channel counts of the batch-norm running statistics this layer owns.
    pub fn bn_channels(&self) -> Option<usize> {
        match *self {
            LayerSpec::BatchNorm { channels } => Some(channels),
            LayerSpec::DenseUnit { in_channels, .. } => Some(in_channels),
            _ => None,
        }
    }

    fn is_head(&self) -> bool {
        matches!(self, LayerSpec::Head { .. })
    }
}

/// Feature map shape flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for MapShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.channels, self.height, self.width)
    }
}

/// Ordered layer graph derived from an [`ArchConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: ArchConfig,
    pub layers: Vec<LayerSpec>,
    /// Output shape after each trunk layer (heads excluded).
    pub trace: Vec<MapShape>,
    /// Published parameter count for the full-size counterpart, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_parameter_count: Option<u64>,
}

impl NetworkSpec {
    /// Check that adjacent layers compose and return the trunk trace.
    pub fn from_layers(arch: ArchConfig, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut shape = MapShape {
            channels: arch.in_channels,
            height: arch.input_size,
            width: arch.input_size,
        };
        let mut flat: Option<usize> = None;
        let mut trace = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let err = |msg: String| Error::shape(format!("layer {i} ({layer:?}): {msg}"));
            if let Some(features) = flat {
                match layer {
                    LayerSpec::Head { in_features, .. } if *in_features == features => continue,
                    LayerSpec::Head { in_features, .. } => {
                        return Err(err(format!(
                            "expects {in_features} features, trunk gives {features}"
                        )))
                    }
                    _ => return Err(err("only heads may follow pooling".into())),
                }
            }
            shape = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if in_channels != shape.channels {
                        return Err(err(format!("input is {shape}")));
                    }
                    MapShape {
                        channels: out_channels,
                        height: crate::tensor::conv2d_output_size(
                            shape.height,
                            kernel,
                            stride,
                            padding,
                        )
                        .map_err(|e| err(e.to_string()))?,
                        width: crate::tensor::conv2d_output_size(
                            shape.width,
                            kernel,
                            stride,
                            padding,
                        )
                        .map_err(|e| err(e.to_string()))?,
                    }
                }
                LayerSpec::BatchNorm { channels } => {
                    if channels != shape.channels {
                        return Err(err(format!("input is {shape}")));
                    }
                    shape
                }
                LayerSpec::LeakyRelu { .. } | LayerSpec::Dropout { .. } => shape,
                LayerSpec::AvgPool { size } => {
                    if shape.height < size || shape.width < size {
                        return Err(err(format!("cannot pool {shape}")));
                    }
                    MapShape {
                        height: shape.height / size,
                        width: shape.width / size,
                        ..shape
                    }
                }
                LayerSpec::DenseUnit {
                    in_channels,
                    growth,
                    ..
                } => {
                    if in_channels != shape.channels {
                        return Err(err(format!("input is {shape}")));
                    }
                    MapShape {
                        channels: in_channels + growth,
                        ..shape
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    flat = Some(shape.channels);
                    shape
                }
                LayerSpec::Flatten => {
                    flat = Some(shape.channels * shape.height * shape.width);
                    shape
                }
                LayerSpec::Head { .. } => return Err(err("head before pooling".into())),
            };
            trace.push(shape);
        }
        if flat.is_none() {
            return Err(Error::shape(
                "network has no pooling stage before its heads",
            ));
        }
        if !layers.iter().any(LayerSpec::is_head) {
            return Err(Error::shape("network has no heads"));
        }
        Ok(NetworkSpec {
            arch,
            layers,
            trace,
            reference_parameter_count: None,
        })
    }

    /// Feature count entering the heads.
    pub fn head_features(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Head { in_features, .. } => Some(*in_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Hex SHA-256 of the canonical JSON encoding of the layer graph.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(&(&self.arch, &self.layers)).expect("spec serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Number of convolution, dense and head layers: the usual depth count.
    pub fn weighted_layer_count(&self) -> usize {
        let heads = usize::from(self.layers.iter().any(LayerSpec::is_head));
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::DenseUnit { .. }))
            .count()
            + heads
    }
}

/// Exact number of learnable scalars in a spec.
pub fn count_parameters(spec: &NetworkSpec) -> u64 {
    spec.layers
        .iter()
        .flat_map(LayerSpec::param_shapes)
        .map(|s| s.iter().product::<usize>() as u64)
        .sum()
}

fn push_heads(layers: &mut Vec<LayerSpec>, head: HeadKind, features: usize) {
    let mut h = |role, out| {
        layers.push(LayerSpec::Head {
            role,
            in_features: features,
            out_features: out,
        })
    };
    match head {
        HeadKind::Binary => h(HeadRole::Presence, 1),
        HeadKind::BinaryPlus3Class => {
            h(HeadRole::Presence, 1);
            h(HeadRole::Location, 3);
        }
        HeadKind::Regression4 => h(HeadRole::Box, 4),
    }
}

fn pool_and_heads(layers: &mut Vec<LayerSpec>, cfg: &ArchConfig, channels: usize, size: usize) {
    let features = match cfg.head_pooling {
        HeadPooling::Global => {
            layers.push(LayerSpec::GlobalAvgPool);
            channels
        }
        HeadPooling::Flatten => {
            layers.push(LayerSpec::Flatten);
            channels * size * size
        }
    };
    push_heads(layers, cfg.head, features);
}

/// A family of networks that can be built from an [`ArchConfig`].
pub trait Architecture: Send + Sync {
    fn name(&self) -> &'static str;
    fn layers(&self, config: &ArchConfig) -> Result<Vec<LayerSpec>>;
}

/// Three dense blocks joined by transition layers (1×1 conv + 2× average
/// pool), a 3×3 stem and global pooling. Depth counts the stem, every dense
/// layer, both transitions and the head: `depth = 3·L + 4`.
pub struct DenseNet;

impl Architecture for DenseNet {
    fn name(&self) -> &'static str {
        "densenet"
    }

    fn layers(&self, cfg: &ArchConfig) -> Result<Vec<LayerSpec>> {
        if cfg.depth < 7 || !(cfg.depth - 4).is_multiple_of(3) {
            return Err(Error::invalid(format!(
                "densenet depth {} must be 3·L + 4 with L ≥ 1 layers per block",
                cfg.depth
            )));
        }
        if cfg.growth_rate == 0 {
            return Err(Error::invalid("densenet growth_rate must be at least 1"));
        }
        let per_block = (cfg.depth - 4) / 3;
        let mut layers = vec![LayerSpec::Conv {
            in_channels: cfg.in_channels,
            out_channels: cfg.stem_channels,
            kernel: 3,
            stride: cfg.stem_stride,
            padding: 1,
            bias: false,
        }];
        let mut channels = cfg.stem_channels;
        let mut size = (cfg.input_size + 2 - 3) / cfg.stem_stride + 1;
        for block in 0..3 {
            for _ in 0..per_block {
                layers.push(LayerSpec::DenseUnit {
                    in_channels: channels,
                    growth: cfg.growth_rate,
                    leak: cfg.leak,
                    dropout: cfg.dropout_rate,
                });
                channels += cfg.growth_rate;
            }
            let out = ((channels as f64) * cfg.transition_factor).floor().max(1.0) as usize;
            if block < 2 {
                if size < 2 {
                    return Err(Error::invalid(format!(
                        "input size {} too small for two transition layers",
                        cfg.input_size
                    )));
                }
                layers.extend([
                    LayerSpec::BatchNorm { channels },
                    LayerSpec::LeakyRelu { leak: cfg.leak },
                    LayerSpec::Conv {
                        in_channels: channels,
                        out_channels: out,
                        kernel: 1,
                        stride: 1,
                        padding: 0,
                        bias: false,
                    },
                    LayerSpec::AvgPool { size: 2 },
                ]);
                channels = out;
                size /= 2;
            }
        }
        layers.push(LayerSpec::BatchNorm { channels });
        layers.push(LayerSpec::LeakyRelu { leak: cfg.leak });
        pool_and_heads(&mut layers, cfg, channels, size);
        Ok(layers)
    }
}

/// Stack of `depth` 3×3 conv + leaky relu layers, widths `stem + i·growth`,
/// halving resolution after each layer while the map is at least 8 wide.
pub struct PlainCnn;

impl Architecture for PlainCnn {
    fn name(&self) -> &'static str {
        "plain-cnn"
    }

    fn layers(&self, cfg: &ArchConfig) -> Result<Vec<LayerSpec>> {
        if cfg.depth == 0 {
            return Err(Error::invalid("plain-cnn needs at least one conv layer"));
        }
        let mut layers = Vec::new();
        let mut channels = cfg.in_channels;
        let mut size = cfg.input_size;
        for i in 0..cfg.depth {
            let out = cfg.stem_channels + i * cfg.growth_rate;
            layers.push(LayerSpec::Conv {
                in_channels: channels,
                out_channels: out,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: true,
            });
            layers.push(LayerSpec::LeakyRelu { leak: cfg.leak });
            if cfg.dropout_rate > 0.0 {
                layers.push(LayerSpec::Dropout {
                    rate: cfg.dropout_rate,
                });
            }
            if size >= 8 {
                layers.push(LayerSpec::AvgPool { size: 2 });
                size /= 2;
            }
            channels = out;
        }
        pool_and_heads(&mut layers, cfg, channels, size);
        Ok(layers)
    }
}

/// Name → architecture lookup used by every builder entry point.
pub struct ArchRegistry {
    entries: BTreeMap<&'static str, Box<dyn Architecture>>,
}

impl ArchRegistry {
    pub fn empty() -> Self {
        ArchRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, arch: Box<dyn Architecture>) {
        self.entries.insert(arch.name(), arch);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Architecture> {
        self.entries
            .get(name)
            .map(Box::as_ref)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "architecture",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, config: &ArchConfig) -> Result<NetworkSpec> {
        config.validate()?;
        let layers = self.get(&config.kind)?.layers(config)?;
        NetworkSpec::from_layers(config.clone(), layers)
    }
}

impl Default for ArchRegistry {
    fn default() -> Self {
        let mut r = ArchRegistry::empty();
        r.register(Box::new(DenseNet));
        r.register(Box::new(PlainCnn));
        r
    }
}

/// Build a spec with the default registry.
pub fn build_network(config: &ArchConfig) -> Result<NetworkSpec> {
    let mut spec = ArchRegistry::default().build(config)?;
    if config.kind == "densenet" && config.depth == 172 && config.growth_rate == 12 {
        spec.reference_parameter_count = Some(REFERENCE_FRACTURE_PARAMETERS);
    }
    Ok(spec)
}

/// Ten-layer fully convolutional comparison network.
pub fn build_baseline_cnn(input_size: usize) -> Result<NetworkSpec> {
    let cfg = ArchConfig {
        dropout_rate: 0.2,
        ..ArchConfig::plain(10, 16, 8, HeadKind::BinaryPlus3Class, input_size)
    };
    let mut spec = build_network(&cfg)?;
    spec.reference_parameter_count = Some(REFERENCE_BASELINE_PARAMETERS);
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_plain_cnn_count_is_analytic() {
        let cfg = ArchConfig::plain(1, 4, 0, HeadKind::Binary, 8);
        let spec = build_network(&cfg).unwrap();
        // conv 1→4 3×3 with bias, then a 4→1 linear head with bias
        assert_eq!(count_parameters(&spec), 4 * 9 + 4 + (4 + 1));
    }

    #[test]
    fn dense_blocks_grow_by_growth_rate() {
        let cfg = ArchConfig {
            depth: 10,
            growth_rate: 2,
            stem_channels: 4,
            input_size: 16,
            ..ArchConfig::desk_fracture()
        };
        let spec = build_network(&cfg).unwrap();
        let mut units = 0;
        for (layer, out) in spec.layers.iter().zip(&spec.trace) {
            if let LayerSpec::DenseUnit { in_channels, .. } = layer {
                assert_eq!(out.channels, in_channels + 2);
                units += 1;
            }
        }
        assert_eq!(units, 6);
        assert_eq!(spec.weighted_layer_count(), 10);
    }

    #[test]
    fn reference_config_builds_and_records_published_count() {
        let spec = build_network(&ArchConfig::reference_fracture()).unwrap();
        assert_eq!(spec.weighted_layer_count(), 172);
        assert_eq!(
            spec.reference_parameter_count,
            Some(REFERENCE_FRACTURE_PARAMETERS)
        );
        assert!(count_parameters(&spec) > 0);
    }

    #[test]
    fn bad_depth_is_rejected() {
        let cfg = ArchConfig {
            depth: 11,
            ..ArchConfig::desk_fracture()
        };
        assert!(build_network(&cfg).is_err());
    }

    #[test]
    fn unknown_architecture_names_the_registered_ones() {
        let cfg = ArchConfig {
            kind: "resnet".into(),
            ..ArchConfig::desk_fracture()
        };
        let msg = build_network(&cfg).unwrap_err().to_string();
        assert!(
            msg.contains("densenet") && msg.contains("plain-cnn"),
            "{msg}"
        );
    }

    #[test]
    fn small_counts() {
        let conv = LayerSpec::Conv {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
        };
        let n: usize = conv
            .param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        assert_eq!(n, 10);
        let head = LayerSpec::Head {
            role: HeadRole::Location,
            in_features: 8,
            out_features: 2,
        };
        let n: usize = head
            .param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        assert_eq!(n, 18);
    }

    #[test]
    fn baseline_has_ten_conv_layers() {
        let spec = build_baseline_cnn(64).unwrap();
        let convs = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count();
        assert_eq!(convs, 10);
        assert_eq!(
            spec.reference_parameter_count,
            Some(REFERENCE_BASELINE_PARAMETERS)
        );
    }
}

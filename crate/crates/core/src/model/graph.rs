//! Declarative network description shared by the executor and the FLOP analyzer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, PoolGeometry, UpsampleMethod};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tap {
    Feature1,
    Feature2,
    Feature3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        geometry: ConvGeometry,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Sigmoid,
    MaxPool(PoolGeometry),
    AvgPool(PoolGeometry),
    AdaptiveAvgPool {
        size: usize,
    },
    Upsample {
        factor: usize,
        method: UpsampleMethod,
    },
    /// Bilinear resize of `inputs[0]` to the spatial extent of `inputs[1]`.
    ResizeLike,
    Concat,
    ChannelSum,
    /// `inputs[0] - inputs[1]`
    Sub,
    /// `Σ w_j ⊙ s_j / (Σ w_j + eps)` over inputs `[s_1..s_k, w_1..w_k]`.
    WeightedFuse {
        eps: f64,
    },
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::AvgPool(_) => "avgpool",
            LayerKind::AdaptiveAvgPool { .. } => "adaptive_avgpool",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::ResizeLike => "resize_bilinear",
            LayerKind::Concat => "concat",
            LayerKind::ChannelSum => "channel_sum",
            LayerKind::Sub => "sub",
            LayerKind::WeightedFuse { .. } => "weighted_fuse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    /// Architectural block the layer belongs to (e.g. `stem.conv1a`, `mixed_5b`).
    pub block: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<Tap>,
    /// Name of an earlier layer whose parameters this layer reuses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shares: Option<String>,
}

impl Layer {
    /// Prefix of the parameter names this layer reads.
    pub fn param_prefix(&self) -> &str {
        self.shares.as_deref().unwrap_or(&self.name)
    }
}

/// Names of the learnable tensors a layer owns, with their shapes.
///
/// Layers that share another layer's parameters own none.
pub fn layer_params(layer: &Layer) -> Vec<(String, Vec<usize>)> {
    if layer.shares.is_some() {
        return Vec::new();
    }
    match &layer.kind {
        LayerKind::Conv { in_channels, out_channels, kernel, bias, .. } => {
            let mut v = vec![(format!("{}.weight", layer.name), vec![*out_channels, *in_channels, kernel.0, kernel.1])];
            if *bias {
                v.push((format!("{}.bias", layer.name), vec![*out_channels]));
            }
            v
        }
        LayerKind::BatchNorm { channels } => vec![
            (format!("{}.weight", layer.name), vec![*channels]),
            (format!("{}.bias", layer.name), vec![*channels]),
        ],
        _ => Vec::new(),
    }
}

/// Non-learnable running statistics a layer owns.
pub fn layer_buffers(layer: &Layer) -> Vec<(String, Vec<usize>)> {
    match &layer.kind {
        LayerKind::BatchNorm { channels } => vec![
            (format!("{}.running_mean", layer.name), vec![*channels]),
            (format!("{}.running_var", layer.name), vec![*channels]),
        ],
        _ => Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDescription {
    pub layers: Vec<Layer>,
    pub output: usize,
}

/// `[n, c, h, w]`
pub type Shape4 = [usize; 4];

impl GraphDescription {
    pub fn tap(&self, tap: Tap) -> Option<usize> {
        self.layers.iter().position(|l| l.tap == Some(tap))
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Distinct block labels in first-appearance order.
    pub fn blocks(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for l in &self.layers {
            if !matches!(l.kind, LayerKind::Input { .. }) && !out.contains(&l.block.as_str()) {
                out.push(&l.block);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(layer_params)
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("graph description: {e}")))
    }

    /// Output shape of every layer for a given input shape.
    pub fn infer_shapes(&self, input: Shape4) -> Result<Vec<Shape4>> {
        let mut shapes: Vec<Shape4> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            if let Some(&bad) = layer.inputs.iter().find(|&&i| i >= idx) {
                return Err(Error::Graph(format!("layer {} references later layer {bad}", layer.name)));
            }
            let ins: Vec<Shape4> = layer.inputs.iter().map(|&i| shapes[i]).collect();
            let shape = infer_layer(layer, &ins, input).map_err(|e| match e {
                Error::Shape(m) | Error::Graph(m) => Error::Graph(format!("layer {}: {m}", layer.name)),
                other => other,
            })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

fn arity(layer: &Layer, ins: &[Shape4], n: usize) -> Result<()> {
    if ins.len() != n {
        return Err(Error::Graph(format!("expected {n} inputs, got {}", ins.len())));
    }
    let _ = layer;
    Ok(())
}

fn infer_layer(layer: &Layer, ins: &[Shape4], input: Shape4) -> Result<Shape4> {
    let shape_err = |m: String| Err(Error::Shape(m));
    match &layer.kind {
        LayerKind::Input { channels } => {
            if input[1] != *channels {
                return shape_err(format!("input has {} channels, graph expects {channels}", input[1]));
            }
            Ok(input)
        }
        LayerKind::Conv { in_channels, out_channels, kernel, geometry, .. } => {
            arity(layer, ins, 1)?;
            let [n, c, h, w] = ins[0];
            if c != *in_channels {
                return shape_err(format!("conv expects {in_channels} input channels, got {c}"));
            }
            let (ho, wo) = geometry.output_extent(h, w, kernel.0, kernel.1)?;
            Ok([n, *out_channels, ho, wo])
        }
        LayerKind::BatchNorm { channels } => {
            arity(layer, ins, 1)?;
            if ins[0][1] != *channels {
                return shape_err(format!("batchnorm over {channels} channels got {}", ins[0][1]));
            }
            Ok(ins[0])
        }
        LayerKind::Relu | LayerKind::Sigmoid => {
            arity(layer, ins, 1)?;
            Ok(ins[0])
        }
        LayerKind::MaxPool(g) | LayerKind::AvgPool(g) => {
            arity(layer, ins, 1)?;
            let [n, c, h, w] = ins[0];
            let (ho, wo) = g.output_extent(h, w)?;
            Ok([n, c, ho, wo])
        }
        LayerKind::AdaptiveAvgPool { size } => {
            arity(layer, ins, 1)?;
            let [n, c, h, w] = ins[0];
            if *size == 0 || *size > h || *size > w {
                return shape_err(format!("pooling scale {size} exceeds spatial extent {h}x{w}"));
            }
            Ok([n, c, *size, *size])
        }
        LayerKind::Upsample { factor, .. } => {
            arity(layer, ins, 1)?;
            if *factor == 0 {
                return shape_err("upsample factor must be at least 1".into());
            }
            let [n, c, h, w] = ins[0];
            Ok([n, c, h * factor, w * factor])
        }
        LayerKind::ResizeLike => {
            arity(layer, ins, 2)?;
            Ok([ins[0][0], ins[0][1], ins[1][2], ins[1][3]])
        }
        LayerKind::Concat => {
            let Some(first) = ins.first() else {
                return shape_err("concat needs at least one input".into());
            };
            let mut c = 0;
            for s in ins {
                if (s[0], s[2], s[3]) != (first[0], first[2], first[3]) {
                    return shape_err(format!("concat inputs disagree: {s:?} vs {first:?}"));
                }
                c += s[1];
            }
            Ok([first[0], c, first[2], first[3]])
        }
        LayerKind::ChannelSum => {
            arity(layer, ins, 1)?;
            Ok([ins[0][0], 1, ins[0][2], ins[0][3]])
        }
        LayerKind::Sub => {
            arity(layer, ins, 2)?;
            if ins[0] != ins[1] {
                return shape_err(format!("sub operands disagree: {:?} vs {:?}", ins[0], ins[1]));
            }
            Ok(ins[0])
        }
        LayerKind::WeightedFuse { .. } => {
            if ins.is_empty() || ins.len() % 2 != 0 {
                return shape_err(format!("weighted fuse needs pairs of inputs, got {}", ins.len()));
            }
            if ins.iter().any(|s| *s != ins[0]) {
                return shape_err("weighted fuse inputs must share one shape".into());
            }
            Ok(ins[0])
        }
    }
}

/// Incremental graph construction with channel bookkeeping.
pub struct GraphBuilder {
    layers: Vec<Layer>,
    channels: Vec<usize>,
    block: String,
}

impl GraphBuilder {
    pub fn new(input_channels: usize) -> (Self, usize) {
        let mut b = GraphBuilder { layers: Vec::new(), channels: Vec::new(), block: "input".into() };
        let id = b.push("input", LayerKind::Input { channels: input_channels }, vec![], input_channels);
        (b, id)
    }

    pub fn set_block(&mut self, block: impl Into<String>) {
        self.block = block.into();
    }

    pub fn channels(&self, id: usize) -> usize {
        self.channels[id]
    }

    pub fn tag(&mut self, id: usize, tap: Tap) {
        self.layers[id].tap = Some(tap);
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<usize>, out_channels: usize) -> usize {
        self.layers.push(Layer { name: name.to_string(), block: self.block.clone(), kind, inputs, tap: None, shares: None });
        self.channels.push(out_channels);
        self.layers.len() - 1
    }

    pub fn conv(&mut self, name: &str, x: usize, cout: usize, kernel: (usize, usize), geometry: ConvGeometry, bias: bool) -> usize {
        let cin = self.channels[x];
        self.push(name, LayerKind::Conv { in_channels: cin, out_channels: cout, kernel, geometry, bias }, vec![x], cout)
    }

    /// Convolution reading the parameters of the earlier layer `owner`.
    pub fn conv_shared(&mut self, name: &str, owner: usize, x: usize) -> usize {
        let kind = self.layers[owner].kind.clone();
        let LayerKind::Conv { out_channels, .. } = kind else { panic!("shared layer must be a convolution") };
        let id = self.push(name, kind, vec![x], out_channels);
        self.layers[id].shares = Some(self.layers[owner].name.clone());
        id
    }

    /// Bias-free convolution, batch normalization and ReLU.
    pub fn basic_conv(&mut self, name: &str, x: usize, cout: usize, kernel: (usize, usize), geometry: ConvGeometry) -> usize {
        let c = self.conv(&format!("{name}.conv"), x, cout, kernel, geometry, false);
        let b = self.push(&format!("{name}.bn"), LayerKind::BatchNorm { channels: cout }, vec![c], cout);
        self.push(&format!("{name}.relu"), LayerKind::Relu, vec![b], cout)
    }

    pub fn unary(&mut self, name: &str, kind: LayerKind, x: usize) -> usize {
        let c = self.channels[x];
        self.push(name, kind, vec![x], c)
    }

    pub fn binary(&mut self, name: &str, kind: LayerKind, a: usize, b: usize) -> usize {
        let c = self.channels[a];
        self.push(name, kind, vec![a, b], c)
    }

    pub fn concat(&mut self, name: &str, xs: &[usize]) -> usize {
        let c = xs.iter().map(|&i| self.channels[i]).sum();
        self.push(name, LayerKind::Concat, xs.to_vec(), c)
    }

    pub fn fuse(&mut self, name: &str, values: &[usize], weights: &[usize], eps: f64) -> usize {
        let c = self.channels[values[0]];
        let inputs = values.iter().chain(weights).copied().collect();
        self.push(name, LayerKind::WeightedFuse { eps }, inputs, c)
    }

    pub fn channel_sum(&mut self, name: &str, x: usize) -> usize {
        self.push(name, LayerKind::ChannelSum, vec![x], 1)
    }

    pub fn finish(self, output: usize) -> GraphDescription {
        GraphDescription { layers: self.layers, output }
    }
}

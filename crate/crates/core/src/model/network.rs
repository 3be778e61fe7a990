//! Parameters, execution and persistence of a [`GraphDescription`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Mode, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

use super::config::ModelConfig;
use super::graph::{layer_buffers, layer_params, GraphDescription, LayerKind};
use super::icc::build_icc;

/// Spatial multiple the network input is padded to.
pub const INPUT_MULTIPLE: usize = 32;
/// Ratio between input and density-map resolution.
pub const OUTPUT_STRIDE: usize = 8;

const CONFIG_RECORD: &str = "meta.model_config";

/// Learnable parameters plus batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that every tensor the graph needs is present with the right shape.
    pub fn check_against(&self, graph: &GraphDescription) -> Result<()> {
        for layer in &graph.layers {
            for (name, shape) in layer_params(layer).into_iter().chain(layer_buffers(layer)) {
                let t = self.get(&name)?;
                if t.shape() != shape.as_slice() {
                    return shape_err(format!("parameter {name} is {:?}, graph expects {shape:?}", t.shape()));
                }
            }
        }
        Ok(())
    }
}

/// He-normal convolution weights, zero biases, unit batchnorm scale.
/// Deterministic for a given seed.
pub fn init_parameters<T: Scalar>(graph: &GraphDescription, seed: u64) -> ParameterSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for layer in &graph.layers {
        match &layer.kind {
            LayerKind::Conv { in_channels, kernel, .. } => {
                let std = (2.0 / (in_channels * kernel.0 * kernel.1) as f64).sqrt();
                for (name, shape) in layer_params(layer) {
                    let t = if name.ends_with(".weight") { Tensor::randn(shape, std, &mut rng) } else { Tensor::zeros(shape) };
                    params.insert(name, t);
                }
            }
            LayerKind::BatchNorm { channels } => {
                params.insert(format!("{}.weight", layer.name), Tensor::ones(vec![*channels]));
                params.insert(format!("{}.bias", layer.name), Tensor::zeros(vec![*channels]));
                buffers.insert(format!("{}.running_mean", layer.name), Tensor::zeros(vec![*channels]));
                buffers.insert(format!("{}.running_var", layer.name), Tensor::ones(vec![*channels]));
            }
            _ => {}
        }
    }
    ParameterSet { params, buffers }
}

fn weighted_fuse<T: Scalar>(values: &[&Tensor<T>], weights: &[&Tensor<T>], eps: f64) -> Result<Tensor<T>> {
    let eps = T::from_f64_lossy(eps);
    let mut num = Tensor::zeros(values[0].shape().to_vec());
    let mut den = Tensor::full(values[0].shape().to_vec(), eps);
    for (s, w) in values.iter().zip(weights) {
        num = num.zip_map(&s.zip_map(w, |a, b| a * b)?, |a, b| a + b)?;
        den = den.zip_map(w, |a, b| a + b)?;
    }
    num.zip_map(&den, |a, b| a / b)
}

/// Inference-mode execution without a tape. Intermediate activations are
/// dropped after their last consumer unless `keep_all` is set.
pub fn execute<T: Scalar>(
    graph: &GraphDescription,
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    keep_all: bool,
) -> Result<Vec<Option<Tensor<T>>>> {
    let n = graph.layers.len();
    let mut last_use = vec![0usize; n];
    for (i, l) in graph.layers.iter().enumerate() {
        for &j in &l.inputs {
            last_use[j] = i;
        }
    }
    let mut values: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
    for (idx, layer) in graph.layers.iter().enumerate() {
        let ins: Vec<&Tensor<T>> = layer
            .inputs
            .iter()
            .map(|&i| values.get(i).and_then(Option::as_ref).ok_or_else(|| Error::Graph(format!("layer {} input {i} unavailable", layer.name))))
            .collect::<Result<_>>()?;
        let p = |suffix: &str| params.get(&format!("{}.{suffix}", layer.param_prefix()));
        let out = match &layer.kind {
            LayerKind::Input { .. } => input.clone(),
            LayerKind::Conv { geometry, bias, .. } => {
                let b = if *bias { Some(p("bias")?) } else { None };
                ops::conv2d(ins[0], p("weight")?, b, *geometry)?
            }
            LayerKind::BatchNorm { .. } => {
                let (rm, rv) = (p("running_mean")?, p("running_var")?);
                ops::batchnorm2d(ins[0], p("weight")?, p("bias")?, rm.data(), rv.data(), Mode::Eval, BN_EPS)?.0
            }
            LayerKind::Relu => ops::relu(ins[0]),
            LayerKind::Sigmoid => ops::sigmoid(ins[0]),
            LayerKind::MaxPool(g) => ops::maxpool2d(ins[0], *g)?.0,
            LayerKind::AvgPool(g) => ops::avgpool2d(ins[0], *g)?,
            LayerKind::AdaptiveAvgPool { size } => ops::adaptive_avgpool2d(ins[0], *size, *size)?,
            LayerKind::Upsample { factor, method } => ops::upsample(ins[0], *factor, *method)?,
            LayerKind::ResizeLike => {
                let (_, _, h, w) = ins[1].dims4()?;
                ops::resize_bilinear(ins[0], h, w)?
            }
            LayerKind::Concat => ops::concat_channels(&ins)?,
            LayerKind::ChannelSum => ops::channel_sum(ins[0])?,
            LayerKind::Sub => ins[0].zip_map(ins[1], |a, b| a - b)?,
            LayerKind::WeightedFuse { eps } => {
                let k = ins.len() / 2;
                weighted_fuse(&ins[..k], &ins[k..], *eps)?
            }
        };
        out.ensure_finite(&format!("layer {}", layer.name))?;
        values.push(Some(out));
        if !keep_all {
            for &j in &layer.inputs {
                if last_use[j] == idx && j != graph.output {
                    values[j] = None;
                }
            }
        }
    }
    Ok(values)
}

/// Handles of a taped forward pass.
pub struct TapedForward {
    pub output: NodeId,
    /// Tape node of every layer, indexed like the graph.
    pub nodes: Vec<NodeId>,
}

/// Records the graph on `tape`. Parameters enter as named leaves, one per
/// distinct name, so shared layers accumulate into a single gradient.
pub fn forward_taped<T: Scalar>(
    graph: &GraphDescription,
    params: &ParameterSet<T>,
    tape: &mut Tape<T>,
    input: Tensor<T>,
    bn_mode: Mode,
) -> Result<TapedForward> {
    let mut leaves: HashMap<String, NodeId> = HashMap::new();
    let mut leaf = |tape: &mut Tape<T>, name: String| -> Result<NodeId> {
        if let Some(&id) = leaves.get(&name) {
            return Ok(id);
        }
        let id = tape.param(name.clone(), params.get(&name)?.clone())?;
        leaves.insert(name, id);
        Ok(id)
    };
    let mut input = Some(input);
    let mut nodes: Vec<NodeId> = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let ins: Vec<NodeId> = layer.inputs.iter().map(|&i| nodes[i]).collect();
        let prefix = layer.param_prefix();
        let id = match &layer.kind {
            LayerKind::Input { .. } => {
                let x = input.take().ok_or_else(|| Error::Graph("graph has more than one input layer".into()))?;
                tape.input(x)?
            }
            LayerKind::Conv { geometry, bias, .. } => {
                let w = leaf(tape, format!("{prefix}.weight"))?;
                let b = if *bias { Some(leaf(tape, format!("{prefix}.bias"))?) } else { None };
                tape.conv2d(ins[0], w, b, *geometry)?
            }
            LayerKind::BatchNorm { .. } => {
                let g = leaf(tape, format!("{prefix}.weight"))?;
                let b = leaf(tape, format!("{prefix}.bias"))?;
                let rm = params.get(&format!("{prefix}.running_mean"))?;
                let rv = params.get(&format!("{prefix}.running_var"))?;
                tape.batchnorm(ins[0], g, b, rm.data(), rv.data(), bn_mode, BN_EPS)?
            }
            LayerKind::Relu => tape.relu(ins[0])?,
            LayerKind::Sigmoid => tape.sigmoid(ins[0])?,
            LayerKind::MaxPool(g) => tape.maxpool(ins[0], *g)?,
            LayerKind::AvgPool(g) => tape.avgpool(ins[0], *g)?,
            LayerKind::AdaptiveAvgPool { size } => tape.adaptive_avgpool(ins[0], *size, *size)?,
            LayerKind::Upsample { factor, method } => tape.upsample(ins[0], *factor, *method)?,
            LayerKind::ResizeLike => {
                let (_, _, h, w) = tape.value(ins[1]).dims4()?;
                tape.resize_bilinear(ins[0], h, w)?
            }
            LayerKind::Concat => tape.concat(&ins)?,
            LayerKind::ChannelSum => tape.channel_sum(ins[0])?,
            LayerKind::Sub => tape.sub(ins[0], ins[1])?,
            LayerKind::WeightedFuse { eps } => {
                let k = ins.len() / 2;
                let mut num = tape.mul(ins[0], ins[k])?;
                let mut den = ins[k];
                for j in 1..k {
                    let term = tape.mul(ins[j], ins[k + j])?;
                    num = tape.add(num, term)?;
                    den = tape.add(den, ins[k + j])?;
                }
                let den = tape.add_scalar(den, T::from_f64_lossy(*eps))?;
                tape.div(num, den)?
            }
        };
        nodes.push(id);
    }
    Ok(TapedForward { output: nodes[graph.output], nodes })
}

/// Folds train-mode batch statistics of a taped pass into the running buffers.
pub fn update_running_stats<T: Scalar>(
    graph: &GraphDescription,
    params: &mut ParameterSet<T>,
    tape: &Tape<T>,
    pass: &TapedForward,
) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    for (layer, &node) in graph.layers.iter().zip(&pass.nodes) {
        let Some((mean, var)) = tape.batch_stats(node) else { continue };
        for (suffix, stats) in [("running_mean", mean), ("running_var", var)] {
            if let Some(buf) = params.buffers.get_mut(&format!("{}.{suffix}", layer.name)) {
                for (r, &b) in buf.data_mut().iter_mut().zip(stats) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }
}

/// A built ICC network with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub graph: GraphDescription,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let graph = build_icc(&config)?;
        let params = init_parameters(&graph, config.seed);
        Ok(Model { config, graph, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterSet<T>) -> Result<Self> {
        let graph = build_icc(&config)?;
        params.check_against(&graph)?;
        Ok(Model { config, graph, params })
    }

    /// Density maps for `images [N,3,H,W]` of any size.
    ///
    /// The input is reflect-padded on the bottom and right to multiples of 32
    /// and the prediction cropped to `⌈H/8⌉ × ⌈W/8⌉`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = images.dims4()?;
        let padded = ops::reflect_pad_to_multiple(images, INPUT_MULTIPLE)?;
        let mut values = execute(&self.graph, &self.params, &padded, false)?;
        let out = values[self.graph.output].take().expect("output retained");
        ops::crop_top_left(&out, h.div_ceil(OUTPUT_STRIDE), w.div_ceil(OUTPUT_STRIDE))
    }

    /// Taped forward pass on inputs whose extents are multiples of 32.
    pub fn forward_taped(&self, tape: &mut Tape<T>, images: Tensor<T>, bn_mode: Mode) -> Result<TapedForward> {
        let (_, _, h, w) = images.dims4()?;
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return shape_err(format!("training inputs must be multiples of {INPUT_MULTIPLE}, got {h}x{w}"));
        }
        forward_taped(&self.graph, &self.params, tape, images, bn_mode)
    }

    pub fn update_running_stats(&mut self, tape: &Tape<T>, pass: &TapedForward) {
        update_running_stats(&self.graph, &mut self.params, tape, pass);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.params.params.iter().chain(&self.params.buffers) {
            ck.insert_tensor(name.clone(), t);
        }
        ck.insert_text(CONFIG_RECORD, &self.config.to_json());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_json(&ck.text(CONFIG_RECORD)?)?;
        let graph = build_icc(&config)?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for layer in &graph.layers {
            for (name, _) in layer_params(layer) {
                params.insert(name.clone(), ck.tensor(&name)?);
            }
            for (name, _) in layer_buffers(layer) {
                buffers.insert(name.clone(), ck.tensor(&name)?);
            }
        }
        let params = ParameterSet { params, buffers };
        params.check_against(&graph).map_err(|e| Error::Format(format!("checkpoint does not fit its model: {e}")))?;
        Ok(Model { config, graph, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

//! Model graphs, parameter storage, and structural bookkeeping.
//!
//! A model is a flat list of layers in topological order; each layer names
//! the layers it consumes. Pruning never rewrites the graph: it zeroes mask
//! entries over the stored parameters, and [`ModelSnapshot::compact`]
//! materializes the equivalent smaller dense network on demand.
//!
//! DeskNet is the resident CNN: a stem conv followed by three residual
//! stages and a linear classifier. Stage-entry blocks downsample with a
//! 4x4/stride-2 first conv and a 2x2/stride-2 projection shortcut so every
//! spatial extent divides exactly; interior convs are 3x3/stride-1. Only
//! the first conv of each block is open to filter pruning, because identity
//! shortcuts pin every block-output channel count.

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream};
use crate::tape::{BnMode, Tape, TensorId};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// ─── graph ───

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerInput {
    /// The network input.
    Source,
    /// Output of an earlier layer.
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm { channels: usize },
    Relu,
    Dense { inputs: usize, outputs: usize },
    ResidualAdd,
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<LayerInput>,
    /// Whether structured pruning may remove output channels or units.
    pub prunable: bool,
}

/// What a layer (or the source) produces. Spatial extents are tracked so
/// the divisibility contract of strided convs is checked at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Desc {
    Image { channels: usize, height: usize, width: usize },
    Vector { dim: usize },
}

/// Shape of the network input, fixed per model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputDesc {
    Image { channels: usize, height: usize, width: usize },
    Vector { dim: usize },
}

impl InputDesc {
    fn desc(&self) -> Desc {
        match *self {
            InputDesc::Image { channels, height, width } => Desc::Image { channels, height, width },
            InputDesc::Vector { dim } => Desc::Vector { dim },
        }
    }
}

// ─── parameters ───

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub const fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamRole::Weight,
            "bias" => ParamRole::Bias,
            "gamma" => ParamRole::Gamma,
            "beta" => ParamRole::Beta,
            "running_mean" => ParamRole::RunningMean,
            "running_var" => ParamRole::RunningVar,
            _ => return None,
        })
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamKey {
    pub layer: usize,
    pub role: ParamRole,
}

impl ParamKey {
    pub fn new(layer: usize, role: ParamRole) -> Self {
        ParamKey { layer, role }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.role.as_str())
    }
}

/// Binary keep/drop mask over one parameter tensor. Entries can be killed
/// but never resurrected, which keeps masks monotone across cycles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask(Vec<u8>);

impl PruneMask {
    pub fn all_alive(len: usize) -> Self {
        PruneMask(vec![1; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_alive(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn kill(&mut self, i: usize) {
        self.0[i] = 0;
    }

    pub fn alive_count(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn from_raw(bytes: Vec<u8>) -> Result<Self> {
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::Domain("mask entries must be 0 or 1".into()));
        }
        Ok(PruneMask(bytes))
    }
}

// ─── snapshot ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub cycle_index: u32,
    pub schedule_name: String,
    pub eval_accuracy: Option<f64>,
    pub param_count: u64,
    pub mac_count: u64,
    pub seed: u64,
}

/// A complete model state: graph, parameters, running statistics, pruning
/// masks, and bookkeeping metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub input: InputDesc,
    pub graph: Vec<LayerSpec>,
    pub params: BTreeMap<ParamKey, Tensor>,
    pub buffers: BTreeMap<ParamKey, Tensor>,
    pub masks: BTreeMap<ParamKey, PruneMask>,
    pub meta: SnapshotMeta,
}

/// Tape handles of one forward pass, for reading gradients and batch stats.
pub struct Binding {
    pub params: BTreeMap<ParamKey, TensorId>,
    pub bn_outputs: Vec<(usize, TensorId)>,
}

pub struct Forward {
    pub logits: TensorId,
    pub binding: Binding,
}

impl ModelSnapshot {
    /// Assembles a snapshot from parts, validating the graph, filling
    /// all-alive masks for any tensor without one, and recounting meta.
    pub fn assemble(
        input: InputDesc,
        graph: Vec<LayerSpec>,
        params: BTreeMap<ParamKey, Tensor>,
        buffers: BTreeMap<ParamKey, Tensor>,
        masks: BTreeMap<ParamKey, PruneMask>,
        meta: SnapshotMeta,
    ) -> Result<Self> {
        layer_descs(&graph, input)?;
        check_param_shapes(&graph, &params, &buffers)?;
        let mut masks = masks;
        for (key, tensor) in params.iter().chain(buffers.iter()) {
            match masks.get(key) {
                Some(m) if m.len() != tensor.numel() => {
                    return Err(Error::Shape(format!(
                        "mask for {key} has {} entries, tensor has {}",
                        m.len(),
                        tensor.numel()
                    )))
                }
                Some(_) => {}
                None => {
                    masks.insert(*key, PruneMask::all_alive(tensor.numel()));
                }
            }
        }
        let mut snapshot = ModelSnapshot { input, graph, params, buffers, masks, meta };
        snapshot.recount()?;
        Ok(snapshot)
    }

    /// Refreshes the derived counters in `meta`.
    pub fn recount(&mut self) -> Result<()> {
        self.meta.param_count = self.param_count();
        self.meta.mac_count = self.count_macs()?;
        Ok(())
    }

    pub fn param(&self, key: ParamKey) -> Result<&Tensor> {
        self.params.get(&key).ok_or_else(|| Error::Param(format!("missing parameter {key}")))
    }

    pub fn mask(&self, key: ParamKey) -> Result<&PruneMask> {
        self.masks.get(&key).ok_or_else(|| Error::Param(format!("missing mask {key}")))
    }

    /// Number of mask-alive trainable parameters.
    pub fn param_count(&self) -> u64 {
        self.params.keys().map(|key| self.masks[key].alive_count() as u64).sum()
    }

    /// Trainable parameter count if every mask were fully alive.
    pub fn dense_param_count(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    /// MAC count if every mask were fully alive.
    pub fn dense_mac_count(&self) -> Result<u64> {
        let mut clone = self.clone();
        for mask in clone.masks.values_mut() {
            *mask = PruneMask::all_alive(mask.len());
        }
        clone.count_macs()
    }

    /// Alive output channels (conv) or units (dense) of a layer, judged by
    /// the weight mask rows.
    pub fn alive_outputs(&self, layer: usize) -> Result<Vec<bool>> {
        let key = ParamKey::new(layer, ParamRole::Weight);
        let mask = self.mask(key)?;
        match &self.graph[layer].kind {
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
                let per = in_ch * kernel * kernel;
                Ok((0..*out_ch).map(|f| (0..per).any(|j| mask.is_alive(f * per + j))).collect())
            }
            LayerKind::Dense { inputs, outputs } => Ok((0..*outputs)
                .map(|o| (0..*inputs).any(|i| mask.is_alive(i * outputs + o)))
                .collect()),
            other => Err(Error::Param(format!("layer {layer} ({other:?}) has no output channels"))),
        }
    }

    /// Alive input channels of a conv or dense layer, judged column-wise.
    pub fn alive_inputs(&self, layer: usize) -> Result<Vec<bool>> {
        let key = ParamKey::new(layer, ParamRole::Weight);
        let mask = self.mask(key)?;
        match &self.graph[layer].kind {
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
                let kk = kernel * kernel;
                Ok((0..*in_ch)
                    .map(|c| {
                        (0..*out_ch)
                            .any(|f| (0..kk).any(|j| mask.is_alive((f * in_ch + c) * kk + j)))
                    })
                    .collect())
            }
            LayerKind::Dense { inputs, outputs } => Ok((0..*inputs)
                .map(|i| (0..*outputs).any(|o| mask.is_alive(i * outputs + o)))
                .collect()),
            other => Err(Error::Param(format!("layer {layer} ({other:?}) has no input channels"))),
        }
    }

    /// Multiply-accumulate count of one forward pass at the model's input
    /// shape, honoring channel-level aliveness on both sides of each conv
    /// and dense layer. Elementwise and normalization work is not counted.
    pub fn count_macs(&self) -> Result<u64> {
        let descs = layer_descs(&self.graph, self.input)?;
        let mut total: u64 = 0;
        for (idx, layer) in self.graph.iter().enumerate() {
            match &layer.kind {
                LayerKind::Conv { kernel, .. } => {
                    let (oh, ow) = match descs[idx] {
                        Desc::Image { height, width, .. } => (height, width),
                        Desc::Vector { .. } => unreachable!("conv produces images"),
                    };
                    let alive_out = self.alive_outputs(idx)?.iter().filter(|a| **a).count() as u64;
                    let alive_in = self.alive_inputs(idx)?.iter().filter(|a| **a).count() as u64;
                    total += (oh * ow) as u64 * alive_out * alive_in * (kernel * kernel) as u64;
                }
                LayerKind::Dense { .. } => {
                    let alive_out = self.alive_outputs(idx)?.iter().filter(|a| **a).count() as u64;
                    let alive_in = self.alive_inputs(idx)?.iter().filter(|a| **a).count() as u64;
                    total += alive_out * alive_in;
                }
                _ => {}
            }
        }
        Ok(total)
    }

    /// Runs the graph on `input`, registering parameters on the tape.
    /// Training mode uses batch statistics in batchnorm and marks
    /// parameters as requiring gradients.
    pub fn forward(&self, tape: &mut Tape, input: TensorId, training: bool) -> Result<Forward> {
        self.check_input_shape(tape.shape(input))?;
        let mut ids: BTreeMap<ParamKey, TensorId> = BTreeMap::new();
        let mut bn_outputs = Vec::new();
        let mut bind = |tape: &mut Tape, key: ParamKey, t: &Tensor| -> TensorId {
            let mut leaf = t.clone();
            leaf.requires_grad = training && key.role.is_trainable();
            let id = tape.leaf(leaf);
            ids.insert(key, id);
            id
        };

        let mut outputs: Vec<TensorId> = Vec::with_capacity(self.graph.len());
        for (idx, layer) in self.graph.iter().enumerate() {
            let resolve = |i: &LayerInput| match i {
                LayerInput::Source => input,
                LayerInput::Layer(p) => outputs[*p],
            };
            let x = resolve(&layer.inputs[0]);
            let out = match &layer.kind {
                LayerKind::Conv { stride, padding, .. } => {
                    let wkey = ParamKey::new(idx, ParamRole::Weight);
                    let w = bind(tape, wkey, self.param(wkey)?);
                    tape.conv2d(x, w, *stride, *padding)?
                }
                LayerKind::BatchNorm { .. } => {
                    let gkey = ParamKey::new(idx, ParamRole::Gamma);
                    let bkey = ParamKey::new(idx, ParamRole::Beta);
                    let g = bind(tape, gkey, self.param(gkey)?);
                    let b = bind(tape, bkey, self.param(bkey)?);
                    let mode = if training {
                        BnMode::Train
                    } else {
                        BnMode::Eval {
                            running_mean: self.buffer(idx, ParamRole::RunningMean)?.data.clone(),
                            running_var: self.buffer(idx, ParamRole::RunningVar)?.data.clone(),
                        }
                    };
                    let y = tape.batch_norm(x, g, b, BN_EPS, mode)?;
                    if training {
                        bn_outputs.push((idx, y));
                    }
                    y
                }
                LayerKind::Relu => tape.relu(x)?,
                LayerKind::Dense { .. } => {
                    let wkey = ParamKey::new(idx, ParamRole::Weight);
                    let bkey = ParamKey::new(idx, ParamRole::Bias);
                    let w = bind(tape, wkey, self.param(wkey)?);
                    let b = bind(tape, bkey, self.param(bkey)?);
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
                LayerKind::ResidualAdd => {
                    let y = resolve(&layer.inputs[1]);
                    tape.add(x, y)?
                }
                LayerKind::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerKind::Flatten => {
                    let s = tape.shape(x).to_vec();
                    tape.reshape(x, vec![s[0], s[1] * s[2] * s[3]])?
                }
            };
            outputs.push(out);
        }
        let logits = *outputs.last().expect("validated graphs are nonempty");
        Ok(Forward { logits, binding: Binding { params: ids, bn_outputs } })
    }

    fn buffer(&self, layer: usize, role: ParamRole) -> Result<&Tensor> {
        self.buffers
            .get(&ParamKey::new(layer, role))
            .ok_or_else(|| Error::Param(format!("layer {layer} missing {}", role.as_str())))
    }

    fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        match self.input {
            InputDesc::Image { channels, height, width } => {
                if shape.len() != 4
                    || shape[1] != channels
                    || shape[2] != height
                    || shape[3] != width
                {
                    return Err(Error::Shape(format!(
                        "model wants [N,{channels},{height},{width}] input, got {shape:?}"
                    )));
                }
            }
            InputDesc::Vector { dim } => {
                if shape.len() != 2 || shape[1] != dim {
                    return Err(Error::Shape(format!(
                        "model wants [N,{dim}] input, got {shape:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Folds the batch statistics captured during a training-mode forward
    /// into the running estimates (momentum update, unbiased variance).
    pub fn apply_bn_updates(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        for (layer, out_id) in &binding.bn_outputs {
            let (mean, var) = tape
                .bn_batch_stats(*out_id)
                .ok_or_else(|| Error::Run(format!("layer {layer} lost its batch stats")))?;
            let count = tape.data(*out_id).len() / mean.len();
            let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
            let (mean, var) = (mean.to_vec(), var.to_vec());
            let rm = self
                .buffers
                .get_mut(&ParamKey::new(*layer, ParamRole::RunningMean))
                .ok_or_else(|| Error::Param(format!("layer {layer} missing running mean")))?;
            for (r, m) in rm.data.iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self
                .buffers
                .get_mut(&ParamKey::new(*layer, ParamRole::RunningVar))
                .ok_or_else(|| Error::Param(format!("layer {layer} missing running var")))?;
            for (r, v) in rv.data.iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (v * unbias);
            }
        }
        Ok(())
    }

    /// Hands each trainable parameter's gradient to `step` together with
    /// the parameter data and mask, keyed by a human-readable name.
    pub fn visit_grads(
        &mut self,
        tape: &Tape,
        binding: &Binding,
        mut step: impl FnMut(&str, &mut [f64], &[f64], &[u8]) -> Result<()>,
    ) -> Result<()> {
        for (key, id) in &binding.params {
            if !key.role.is_trainable() {
                continue;
            }
            let Some(grad) = tape.grad(*id) else { continue };
            let grad = grad.to_vec();
            let name = format!("{}.{}", self.graph[key.layer].name, key.role.as_str());
            let mask = self.masks[key].clone();
            let tensor = self
                .params
                .get_mut(key)
                .ok_or_else(|| Error::Param(format!("missing parameter {key}")))?;
            step(&name, &mut tensor.data, &grad, mask.as_slice())?;
        }
        Ok(())
    }

    /// Zeroes every masked-out parameter and buffer entry in place. The
    /// optimizers keep masked entries at zero step by step; this is the
    /// pass run right after surgery.
    pub fn enforce_masks(&mut self) {
        for (key, tensor) in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let mask = &self.masks[key];
            for (i, v) in tensor.data.iter_mut().enumerate() {
                if !mask.is_alive(i) {
                    *v = 0.0;
                }
            }
        }
    }

    /// Builds the dense network equivalent to this masked one by removing
    /// channels whose influence is provably gone: the producing weight row
    /// is dead, any following batchnorm entries are dead, and every
    /// consuming conv or dense slice is dead. Layers feeding residual adds
    /// or flatten, and the output layer, are left at full width.
    pub fn compact(&self) -> Result<ModelSnapshot> {
        let n = self.graph.len();
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (idx, layer) in self.graph.iter().enumerate() {
            for input in &layer.inputs {
                if let LayerInput::Layer(p) = input {
                    consumers[*p].push(idx);
                }
            }
        }

        // kept[i]: surviving output positions of layer i, None = all.
        let mut kept: Vec<Option<Vec<usize>>> = vec![None; n];
        for idx in 0..n {
            match &self.graph[idx].kind {
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => {}
                // Pass-through layers mirror their producer.
                _ => {
                    if let LayerInput::Layer(p) = self.graph[idx].inputs[0] {
                        kept[idx] = kept[p].clone();
                    }
                    continue;
                }
            }
            if consumers[idx].is_empty() {
                continue; // output layer keeps its logit count
            }
            let alive = self.alive_outputs(idx)?;
            let dead: Vec<usize> = (0..alive.len()).filter(|c| !alive[*c]).collect();
            if dead.is_empty() {
                continue;
            }
            if self.removal_absorbed(idx, &dead, &consumers)? {
                let keep: Vec<usize> = (0..alive.len()).filter(|c| alive[*c]).collect();
                if keep.is_empty() {
                    return Err(Error::Param(format!(
                        "layer {} would lose every channel",
                        self.graph[idx].name
                    )));
                }
                kept[idx] = Some(keep);
            }
        }

        self.rebuild_with(&kept)
    }

    /// Checks that dropping `dead` output channels of `layer` cannot change
    /// any downstream value, by walking consumers through pass-through
    /// layers and demanding dead masks at every touchpoint.
    fn removal_absorbed(
        &self,
        layer: usize,
        dead: &[usize],
        consumers: &[Vec<usize>],
    ) -> Result<bool> {
        if let Some(mask) = self.masks.get(&ParamKey::new(layer, ParamRole::Bias)) {
            if dead.iter().any(|&c| mask.is_alive(c)) {
                return Ok(false);
            }
        }
        let mut queue: Vec<usize> = consumers[layer].clone();
        while let Some(j) = queue.pop() {
            match &self.graph[j].kind {
                LayerKind::BatchNorm { .. } => {
                    for role in [
                        ParamRole::Gamma,
                        ParamRole::Beta,
                        ParamRole::RunningMean,
                        ParamRole::RunningVar,
                    ] {
                        let mask = self
                            .masks
                            .get(&ParamKey::new(j, role))
                            .ok_or_else(|| Error::Param(format!("missing mask layer{j}")))?;
                        if dead.iter().any(|&c| mask.is_alive(c)) {
                            return Ok(false);
                        }
                    }
                    queue.extend(consumers[j].iter().copied());
                }
                LayerKind::Relu | LayerKind::GlobalAvgPool => {
                    queue.extend(consumers[j].iter().copied());
                }
                LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
                    let kk = kernel * kernel;
                    let mask = self.mask(ParamKey::new(j, ParamRole::Weight))?;
                    for &c in dead {
                        for f in 0..*out_ch {
                            for t in 0..kk {
                                if mask.is_alive((f * in_ch + c) * kk + t) {
                                    return Ok(false);
                                }
                            }
                        }
                    }
                }
                LayerKind::Dense { inputs: _, outputs } => {
                    let mask = self.mask(ParamKey::new(j, ParamRole::Weight))?;
                    for &c in dead {
                        for o in 0..*outputs {
                            if mask.is_alive(c * outputs + o) {
                                return Ok(false);
                            }
                        }
                    }
                }
                LayerKind::ResidualAdd | LayerKind::Flatten => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Materializes a new snapshot given surviving output positions per
    /// layer. Selects weight rows and columns, batchnorm entries, and
    /// matching mask entries; rewrites the layer dims.
    fn rebuild_with(&self, kept: &[Option<Vec<usize>>]) -> Result<ModelSnapshot> {
        let kept_of = |input: &LayerInput| -> Option<Vec<usize>> {
            match input {
                LayerInput::Source => None,
                LayerInput::Layer(p) => kept[*p].clone(),
            }
        };
        let mut graph = Vec::with_capacity(self.graph.len());
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut masks = BTreeMap::new();

        for (idx, layer) in self.graph.iter().enumerate() {
            let in_keep = kept_of(&layer.inputs[0]);
            let out_keep = kept[idx].clone();
            let mut spec = layer.clone();
            match &mut spec.kind {
                LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
                    let rows: Vec<usize> = out_keep.unwrap_or_else(|| (0..*out_ch).collect());
                    let cols: Vec<usize> = in_keep.unwrap_or_else(|| (0..*in_ch).collect());
                    let kk = *kernel * *kernel;
                    let key = ParamKey::new(idx, ParamRole::Weight);
                    let old = self.param(key)?;
                    let old_mask = self.mask(key)?;
                    let mut data = Vec::with_capacity(rows.len() * cols.len() * kk);
                    let mut mbits = Vec::with_capacity(rows.len() * cols.len() * kk);
                    for &f in &rows {
                        for &c in &cols {
                            let base = (f * *in_ch + c) * kk;
                            for t in 0..kk {
                                data.push(old.data[base + t]);
                                mbits.push(old_mask.as_slice()[base + t]);
                            }
                        }
                    }
                    params.insert(
                        key,
                        Tensor::new(vec![rows.len(), cols.len(), *kernel, *kernel], data)?,
                    );
                    masks.insert(key, PruneMask::from_raw(mbits)?);
                    *in_ch = cols.len();
                    *out_ch = rows.len();
                }
                LayerKind::BatchNorm { channels } => {
                    let keep: Vec<usize> = in_keep.unwrap_or_else(|| (0..*channels).collect());
                    for role in [
                        ParamRole::Gamma,
                        ParamRole::Beta,
                        ParamRole::RunningMean,
                        ParamRole::RunningVar,
                    ] {
                        let key = ParamKey::new(idx, role);
                        let source = if role.is_trainable() {
                            self.param(key)?
                        } else {
                            self.buffer(idx, role)?
                        };
                        let old_mask = self.mask(key)?;
                        let data: Vec<f64> = keep.iter().map(|&c| source.data[c]).collect();
                        let mbits: Vec<u8> = keep.iter().map(|&c| old_mask.as_slice()[c]).collect();
                        let tensor = Tensor::new(vec![keep.len()], data)?;
                        if role.is_trainable() {
                            params.insert(key, tensor);
                        } else {
                            buffers.insert(key, tensor);
                        }
                        masks.insert(key, PruneMask::from_raw(mbits)?);
                    }
                    *channels = keep.len();
                }
                LayerKind::Dense { inputs, outputs } => {
                    let rows: Vec<usize> = in_keep.unwrap_or_else(|| (0..*inputs).collect());
                    let cols: Vec<usize> = out_keep.unwrap_or_else(|| (0..*outputs).collect());
                    let wkey = ParamKey::new(idx, ParamRole::Weight);
                    let old = self.param(wkey)?;
                    let old_mask = self.mask(wkey)?;
                    let mut data = Vec::with_capacity(rows.len() * cols.len());
                    let mut mbits = Vec::with_capacity(rows.len() * cols.len());
                    for &i in &rows {
                        for &o in &cols {
                            data.push(old.data[i * *outputs + o]);
                            mbits.push(old_mask.as_slice()[i * *outputs + o]);
                        }
                    }
                    params.insert(wkey, Tensor::new(vec![rows.len(), cols.len()], data)?);
                    masks.insert(wkey, PruneMask::from_raw(mbits)?);
                    let bkey = ParamKey::new(idx, ParamRole::Bias);
                    let old_b = self.param(bkey)?;
                    let old_bm = self.mask(bkey)?;
                    params.insert(
                        bkey,
                        Tensor::new(
                            vec![cols.len()],
                            cols.iter().map(|&o| old_b.data[o]).collect(),
                        )?,
                    );
                    masks.insert(
                        bkey,
                        PruneMask::from_raw(cols.iter().map(|&o| old_bm.as_slice()[o]).collect())?,
                    );
                    *inputs = rows.len();
                    *outputs = cols.len();
                }
                LayerKind::Relu
                | LayerKind::ResidualAdd
                | LayerKind::GlobalAvgPool
                | LayerKind::Flatten => {}
            }
            graph.push(spec);
        }

        ModelSnapshot::assemble(self.input, graph, params, buffers, masks, self.meta.clone())
    }
}

/// Every layer must hold exactly the tensors its kind calls for, at the
/// shapes its dims imply.
fn check_param_shapes(
    graph: &[LayerSpec],
    params: &BTreeMap<ParamKey, Tensor>,
    buffers: &BTreeMap<ParamKey, Tensor>,
) -> Result<()> {
    let expect =
        |store: &BTreeMap<ParamKey, Tensor>, key: ParamKey, shape: Vec<usize>| -> Result<()> {
            let t = store.get(&key).ok_or_else(|| Error::Param(format!("missing tensor {key}")))?;
            if t.shape != shape {
                return Err(Error::Shape(format!(
                    "{key} has shape {:?}, graph wants {shape:?}",
                    t.shape
                )));
            }
            Ok(())
        };
    for (idx, layer) in graph.iter().enumerate() {
        match layer.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
                expect(
                    params,
                    ParamKey::new(idx, ParamRole::Weight),
                    vec![out_ch, in_ch, kernel, kernel],
                )?;
            }
            LayerKind::BatchNorm { channels } => {
                expect(params, ParamKey::new(idx, ParamRole::Gamma), vec![channels])?;
                expect(params, ParamKey::new(idx, ParamRole::Beta), vec![channels])?;
                expect(buffers, ParamKey::new(idx, ParamRole::RunningMean), vec![channels])?;
                expect(buffers, ParamKey::new(idx, ParamRole::RunningVar), vec![channels])?;
            }
            LayerKind::Dense { inputs, outputs } => {
                expect(params, ParamKey::new(idx, ParamRole::Weight), vec![inputs, outputs])?;
                expect(params, ParamKey::new(idx, ParamRole::Bias), vec![outputs])?;
            }
            _ => {}
        }
    }
    Ok(())
}

fn desc_of(input: InputDesc, layer_input: &LayerInput, descs: &[Desc]) -> Desc {
    match layer_input {
        LayerInput::Source => input.desc(),
        LayerInput::Layer(p) => descs[*p],
    }
}

/// Validates a graph against an input shape and returns the output
/// description of every layer: topological input references, consistent
/// channel and feature dims, and exact spatial division for strided convs.
pub fn layer_descs(graph: &[LayerSpec], input: InputDesc) -> Result<Vec<Desc>> {
    if graph.is_empty() {
        return Err(Error::Shape("model graph is empty".into()));
    }
    let mut descs: Vec<Desc> = Vec::with_capacity(graph.len());
    for (idx, layer) in graph.iter().enumerate() {
        for i in &layer.inputs {
            if let LayerInput::Layer(p) = i {
                if *p >= idx {
                    return Err(Error::Shape(format!(
                        "layer {} ({idx}) consumes layer {p}, which is not earlier",
                        layer.name
                    )));
                }
            }
        }
        let wanted = match layer.kind {
            LayerKind::ResidualAdd => 2,
            _ => 1,
        };
        if layer.inputs.len() != wanted {
            return Err(Error::Shape(format!(
                "layer {} wants {wanted} inputs, has {}",
                layer.name,
                layer.inputs.len()
            )));
        }
        let first = desc_of(input, &layer.inputs[0], &descs);
        let out = match &layer.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, stride, padding } => {
                if *kernel == 0 || *stride == 0 || *out_ch == 0 || *in_ch == 0 {
                    return Err(Error::Param(format!(
                        "layer {}: degenerate conv geometry",
                        layer.name
                    )));
                }
                let (c, h, w) = match first {
                    Desc::Image { channels, height, width } => (channels, height, width),
                    other => {
                        return Err(Error::Shape(format!(
                            "layer {} wants an image input, got {other:?}",
                            layer.name
                        )))
                    }
                };
                if c != *in_ch {
                    return Err(Error::Shape(format!(
                        "layer {} wants {in_ch} input channels, gets {c}",
                        layer.name
                    )));
                }
                let span = |extent: usize| -> Result<usize> {
                    let padded = extent + 2 * padding;
                    if padded < *kernel || !(padded - kernel).is_multiple_of(*stride) {
                        return Err(Error::Shape(format!(
                            "layer {}: extent {extent} with kernel {kernel}, stride {stride}, \
                             padding {padding} does not divide exactly",
                            layer.name
                        )));
                    }
                    Ok((padded - kernel) / stride + 1)
                };
                Desc::Image { channels: *out_ch, height: span(h)?, width: span(w)? }
            }
            LayerKind::BatchNorm { channels } => match first {
                Desc::Image { channels: c, height, width } if c == *channels => {
                    Desc::Image { channels: c, height, width }
                }
                other => {
                    return Err(Error::Shape(format!(
                        "layer {} normalizes {channels} channels, got {other:?}",
                        layer.name
                    )))
                }
            },
            LayerKind::Relu => first,
            LayerKind::Dense { inputs, outputs } => match first {
                Desc::Vector { dim } if dim == *inputs => Desc::Vector { dim: *outputs },
                other => {
                    return Err(Error::Shape(format!(
                        "layer {} wants a {inputs}-vector, got {other:?}",
                        layer.name
                    )))
                }
            },
            LayerKind::ResidualAdd => {
                let second = desc_of(input, &layer.inputs[1], &descs);
                if first != second {
                    return Err(Error::Shape(format!(
                        "layer {}: residual branches disagree ({first:?} vs {second:?})",
                        layer.name
                    )));
                }
                first
            }
            LayerKind::GlobalAvgPool => match first {
                Desc::Image { channels, .. } => Desc::Vector { dim: channels },
                other => {
                    return Err(Error::Shape(format!(
                        "layer {} pools images, got {other:?}",
                        layer.name
                    )))
                }
            },
            LayerKind::Flatten => match first {
                Desc::Image { channels, height, width } => {
                    Desc::Vector { dim: channels * height * width }
                }
                other => {
                    return Err(Error::Shape(format!(
                        "layer {} flattens images, got {other:?}",
                        layer.name
                    )))
                }
            },
        };
        descs.push(out);
    }
    Ok(descs)
}

// ─── builders ───

/// Geometry of a DeskNet instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeskNetSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub num_classes: usize,
}

impl Default for DeskNetSpec {
    fn default() -> Self {
        DeskNetSpec {
            in_channels: 3,
            height: 32,
            width: 32,
            widths: [8, 16, 32],
            blocks_per_stage: 1,
            num_classes: 10,
        }
    }
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..numel).map(|_| standard_normal(rng) * std).collect();
    Tensor::new(shape, data)
}

struct GraphBuilder {
    graph: Vec<LayerSpec>,
    params: BTreeMap<ParamKey, Tensor>,
    buffers: BTreeMap<ParamKey, Tensor>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    fn new(seed: u64) -> Self {
        GraphBuilder {
            graph: Vec::new(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: stream(seed, "init"),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        input: LayerInput,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        prunable: bool,
    ) -> Result<usize> {
        let idx = self.graph.len();
        let weight =
            he_tensor(&mut self.rng, vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel)?;
        self.params.insert(ParamKey::new(idx, ParamRole::Weight), weight);
        self.graph.push(LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv { in_ch, out_ch, kernel, stride, padding },
            inputs: vec![input],
            prunable,
        });
        Ok(idx)
    }

    fn batch_norm(&mut self, name: &str, input: usize, channels: usize) -> usize {
        let idx = self.graph.len();
        let ones = Tensor::new(vec![channels], vec![1.0; channels]).expect("static shape");
        let zeros = Tensor::zeros(vec![channels]).expect("static shape");
        self.params.insert(ParamKey::new(idx, ParamRole::Gamma), ones.clone());
        self.params.insert(ParamKey::new(idx, ParamRole::Beta), zeros.clone());
        self.buffers.insert(ParamKey::new(idx, ParamRole::RunningMean), zeros);
        self.buffers.insert(ParamKey::new(idx, ParamRole::RunningVar), ones);
        self.graph.push(LayerSpec {
            name: name.into(),
            kind: LayerKind::BatchNorm { channels },
            inputs: vec![LayerInput::Layer(input)],
            prunable: false,
        });
        idx
    }

    fn relu(&mut self, name: &str, input: usize) -> usize {
        let idx = self.graph.len();
        self.graph.push(LayerSpec {
            name: name.into(),
            kind: LayerKind::Relu,
            inputs: vec![LayerInput::Layer(input)],
            prunable: false,
        });
        idx
    }

    fn dense(
        &mut self,
        name: &str,
        input: LayerInput,
        inputs: usize,
        outputs: usize,
        prunable: bool,
    ) -> Result<usize> {
        let idx = self.graph.len();
        let weight = he_tensor(&mut self.rng, vec![inputs, outputs], inputs)?;
        self.params.insert(ParamKey::new(idx, ParamRole::Weight), weight);
        let bias = Tensor::zeros(vec![outputs]).expect("static shape");
        self.params.insert(ParamKey::new(idx, ParamRole::Bias), bias);
        self.graph.push(LayerSpec {
            name: name.into(),
            kind: LayerKind::Dense { inputs, outputs },
            inputs: vec![input],
            prunable,
        });
        Ok(idx)
    }

    fn simple(&mut self, name: &str, kind: LayerKind, inputs: Vec<LayerInput>) -> usize {
        let idx = self.graph.len();
        self.graph.push(LayerSpec { name: name.into(), kind, inputs, prunable: false });
        idx
    }

    fn finish(self, input: InputDesc, seed: u64) -> Result<ModelSnapshot> {
        ModelSnapshot::assemble(
            input,
            self.graph,
            self.params,
            self.buffers,
            BTreeMap::new(),
            SnapshotMeta {
                cycle_index: 0,
                schedule_name: "init".into(),
                eval_accuracy: None,
                param_count: 0,
                mac_count: 0,
                seed,
            },
        )
    }
}

/// Builds a DeskNet. The stem is a 3x3 conv; each stage holds
/// `blocks_per_stage` residual blocks; stages 2 and 3 downsample at their
/// first block. Convs carry no bias (batchnorm follows each one), the
/// classifier does. Weights get He initialization from the "init" stream.
pub fn build_desknet(spec: &DeskNetSpec, seed: u64) -> Result<ModelSnapshot> {
    if spec.blocks_per_stage == 0 {
        return Err(Error::Param("blocks_per_stage must be at least 1".into()));
    }
    if spec.widths.contains(&0) || spec.num_classes == 0 {
        return Err(Error::Param("stage widths and class count must be positive".into()));
    }
    let mut b = GraphBuilder::new(seed);
    let stem =
        b.conv("stem.conv", LayerInput::Source, spec.in_channels, spec.widths[0], 3, 1, 1, false)?;
    let stem_bn = b.batch_norm("stem.bn", stem, spec.widths[0]);
    let mut prev = b.relu("stem.relu", stem_bn);
    let mut prev_ch = spec.widths[0];

    for (stage, &width) in spec.widths.iter().enumerate() {
        for block in 0..spec.blocks_per_stage {
            let tag = format!("s{}b{}", stage + 1, block);
            let downsample = stage > 0 && block == 0;
            let (k1, s1, p1) = if downsample { (4, 2, 1) } else { (3, 1, 1) };
            let conv1 = b.conv(
                &format!("{tag}.conv1"),
                LayerInput::Layer(prev),
                prev_ch,
                width,
                k1,
                s1,
                p1,
                true,
            )?;
            let bn1 = b.batch_norm(&format!("{tag}.bn1"), conv1, width);
            let relu1 = b.relu(&format!("{tag}.relu1"), bn1);
            let conv2 = b.conv(
                &format!("{tag}.conv2"),
                LayerInput::Layer(relu1),
                width,
                width,
                3,
                1,
                1,
                false,
            )?;
            let bn2 = b.batch_norm(&format!("{tag}.bn2"), conv2, width);
            let shortcut = if downsample {
                let sc = b.conv(
                    &format!("{tag}.short.conv"),
                    LayerInput::Layer(prev),
                    prev_ch,
                    width,
                    2,
                    2,
                    0,
                    false,
                )?;
                b.batch_norm(&format!("{tag}.short.bn"), sc, width)
            } else {
                prev
            };
            let add = b.simple(
                &format!("{tag}.add"),
                LayerKind::ResidualAdd,
                vec![LayerInput::Layer(bn2), LayerInput::Layer(shortcut)],
            );
            prev = b.relu(&format!("{tag}.relu2"), add);
            prev_ch = width;
        }
    }

    let gap = b.simple("gap", LayerKind::GlobalAvgPool, vec![LayerInput::Layer(prev)]);
    b.dense("fc", LayerInput::Layer(gap), spec.widths[2], spec.num_classes, false)?;
    b.finish(
        InputDesc::Image { channels: spec.in_channels, height: spec.height, width: spec.width },
        seed,
    )
}

/// Builds a plain MLP over the given feature dims: `[4, 8, 3]` is a
/// 4-feature input, one hidden layer of 8 units, 3 outputs. Hidden layers
/// are open to unit pruning; the output layer is not.
pub fn build_mlp(dims: &[usize], seed: u64) -> Result<ModelSnapshot> {
    if dims.len() < 2 {
        return Err(Error::Param("an MLP needs an input and an output dim".into()));
    }
    if dims.contains(&0) {
        return Err(Error::Param("MLP dims must be positive".into()));
    }
    let mut b = GraphBuilder::new(seed);
    let mut prev = LayerInput::Source;
    for (i, pair) in dims.windows(2).enumerate() {
        let last = i + 2 == dims.len();
        let fc = b.dense(&format!("fc{i}"), prev, pair[0], pair[1], !last)?;
        prev = if last {
            LayerInput::Layer(fc)
        } else {
            LayerInput::Layer(b.relu(&format!("relu{i}"), fc))
        };
    }
    b.finish(InputDesc::Vector { dim: dims[0] }, seed)
}

/// Redraws every parameter and running statistic as the builders would,
/// keeping the graph and masks. Weights consume the `"init"` stream in
/// graph order, so reinitializing a freshly built model with the same seed
/// reproduces it exactly; masked entries are zeroed afterwards.
pub fn reinit_params(model: &ModelSnapshot, seed: u64) -> Result<ModelSnapshot> {
    let mut out = model.clone();
    let mut rng = stream(seed, "init");
    for (idx, layer) in model.graph.iter().enumerate() {
        match &layer.kind {
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => {
                let w = he_tensor(
                    &mut rng,
                    vec![*out_ch, *in_ch, *kernel, *kernel],
                    in_ch * kernel * kernel,
                )?;
                out.params.insert(ParamKey::new(idx, ParamRole::Weight), w);
            }
            LayerKind::Dense { inputs, outputs } => {
                let w = he_tensor(&mut rng, vec![*inputs, *outputs], *inputs)?;
                out.params.insert(ParamKey::new(idx, ParamRole::Weight), w);
                out.params
                    .insert(ParamKey::new(idx, ParamRole::Bias), Tensor::zeros(vec![*outputs])?);
            }
            LayerKind::BatchNorm { channels } => {
                let ones = Tensor::new(vec![*channels], vec![1.0; *channels])?;
                let zeros = Tensor::zeros(vec![*channels])?;
                out.params.insert(ParamKey::new(idx, ParamRole::Gamma), ones.clone());
                out.params.insert(ParamKey::new(idx, ParamRole::Beta), zeros.clone());
                out.buffers.insert(ParamKey::new(idx, ParamRole::RunningMean), zeros);
                out.buffers.insert(ParamKey::new(idx, ParamRole::RunningVar), ones);
            }
            LayerKind::Relu
            | LayerKind::ResidualAdd
            | LayerKind::GlobalAvgPool
            | LayerKind::Flatten => {}
        }
    }
    out.enforce_masks();
    out.meta.seed = seed;
    out.recount()?;
    Ok(out)
}

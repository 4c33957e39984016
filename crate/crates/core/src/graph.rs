//! The denoiser module graph: a UNet-like chain of down blocks, a mid block
//! and up blocks with skip connections, executed as an ordered node list.
//!
//! Nodes are wired by id; execution resolves ids to indices once and then
//! walks the list in order, so a forward pass visits every node exactly once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, normal_tensor};
use crate::tensor::{
    combine, conv2d, group_norm, linear, linear_tokens, resample, silu, CombineMode, ConvSpec,
    ResampleMode, Tensor,
};

/// Role of a node in the graph. Parameterized kinds carry weight/bias and
/// are the quantization targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Conv,
    Linear,
    AttentionProjection,
    ShortcutConv,
    DownsampleConv,
    UpsampleConv,
    Norm,
    Activation,
    Combine,
}

impl NodeKind {
    pub fn is_parameterized(self) -> bool {
        matches!(
            self,
            NodeKind::Conv
                | NodeKind::Linear
                | NodeKind::AttentionProjection
                | NodeKind::ShortcutConv
                | NodeKind::DownsampleConv
                | NodeKind::UpsampleConv
        )
    }
}

/// Execution attributes of a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpAttrs {
    /// 2D convolution (also shortcut and strided downsample convolutions).
    Conv { spec: ConvSpec },
    /// Nearest-neighbor 2x upsample followed by a convolution.
    UpsampleConv { spec: ConvSpec },
    /// Affine map on [N, D] inputs.
    Linear,
    /// Channelwise affine map applied at every spatial position.
    TokenLinear,
    /// Group normalization with per-channel affine.
    Norm {
        groups: usize,
        eps: f64,
        gamma: Tensor,
        beta: Tensor,
    },
    /// SiLU activation.
    Silu,
    /// Merge of two upstream values.
    Combine { mode: CombineMode },
}

/// Reserved input names understood by the executor.
pub const INPUT_LATENT: &str = "@latent";
pub const INPUT_TIME_EMBED: &str = "@temb";
pub const INPUT_COND: &str = "@cond";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ResolvedInput {
    Latent,
    TimeEmbed,
    Cond,
    Node(usize),
}

/// One module of the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleNode {
    pub id: String,
    pub kind: NodeKind,
    pub attrs: OpAttrs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Tensor>,
    /// Per-input-channel migration scales; the node divides its activation
    /// by these at runtime. Present only after smoothing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing_scales: Option<Vec<f64>>,
    /// Multiply-accumulate count for one forward at nominal input shape.
    pub macs: u64,
    /// Element count of the node's activation input at nominal shape.
    pub nominal_input_numel: u64,
    /// Upstream value names: node ids or the reserved `@latent` / `@temb` /
    /// `@cond` inputs.
    pub inputs: Vec<String>,
}

/// A named group of consecutive nodes along the execution path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGroup {
    pub name: String,
    pub position_index: usize,
    pub node_ids: Vec<String>,
}

/// Shapes the graph expects at its inputs. Batch size is a runtime choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
}

impl InputSpec {
    pub fn latent_shape(&self, batch: usize) -> Vec<usize> {
        vec![
            batch,
            self.latent_channels,
            self.latent_height,
            self.latent_width,
        ]
    }
}

/// Observer invoked once per node during a forward pass.
pub trait ForwardObserver {
    fn observe(&mut self, node: &ModuleNode, inputs: &[&Tensor], output: &Tensor);
}

impl<F: FnMut(&ModuleNode, &[&Tensor], &Tensor)> ForwardObserver for F {
    fn observe(&mut self, node: &ModuleNode, inputs: &[&Tensor], output: &Tensor) {
        self(node, inputs, output)
    }
}

/// The denoiser graph. Immutable after construction; forwards are safe to
/// run concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleGraph {
    pub input: InputSpec,
    pub nodes: Vec<ModuleNode>,
    pub blocks: Vec<BlockGroup>,
    resolved: Vec<Vec<ResolvedInput>>,
}

impl ModuleGraph {
    /// Assemble a graph from parts, resolving and validating the wiring.
    pub fn from_parts(
        input: InputSpec,
        nodes: Vec<ModuleNode>,
        blocks: Vec<BlockGroup>,
    ) -> Result<Self> {
        let mut graph = ModuleGraph {
            input,
            nodes,
            blocks,
            resolved: Vec::new(),
        };
        graph.resolve()?;
        graph.validate()?;
        Ok(graph)
    }

    fn resolve(&mut self) -> Result<()> {
        let mut index = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if index.insert(node.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate node id `{}`", node.id)));
            }
        }
        let mut resolved = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let mut ins = Vec::with_capacity(node.inputs.len());
            for name in &node.inputs {
                let r = match name.as_str() {
                    INPUT_LATENT => ResolvedInput::Latent,
                    INPUT_TIME_EMBED => ResolvedInput::TimeEmbed,
                    INPUT_COND => ResolvedInput::Cond,
                    id => {
                        let &j = index
                            .get(id)
                            .ok_or_else(|| Error::UnknownNode(id.to_string()))?;
                        if j >= i {
                            return Err(Error::invalid(format!(
                                "node `{}` consumes `{id}` which does not precede it",
                                node.id
                            )));
                        }
                        ResolvedInput::Node(j)
                    }
                };
                ins.push(r);
            }
            resolved.push(ins);
        }
        self.resolved = resolved;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("graph has no nodes"));
        }
        let mut seen = BTreeMap::new();
        for block in &self.blocks {
            for id in &block.node_ids {
                if seen.insert(id.clone(), block.name.clone()).is_some() {
                    return Err(Error::invalid(format!(
                        "node `{id}` assigned to more than one block"
                    )));
                }
            }
        }
        for node in &self.nodes {
            if !seen.contains_key(&node.id) {
                return Err(Error::invalid(format!(
                    "node `{}` belongs to no block",
                    node.id
                )));
            }
            let parameterized = node.kind.is_parameterized();
            if parameterized && (node.weight.is_none() || node.bias.is_none()) {
                return Err(Error::invalid(format!(
                    "parameterized node `{}` is missing weight or bias",
                    node.id
                )));
            }
            if parameterized != (node.macs > 0) {
                return Err(Error::invalid(format!(
                    "node `{}` has macs={} which contradicts its kind",
                    node.id, node.macs
                )));
            }
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if block.position_index != i {
                return Err(Error::invalid(format!(
                    "block `{}` has position {} but sits at {}",
                    block.name, block.position_index, i
                )));
            }
        }
        Ok(())
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node(&self, id: &str) -> Result<&ModuleNode> {
        self.node_index(id)
            .map(|i| &self.nodes[i])
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub(crate) fn resolved_inputs(&self, node_idx: usize) -> &[ResolvedInput] {
        &self.resolved[node_idx]
    }

    /// Blocks in execution order.
    pub fn list_blocks(&self) -> &[BlockGroup] {
        &self.blocks
    }

    /// Ids of parameterized nodes in execution order.
    pub fn list_parameterized_modules(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.kind.is_parameterized())
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Block position of a node.
    pub fn block_of(&self, node_id: &str) -> Option<usize> {
        self.blocks
            .iter()
            .find(|b| b.node_ids.iter().any(|id| id == node_id))
            .map(|b| b.position_index)
    }

    /// Zero every parameterized node's weight and bias.
    pub fn zero_parameters(&mut self) {
        for node in &mut self.nodes {
            if node.kind.is_parameterized() {
                if let Some(w) = &mut node.weight {
                    w.data_mut().fill(0.0);
                }
                if let Some(b) = &mut node.bias {
                    b.data_mut().fill(0.0);
                }
            }
        }
    }

    fn check_forward_inputs(&self, z: &Tensor, t: usize, cond: &Tensor) -> Result<usize> {
        let [n, c, h, w] = z.dims4("forward")?;
        let spec = &self.input;
        if c != spec.latent_channels || h != spec.latent_height || w != spec.latent_width {
            return Err(Error::shape(
                "forward",
                format!(
                    "latent {:?} does not match graph input [{}, {}, {}]",
                    z.shape(),
                    spec.latent_channels,
                    spec.latent_height,
                    spec.latent_width
                ),
            ));
        }
        if t < 1 {
            return Err(Error::invalid("timestep must be >= 1"));
        }
        let [cn, cd] = cond.dims2("forward")?;
        if cn != n || cd != spec.cond_dim {
            return Err(Error::shape(
                "forward",
                format!(
                    "cond {:?} does not match batch {n} x cond_dim {}",
                    cond.shape(),
                    spec.cond_dim
                ),
            ));
        }
        Ok(n)
    }

    /// Full-precision forward pass: predicted noise for latent `z` at
    /// timestep `t` under condition rows `cond` (one row per batch element;
    /// all-zero rows mean unconditional).
    pub fn forward(
        &self,
        z: &Tensor,
        t: usize,
        cond: &Tensor,
        mut observer: Option<&mut dyn ForwardObserver>,
    ) -> Result<Tensor> {
        let n = self.check_forward_inputs(z, t, cond)?;
        let temb = time_embedding(t, self.input.time_embed_dim, n);
        run_graph(self, z, &temb, cond, |node, inputs| {
            let out = eval_node_fp(node, inputs)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs.observe(node, inputs, &out);
            }
            Ok(out)
        })
    }
}

/// Sinusoidal embedding of an integer timestep, one identical row per batch
/// element.
pub fn time_embedding(t: usize, dim: usize, rows: usize) -> Tensor {
    let half = (dim / 2).max(1);
    let mut row = vec![0.0; dim];
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        row[i] = angle.sin();
        if half + i < dim {
            row[half + i] = angle.cos();
        }
    }
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        data.extend_from_slice(&row);
    }
    Tensor::new(vec![rows, dim], data).expect("embedding shape")
}

/// Divide each input channel by its migration scale.
pub(crate) fn divide_by_channel_scales(x: &Tensor, scales: &[f64]) -> Result<Tensor> {
    let channels = match x.shape() {
        [_, c, _, _] => *c,
        [_, d] => *d,
        other => {
            return Err(Error::shape(
                "smoothing",
                format!("unsupported activation rank {other:?}"),
            ))
        }
    };
    if channels != scales.len() {
        return Err(Error::shape(
            "smoothing",
            format!("{} scales for {channels} channels", scales.len()),
        ));
    }
    let mut out = x.clone();
    match x.shape() {
        [n, c, h, w] => {
            let hw = h * w;
            let (n, c) = (*n, *c);
            let data = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        data[base + p] /= scales[ci];
                    }
                }
            }
        }
        [n, d] => {
            let (n, d) = (*n, *d);
            let data = out.data_mut();
            for ni in 0..n {
                for j in 0..d {
                    data[ni * d + j] /= scales[j];
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Evaluate one node in full precision on resolved input tensors.
pub(crate) fn eval_node_fp(node: &ModuleNode, inputs: &[&Tensor]) -> Result<Tensor> {
    eval_node_with(node, inputs, node.weight.as_ref(), |x| Ok(x.clone()))
}

/// Evaluate one node with a caller-supplied weight tensor and an activation
/// transform applied after the smoothing pre-scale. This is the shared core
/// of the full-precision and fake-quantized execution paths.
pub(crate) fn eval_node_with(
    node: &ModuleNode,
    inputs: &[&Tensor],
    weight: Option<&Tensor>,
    transform_activation: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if let OpAttrs::Combine { mode } = &node.attrs {
        if inputs.len() != 2 {
            return Err(Error::invalid(format!(
                "combine node `{}` needs 2 inputs, has {}",
                node.id,
                inputs.len()
            )));
        }
        return combine(inputs[0], inputs[1], *mode);
    }
    if inputs.len() != 1 {
        return Err(Error::invalid(format!(
            "node `{}` needs 1 input, has {}",
            node.id,
            inputs.len()
        )));
    }
    let mut x = inputs[0].clone();
    if node.kind.is_parameterized() {
        if let Some(scales) = &node.smoothing_scales {
            x = divide_by_channel_scales(&x, scales)?;
        }
        x = transform_activation(&x)?;
    }

    fn param<'a>(opt: Option<&'a Tensor>, id: &str) -> Result<&'a Tensor> {
        opt.ok_or_else(|| Error::invalid(format!("node `{id}` is missing parameters")))
    }
    let id = &node.id;
    match &node.attrs {
        OpAttrs::Conv { spec } => {
            conv2d(&x, param(weight, id)?, param(node.bias.as_ref(), id)?, spec)
        }
        OpAttrs::UpsampleConv { spec } => {
            let up = resample(&x, ResampleMode::UpNearest2x)?;
            conv2d(&up, param(weight, id)?, param(node.bias.as_ref(), id)?, spec)
        }
        OpAttrs::Linear => linear(&x, param(weight, id)?, param(node.bias.as_ref(), id)?),
        OpAttrs::TokenLinear => {
            linear_tokens(&x, param(weight, id)?, param(node.bias.as_ref(), id)?)
        }
        OpAttrs::Norm {
            groups,
            eps,
            gamma,
            beta,
        } => group_norm(&x, *groups, gamma, beta, *eps),
        OpAttrs::Silu => Ok(silu(&x)),
        OpAttrs::Combine { .. } => unreachable!("handled above"),
    }
}

/// Walk the node list once, resolving each node's inputs and storing its
/// value. Returns the last node's value.
pub(crate) fn run_graph<V: Clone>(
    graph: &ModuleGraph,
    latent: &V,
    temb: &V,
    cond: &V,
    mut eval: impl FnMut(&ModuleNode, &[&V]) -> Result<V>,
) -> Result<V> {
    let mut values: Vec<Option<V>> = vec![None; graph.nodes.len()];
    for (i, node) in graph.nodes.iter().enumerate() {
        let inputs: Vec<&V> = graph
            .resolved_inputs(i)
            .iter()
            .map(|r| match r {
                ResolvedInput::Latent => latent,
                ResolvedInput::TimeEmbed => temb,
                ResolvedInput::Cond => cond,
                ResolvedInput::Node(j) => values[*j].as_ref().expect("topological order"),
            })
            .collect();
        let out = eval(node, &inputs)?;
        values[i] = Some(out);
    }
    Ok(values
        .last()
        .and_then(|v| v.as_ref())
        .expect("graph has nodes")
        .clone())
}

// ---------------------------------------------------------------------------
// Toy model generator
// ---------------------------------------------------------------------------

/// Fraction of conv output channels boosted to create activation outliers in
/// the decoder half, and the gain applied to them. Up-block features carry a
/// few strong channels so that shortcut, projection and resampling modules
/// face the outlier-heavy activations their full-scale counterparts see.
/// The per-channel normalization at the head of the next block re-damps the
/// boosted channels, so the boost shapes activation ranges without raising
/// the network's gain for carried perturbations.
const OUTLIER_CHANNEL_DIV: usize = 8;
const UP_OUTLIER_GAIN: f64 = 24.0;

struct GraphBuilder {
    seed: u64,
    counter: u64,
    nodes: Vec<ModuleNode>,
    blocks: Vec<BlockGroup>,
    current_block: Vec<String>,
}

impl GraphBuilder {
    fn next_stream(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        c
    }

    fn draw_weight(&mut self, shape: Vec<usize>, fan_in: usize, outlier_gain: f64) -> Tensor {
        let stream = self.next_stream();
        let mut w = normal_tensor(shape.clone(), self.seed, "weights", stream);
        let scale = 1.0 / (fan_in as f64).sqrt();
        for v in w.data_mut() {
            *v *= scale;
        }
        if outlier_gain != 1.0 {
            let out_channels = shape[0];
            let row_len: usize = shape[1..].iter().product();
            let count = (out_channels / OUTLIER_CHANNEL_DIV).max(1);
            let mut rng = derive_rng(self.seed, "outlier-channels", stream);
            let picks = rand::seq::index::sample(&mut rng, out_channels, count);
            let data = w.data_mut();
            for ch in picks.iter() {
                for v in &mut data[ch * row_len..(ch + 1) * row_len] {
                    *v *= outlier_gain;
                }
            }
        }
        w
    }

    fn push(&mut self, node: ModuleNode) -> String {
        let id = node.id.clone();
        self.current_block.push(id.clone());
        self.nodes.push(node);
        id
    }

    fn finish_block(&mut self, name: &str) {
        let position_index = self.blocks.len();
        let node_ids = std::mem::take(&mut self.current_block);
        self.blocks.push(BlockGroup {
            name: name.to_string(),
            position_index,
            node_ids,
        });
    }

    fn conv(
        &mut self,
        id: String,
        kind: NodeKind,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        input: &str,
        in_hw: (usize, usize),
        outlier_gain: f64,
    ) -> Result<(String, (usize, usize))> {
        let spec = ConvSpec::new(c_in, c_out, kernel, stride, padding)?;
        let oh = spec.out_extent(in_hw.0)?;
        let ow = spec.out_extent(in_hw.1)?;
        let weight = self.draw_weight(
            vec![c_out, c_in, kernel, kernel],
            c_in * kernel * kernel,
            outlier_gain,
        );
        let macs = (c_in * c_out * kernel * kernel * oh * ow) as u64;
        let attrs = OpAttrs::Conv { spec };
        let node = ModuleNode {
            id: id.clone(),
            kind,
            attrs,
            weight: Some(weight),
            bias: Some(Tensor::zeros(vec![c_out])),
            smoothing_scales: None,
            macs,
            nominal_input_numel: (c_in * in_hw.0 * in_hw.1) as u64,
            inputs: vec![input.to_string()],
        };
        Ok((self.push(node), (oh, ow)))
    }

    fn upsample_conv(
        &mut self,
        id: String,
        c: usize,
        input: &str,
        in_hw: (usize, usize),
        outlier_gain: f64,
    ) -> Result<(String, (usize, usize))> {
        let spec = ConvSpec::new(c, c, 3, 1, 1)?;
        let (oh, ow) = (in_hw.0 * 2, in_hw.1 * 2);
        let weight = self.draw_weight(vec![c, c, 3, 3], c * 9, outlier_gain);
        let macs = (c * c * 9 * oh * ow) as u64;
        let node = ModuleNode {
            id: id.clone(),
            kind: NodeKind::UpsampleConv,
            attrs: OpAttrs::UpsampleConv { spec },
            weight: Some(weight),
            bias: Some(Tensor::zeros(vec![c])),
            smoothing_scales: None,
            macs,
            nominal_input_numel: (c * in_hw.0 * in_hw.1) as u64,
            inputs: vec![input.to_string()],
        };
        Ok((self.push(node), (oh, ow)))
    }

    fn linear_node(
        &mut self,
        id: String,
        kind: NodeKind,
        d_in: usize,
        d_out: usize,
        input: &str,
    ) -> String {
        let weight = self.draw_weight(vec![d_out, d_in], d_in, 1.0);
        let node = ModuleNode {
            id,
            kind,
            attrs: OpAttrs::Linear,
            weight: Some(weight),
            bias: Some(Tensor::zeros(vec![d_out])),
            smoothing_scales: None,
            macs: (d_in * d_out) as u64,
            nominal_input_numel: d_in as u64,
            inputs: vec![input.to_string()],
        };
        self.push(node)
    }

    fn attention_projection(
        &mut self,
        id: String,
        c: usize,
        input: &str,
        hw: (usize, usize),
    ) -> String {
        let weight = self.draw_weight(vec![c, c], c, 1.0);
        let node = ModuleNode {
            id,
            kind: NodeKind::AttentionProjection,
            attrs: OpAttrs::TokenLinear,
            weight: Some(weight),
            bias: Some(Tensor::zeros(vec![c])),
            smoothing_scales: None,
            macs: (c * c * hw.0 * hw.1) as u64,
            nominal_input_numel: (c * hw.0 * hw.1) as u64,
            inputs: vec![input.to_string()],
        };
        self.push(node)
    }

    fn norm(&mut self, id: String, c: usize, input: &str) -> String {
        let node = ModuleNode {
            id,
            kind: NodeKind::Norm,
            attrs: OpAttrs::Norm {
                groups: c,
                eps: 1e-5,
                gamma: Tensor::full(vec![c], 1.0),
                beta: Tensor::zeros(vec![c]),
            },
            weight: None,
            bias: None,
            smoothing_scales: None,
            macs: 0,
            nominal_input_numel: 0,
            inputs: vec![input.to_string()],
        };
        self.push(node)
    }

    fn silu_node(&mut self, id: String, input: &str) -> String {
        let node = ModuleNode {
            id,
            kind: NodeKind::Activation,
            attrs: OpAttrs::Silu,
            weight: None,
            bias: None,
            smoothing_scales: None,
            macs: 0,
            nominal_input_numel: 0,
            inputs: vec![input.to_string()],
        };
        self.push(node)
    }

    fn combine_node(&mut self, id: String, mode: CombineMode, a: &str, b: &str) -> String {
        let node = ModuleNode {
            id,
            kind: NodeKind::Combine,
            attrs: OpAttrs::Combine { mode },
            weight: None,
            bias: None,
            smoothing_scales: None,
            macs: 0,
            nominal_input_numel: 0,
            inputs: vec![a.to_string(), b.to_string()],
        };
        self.push(node)
    }

    /// Residual unit + attention projection shared by every block: two
    /// 3x3 convolutions with timestep injection, an optional 1x1 shortcut
    /// when channels change, then a token projection with condition
    /// injection and residual add.
    #[allow(clippy::too_many_arguments)]
    fn block_body(
        &mut self,
        prefix: &str,
        input: String,
        c_in: usize,
        c_out: usize,
        hw: (usize, usize),
        temb_dim: usize,
        cond_dim: usize,
        conv_outlier_gain: f64,
    ) -> Result<String> {
        let n1 = self.norm(format!("{prefix}.resnets.0.norm1"), c_in, &input);
        let a1 = self.silu_node(format!("{prefix}.resnets.0.act1"), &n1);
        let (c1, hw1) = self.conv(
            format!("{prefix}.resnets.0.conv1"),
            NodeKind::Conv,
            c_in,
            c_out,
            3,
            1,
            1,
            &a1,
            hw,
            1.0,
        )?;
        let n2 = self.norm(format!("{prefix}.resnets.0.norm2"), c_out, &c1);
        let tproj = self.linear_node(
            format!("{prefix}.resnets.0.time_emb_proj"),
            NodeKind::Linear,
            temb_dim,
            c_out,
            INPUT_TIME_EMBED,
        );
        // injected after the norm so the per-channel shift survives it
        let tadd = self.combine_node(
            format!("{prefix}.resnets.0.add_time"),
            CombineMode::Add,
            &n2,
            &tproj,
        );
        let a2 = self.silu_node(format!("{prefix}.resnets.0.act2"), &tadd);
        let (c2, _) = self.conv(
            format!("{prefix}.resnets.0.conv2"),
            NodeKind::Conv,
            c_out,
            c_out,
            3,
            1,
            1,
            &a2,
            hw1,
            conv_outlier_gain,
        )?;
        let residual = if c_in != c_out {
            let (sc, _) = self.conv(
                format!("{prefix}.resnets.0.conv_shortcut"),
                NodeKind::ShortcutConv,
                c_in,
                c_out,
                1,
                1,
                0,
                &input,
                hw,
                1.0,
            )?;
            sc
        } else {
            input
        };
        let radd = self.combine_node(
            format!("{prefix}.resnets.0.add_residual"),
            CombineMode::Add,
            &c2,
            &residual,
        );
        let proj = self.attention_projection(
            format!("{prefix}.attentions.0.proj_out"),
            c_out,
            &radd,
            hw1,
        );
        let cproj = self.linear_node(
            format!("{prefix}.attentions.0.cond_proj"),
            NodeKind::Linear,
            cond_dim,
            c_out,
            INPUT_COND,
        );
        let cadd = self.combine_node(
            format!("{prefix}.attentions.0.add_cond"),
            CombineMode::Add,
            &proj,
            &cproj,
        );
        Ok(self.combine_node(
            format!("{prefix}.attentions.0.add_residual"),
            CombineMode::Add,
            &cadd,
            &radd,
        ))
    }
}

/// Deterministic toy UNet: `depth` down blocks, one mid block, `depth` up
/// blocks with skip connections from mirrored down blocks, plus input and
/// output convolutions. Channels double per down block starting at
/// `base_channels`; weights are seeded normal draws scaled by 1/sqrt(fan_in).
pub fn build_toy_unet(
    depth: usize,
    base_channels: usize,
    latent: [usize; 3],
    seed: u64,
) -> Result<ModuleGraph> {
    if depth < 2 {
        return Err(Error::invalid(format!("depth must be >= 2, got {depth}")));
    }
    if base_channels < 4 {
        return Err(Error::invalid(format!(
            "base_channels must be >= 4, got {base_channels}"
        )));
    }
    let [lc, lh, lw] = latent;
    let div = 1usize << depth;
    if lh == 0 || lw == 0 || lh % div != 0 || lw % div != 0 {
        return Err(Error::shape(
            "build_toy_unet",
            format!("latent {lh}x{lw} must be divisible by 2^depth = {div}"),
        ));
    }
    let temb_dim = 8;
    let cond_dim = 8;
    let input = InputSpec {
        latent_channels: lc,
        latent_height: lh,
        latent_width: lw,
        time_embed_dim: temb_dim,
        cond_dim,
    };

    let mut b = GraphBuilder {
        seed,
        counter: 0,
        nodes: Vec::new(),
        blocks: Vec::new(),
        current_block: Vec::new(),
    };

    // in_blocks
    let (conv_in, mut hw) = b.conv(
        "in_blocks.conv_in".to_string(),
        NodeKind::Conv,
        lc,
        base_channels,
        3,
        1,
        1,
        INPUT_LATENT,
        (lh, lw),
        1.0,
    )?;
    b.finish_block("in_blocks");

    // down path; remember each down block's output for the skip edges
    let mut skips: Vec<(String, usize, (usize, usize))> = Vec::new();
    let mut cur = conv_in;
    let mut c_in = base_channels;
    for i in 0..depth {
        let prefix = format!("down_blocks.{i}");
        let c_out = base_channels << (i + 1);
        let body = b.block_body(&prefix, cur, c_in, c_out, hw, temb_dim, cond_dim, 1.0)?;
        let (ds, ds_hw) = b.conv(
            format!("{prefix}.downsamplers.0.conv"),
            NodeKind::DownsampleConv,
            c_out,
            c_out,
            3,
            2,
            1,
            &body,
            hw,
            1.0,
        )?;
        b.finish_block(&prefix);
        skips.push((ds.clone(), c_out, ds_hw));
        cur = ds;
        c_in = c_out;
        hw = ds_hw;
    }

    // mid block
    cur = b.block_body("mid_block", cur, c_in, c_in, hw, temb_dim, cond_dim, 1.0)?;
    b.finish_block("mid_block");

    // up path
    for i in 0..depth {
        let prefix = format!("up_blocks.{i}");
        let (skip_id, skip_c, _) = skips[depth - 1 - i].clone();
        let cat = b.combine_node(
            format!("{prefix}.cat_skip"),
            CombineMode::ConcatChannels,
            &cur,
            &skip_id,
        );
        let c_cat = c_in + skip_c;
        let c_out = c_in / 2;
        let body = b.block_body(
            &prefix,
            cat,
            c_cat,
            c_out,
            hw,
            temb_dim,
            cond_dim,
            UP_OUTLIER_GAIN,
        )?;
        let upconv_gain = if i + 1 < depth { UP_OUTLIER_GAIN } else { 1.0 };
        let (up, up_hw) = b.upsample_conv(
            format!("{prefix}.upsamplers.0.conv"),
            c_out,
            &body,
            hw,
            upconv_gain,
        )?;
        b.finish_block(&prefix);
        cur = up;
        c_in = c_out;
        hw = up_hw;
    }

    // out_blocks
    let n_out = b.norm("out_blocks.norm_out".to_string(), c_in, &cur);
    let a_out = b.silu_node("out_blocks.act_out".to_string(), &n_out);
    let (_conv_out, _) = b.conv(
        "out_blocks.conv_out".to_string(),
        NodeKind::Conv,
        c_in,
        lc,
        3,
        1,
        1,
        &a_out,
        hw,
        1.0,
    )?;
    b.finish_block("out_blocks");

    ModuleGraph::from_parts(input, b.nodes, b.blocks)
}

//! Symmetric min-max fake quantization, numeric half-precision emulation,
//! calibration observers and the quantized executable graph.
//!
//! Quantize/de-quantize is `v_hat = s * clip(round(v/s), c_min, c_max)` with
//! round-half-to-even and symmetric clip bounds +/-(2^(bits-1) - 1). All
//! arithmetic stays in f64; integer and half precision are simulated.

use std::collections::BTreeMap;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::diffusion::{gen_calibration_batches, SchedulerConfig};
use crate::error::{Error, Result};
use crate::graph::{eval_node_with, run_graph, time_embedding, ModuleGraph, ModuleNode};
use crate::tensor::Tensor;

/// Scale used when a tensor's observed range is exactly zero.
pub const EPS_SCALE: f64 = 1e-8;

/// Largest finite half-precision magnitude; overflow saturates here.
pub const FP16_MAX: f64 = 65504.0;

/// Numeric formats a module can execute in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionFormat {
    Fp32,
    Fp16,
    Int8,
    Int4,
}

impl PrecisionFormat {
    pub fn bit_width(self) -> u32 {
        match self {
            PrecisionFormat::Fp32 => 32,
            PrecisionFormat::Fp16 => 16,
            PrecisionFormat::Int8 => 8,
            PrecisionFormat::Int4 => 4,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, PrecisionFormat::Int8 | PrecisionFormat::Int4)
    }

    pub fn integer_bits(self) -> Option<u8> {
        match self {
            PrecisionFormat::Int8 => Some(8),
            PrecisionFormat::Int4 => Some(4),
            _ => None,
        }
    }
}

impl std::fmt::Display for PrecisionFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PrecisionFormat::Fp32 => "fp32",
            PrecisionFormat::Fp16 => "fp16",
            PrecisionFormat::Int8 => "int8",
            PrecisionFormat::Int4 => "int4",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for PrecisionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fp32" | "32fp" | "32" | "f32" => Ok(PrecisionFormat::Fp32),
            "fp16" | "16fp" | "16" | "f16" => Ok(PrecisionFormat::Fp16),
            "int8" | "8" | "i8" => Ok(PrecisionFormat::Int8),
            "int4" | "4" | "i4" => Ok(PrecisionFormat::Int4),
            other => Err(Error::invalid(format!("unknown precision format `{other}`"))),
        }
    }
}

/// Scale granularity for integer quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per output channel (axis 0). Weights only.
    PerChannel,
}

/// Symmetric quantization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub granularity: Granularity,
    /// One entry for per-tensor, one per axis-0 slice for per-channel.
    pub scales: Vec<f64>,
}

impl QuantParams {
    pub fn c_max(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub fn c_min(&self) -> i64 {
        -self.c_max()
    }
}

fn scale_for(absmax: f64, c_max: i64) -> f64 {
    if absmax == 0.0 {
        EPS_SCALE
    } else {
        absmax / c_max as f64
    }
}

/// Min-max symmetric quantization parameters for a tensor.
pub fn minmax_params(values: &Tensor, bits: u8, granularity: Granularity) -> Result<QuantParams> {
    if values.numel() == 0 {
        return Err(Error::invalid("cannot calibrate an empty tensor"));
    }
    if bits != 4 && bits != 8 {
        return Err(Error::invalid(format!("unsupported bit width {bits}")));
    }
    if !values.is_finite() {
        return Err(Error::invalid("non-finite values in calibration input"));
    }
    let c_max = (1i64 << (bits - 1)) - 1;
    let scales = match granularity {
        Granularity::PerTensor => vec![scale_for(values.abs_max(), c_max)],
        Granularity::PerChannel => {
            let channels = values.shape()[0];
            let row_len = values.numel() / channels;
            (0..channels)
                .map(|ch| {
                    let row = &values.data()[ch * row_len..(ch + 1) * row_len];
                    let absmax = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    scale_for(absmax, c_max)
                })
                .collect()
        }
    };
    Ok(QuantParams {
        bits,
        granularity,
        scales,
    })
}

fn quantize_value(v: f64, scale: f64, c_min: f64, c_max: f64) -> f64 {
    scale * (v / scale).round_ties_even().clamp(c_min, c_max)
}

/// Quantize-dequantize each element under symmetric clipping.
pub fn fake_quantize(values: &Tensor, params: &QuantParams) -> Tensor {
    let c_max = params.c_max() as f64;
    let c_min = params.c_min() as f64;
    match params.granularity {
        Granularity::PerTensor => {
            let s = params.scales[0];
            values.map(|v| quantize_value(v, s, c_min, c_max))
        }
        Granularity::PerChannel => {
            let channels = params.scales.len();
            let row_len = values.numel() / channels;
            let mut out = values.clone();
            let data = out.data_mut();
            for ch in 0..channels {
                let s = params.scales[ch];
                for v in &mut data[ch * row_len..(ch + 1) * row_len] {
                    *v = quantize_value(*v, s, c_min, c_max);
                }
            }
            out
        }
    }
}

/// Round each value to the nearest representable half-precision value,
/// saturating overflow at +/-65504.
pub fn emulate_fp16(values: &Tensor) -> Tensor {
    values.map(|v| {
        let h = f16::from_f64(v).to_f64();
        if h.is_infinite() {
            FP16_MAX.copysign(v)
        } else {
            h
        }
    })
}

// ---------------------------------------------------------------------------
// Precision configuration
// ---------------------------------------------------------------------------

/// One pattern rule: exact node id or a `prefix.*` wildcard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRule {
    pub pattern: String,
    pub weight: PrecisionFormat,
    pub activation: PrecisionFormat,
}

impl ConfigRule {
    pub fn matches(&self, node_id: &str) -> bool {
        match self.pattern.strip_suffix('*') {
            Some(prefix) => node_id.starts_with(prefix),
            None => node_id == self.pattern,
        }
    }
}

/// Per-module precision assignment. Rules are evaluated in order; the last
/// matching rule wins, falling back to the default pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionConfig {
    pub default: (PrecisionFormat, PrecisionFormat),
    pub rules: Vec<ConfigRule>,
}

impl PrecisionConfig {
    pub fn all_fp32() -> Self {
        PrecisionConfig {
            default: (PrecisionFormat::Fp32, PrecisionFormat::Fp32),
            rules: Vec::new(),
        }
    }

    /// Same weight/activation pair on every parameterized node.
    pub fn homogeneous(weight: PrecisionFormat, activation: PrecisionFormat) -> Self {
        PrecisionConfig {
            default: (weight, activation),
            rules: Vec::new(),
        }
    }

    pub fn push_rule(
        &mut self,
        pattern: impl Into<String>,
        weight: PrecisionFormat,
        activation: PrecisionFormat,
    ) {
        self.rules.push(ConfigRule {
            pattern: pattern.into(),
            weight,
            activation,
        });
    }

    pub fn resolve(&self, node_id: &str) -> (PrecisionFormat, PrecisionFormat) {
        self.rules
            .iter()
            .rev()
            .find(|r| r.matches(node_id))
            .map(|r| (r.weight, r.activation))
            .unwrap_or(self.default)
    }
}

/// Parse a `"8w8a"` / `"4w8a"` style bit setting.
pub fn parse_bit_setting(s: &str) -> Result<(PrecisionFormat, PrecisionFormat)> {
    match s.trim().to_ascii_lowercase().as_str() {
        "8w8a" => Ok((PrecisionFormat::Int8, PrecisionFormat::Int8)),
        "4w8a" => Ok((PrecisionFormat::Int4, PrecisionFormat::Int8)),
        "fp16" => Ok((PrecisionFormat::Fp16, PrecisionFormat::Fp16)),
        "fp32" => Ok((PrecisionFormat::Fp32, PrecisionFormat::Fp32)),
        other => Err(Error::invalid(format!("unknown bit setting `{other}`"))),
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Observed activation statistics for one node input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub min: f64,
    pub max: f64,
    /// Per-input-channel absolute maxima, for smoothing.
    pub channel_absmax: Vec<f64>,
    pub samples: u64,
}

impl NodeStats {
    fn absorb(&mut self, other: &NodeStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        for (a, b) in self.channel_absmax.iter_mut().zip(&other.channel_absmax) {
            *a = a.max(*b);
        }
        self.samples += other.samples;
    }

    pub fn absmax(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

/// Activation ranges observed at every parameterized node input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub entries: BTreeMap<String, NodeStats>,
    /// Timesteps the table was collected at.
    pub steps: Vec<usize>,
    pub samples_per_step: usize,
}

fn stats_of(input: &Tensor) -> Result<NodeStats> {
    let (channels, row_layout) = match input.shape() {
        [n, c, h, w] => ((*c), Some((*n, *c, h * w))),
        [_, d] => ((*d), None),
        other => {
            return Err(Error::shape(
                "calibrate",
                format!("unsupported activation rank {other:?}"),
            ))
        }
    };
    let data = input.data();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in data {
        min = min.min(v);
        max = max.max(v);
    }
    let mut channel_absmax = vec![0.0f64; channels];
    match row_layout {
        Some((n, c, hw)) => {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let m = data[base..base + hw]
                        .iter()
                        .fold(0.0f64, |m, v| m.max(v.abs()));
                    channel_absmax[ci] = channel_absmax[ci].max(m);
                }
            }
        }
        None => {
            let n = data.len() / channels;
            for ni in 0..n {
                for j in 0..channels {
                    channel_absmax[j] = channel_absmax[j].max(data[ni * channels + j].abs());
                }
            }
        }
    }
    Ok(NodeStats {
        min,
        max,
        channel_absmax,
        samples: input.shape()[0] as u64,
    })
}

/// Run unconditional forwards at the requested timesteps and record running
/// min/max and per-channel absolute maxima at every parameterized node input.
pub fn calibrate(
    graph: &ModuleGraph,
    scheduler: &SchedulerConfig,
    steps: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<CalibrationTable> {
    if steps.is_empty() {
        return Err(Error::invalid("calibration step set is empty"));
    }
    if n_samples == 0 {
        return Err(Error::invalid("calibration needs at least one sample"));
    }
    let mut sorted: Vec<usize> = steps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &t in &sorted {
        if t < 1 || t > scheduler.t_max() {
            return Err(Error::invalid(format!(
                "calibration step {t} outside [1, {}]",
                scheduler.t_max()
            )));
        }
    }

    let mut entries: BTreeMap<String, NodeStats> = BTreeMap::new();
    let batches = gen_calibration_batches(
        scheduler,
        &sorted,
        n_samples,
        [
            graph.input.latent_channels,
            graph.input.latent_height,
            graph.input.latent_width,
        ],
        seed,
    )?;
    for batch in &batches {
        let cond = Tensor::zeros(vec![n_samples, graph.input.cond_dim]);
        let mut observer = |node: &ModuleNode, inputs: &[&Tensor], _out: &Tensor| {
            if !node.kind.is_parameterized() {
                return;
            }
            let stats = stats_of(inputs[0]).expect("parameterized inputs are 2D or 4D");
            entries
                .entry(node.id.clone())
                .and_modify(|e| e.absorb(&stats))
                .or_insert(stats);
        };
        graph.forward(&batch.z, batch.t, &cond, Some(&mut observer))?;
    }
    Ok(CalibrationTable {
        entries,
        steps: sorted,
        samples_per_step: n_samples,
    })
}

// ---------------------------------------------------------------------------
// Quantized graph
// ---------------------------------------------------------------------------

/// Resolved quantization state of one parameterized node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeQuantState {
    pub weight_format: PrecisionFormat,
    pub act_format: PrecisionFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_params: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_params: Option<QuantParams>,
    #[serde(skip)]
    q_weight: Option<Tensor>,
}

/// An executable graph with per-node precision states. The embedded graph
/// (including any smoothing scales) is immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGraph {
    graph: ModuleGraph,
    states: Vec<Option<NodeQuantState>>,
}

impl QuantizedGraph {
    pub fn graph(&self) -> &ModuleGraph {
        &self.graph
    }

    pub fn state_of(&self, node_idx: usize) -> Option<&NodeQuantState> {
        self.states[node_idx].as_ref()
    }

    pub fn states(&self) -> &[Option<NodeQuantState>] {
        &self.states
    }

    /// Effective (weight, activation) formats of a node.
    pub fn formats_of(&self, node_idx: usize) -> (PrecisionFormat, PrecisionFormat) {
        self.states[node_idx]
            .as_ref()
            .map(|s| (s.weight_format, s.act_format))
            .unwrap_or((PrecisionFormat::Fp32, PrecisionFormat::Fp32))
    }

    pub(crate) fn from_states(
        graph: ModuleGraph,
        mut states: Vec<Option<NodeQuantState>>,
    ) -> Result<Self> {
        if states.len() != graph.nodes.len() {
            return Err(Error::invalid("state list does not match node list"));
        }
        for (node, state) in graph.nodes.iter().zip(states.iter_mut()) {
            if let Some(state) = state {
                state.q_weight = transformed_weight(node, state)?;
            }
        }
        Ok(QuantizedGraph { graph, states })
    }

    /// Quantized-path forward pass.
    pub fn forward_q(
        &self,
        z: &Tensor,
        t: usize,
        cond: &Tensor,
        mut observer: Option<&mut dyn crate::graph::ForwardObserver>,
    ) -> Result<Tensor> {
        let temb = time_embedding(t, self.graph.input.time_embed_dim, z.shape()[0]);
        let mut idx = 0usize;
        run_graph(&self.graph, z, &temb, cond, |node, inputs| {
            let state = self.states[idx].as_ref();
            idx += 1;
            let out = eval_node_quantized(node, inputs, state)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs.observe(node, inputs, &out);
            }
            Ok(out)
        })
    }

    /// Full-precision forward pass on the embedded graph.
    pub fn forward_fp(
        &self,
        z: &Tensor,
        t: usize,
        cond: &Tensor,
        observer: Option<&mut dyn crate::graph::ForwardObserver>,
    ) -> Result<Tensor> {
        self.graph.forward(z, t, cond, observer)
    }
}

/// Evaluate one node under its quantization state.
pub(crate) fn eval_node_quantized(
    node: &ModuleNode,
    inputs: &[&Tensor],
    state: Option<&NodeQuantState>,
) -> Result<Tensor> {
    match state {
        None => crate::graph::eval_node_fp(node, inputs),
        Some(state) => {
            let weight = state.q_weight.as_ref().or(node.weight.as_ref());
            eval_node_with(node, inputs, weight, |x| match state.act_format {
                PrecisionFormat::Fp32 => Ok(x.clone()),
                PrecisionFormat::Fp16 => Ok(emulate_fp16(x)),
                PrecisionFormat::Int8 | PrecisionFormat::Int4 => {
                    let params = state.act_params.as_ref().ok_or_else(|| {
                        Error::MissingCalibration(node.id.clone())
                    })?;
                    Ok(fake_quantize(x, params))
                }
            })
        }
    }
}

fn transformed_weight(node: &ModuleNode, state: &NodeQuantState) -> Result<Option<Tensor>> {
    let weight = node
        .weight
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("node `{}` has no weight", node.id)))?;
    Ok(match state.weight_format {
        PrecisionFormat::Fp32 => None,
        PrecisionFormat::Fp16 => Some(emulate_fp16(weight)),
        PrecisionFormat::Int8 | PrecisionFormat::Int4 => {
            let params = state
                .weight_params
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("node `{}` lacks weight params", node.id)))?;
            Some(fake_quantize(weight, params))
        }
    })
}

/// Apply a precision configuration to a graph, producing an executable
/// quantized graph. Integer activation formats require calibration entries;
/// smoothed nodes additionally require per-channel statistics.
pub fn apply_config(
    graph: &ModuleGraph,
    config: &PrecisionConfig,
    table: &CalibrationTable,
) -> Result<QuantizedGraph> {
    apply_config_opts(graph, config, table, Granularity::PerTensor)
}

/// `apply_config` with an explicit weight-quantization granularity.
pub fn apply_config_opts(
    graph: &ModuleGraph,
    config: &PrecisionConfig,
    table: &CalibrationTable,
    weight_granularity: Granularity,
) -> Result<QuantizedGraph> {
    let mut states: Vec<Option<NodeQuantState>> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        if !node.kind.is_parameterized() {
            states.push(None);
            continue;
        }
        let (wf, af) = config.resolve(&node.id);
        let weight_params = match wf.integer_bits() {
            Some(bits) => {
                let weight = node
                    .weight
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("node `{}` has no weight", node.id)))?;
                Some(minmax_params(weight, bits, weight_granularity)?)
            }
            None => None,
        };
        let act_params = match af.integer_bits() {
            Some(bits) => {
                let stats = table
                    .entries
                    .get(&node.id)
                    .ok_or_else(|| Error::MissingCalibration(node.id.clone()))?;
                let absmax = match &node.smoothing_scales {
                    Some(scales) => {
                        if stats.channel_absmax.len() != scales.len() {
                            return Err(Error::MissingChannelStats(node.id.clone()));
                        }
                        stats
                            .channel_absmax
                            .iter()
                            .zip(scales)
                            .fold(0.0f64, |m, (a, s)| m.max(a / s))
                    }
                    None => stats.absmax(),
                };
                let c_max = (1i64 << (bits - 1)) - 1;
                Some(QuantParams {
                    bits,
                    granularity: Granularity::PerTensor,
                    scales: vec![scale_for(absmax, c_max)],
                })
            }
            None => None,
        };
        states.push(Some(NodeQuantState {
            weight_format: wf,
            act_format: af,
            weight_params,
            act_params,
            q_weight: None,
        }));
    }
    QuantizedGraph::from_states(graph.clone(), states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_toy_unet;
    use crate::rng::normal_tensor;
    use approx::assert_abs_diff_eq;

    #[test]
    fn minmax_scale_hand_values() {
        let t = Tensor::from_vec(vec![-1.0, 0.25, 0.5]);
        let p = minmax_params(&t, 8, Granularity::PerTensor).unwrap();
        assert_abs_diff_eq!(p.scales[0], 1.0 / 127.0);
        assert_eq!(p.c_max(), 127);
        assert_eq!(p.c_min(), -127);

        let exact = Tensor::from_vec(vec![-127.0, 13.0]);
        let p = minmax_params(&exact, 8, Granularity::PerTensor).unwrap();
        assert_eq!(p.scales[0], 1.0);
        let q = fake_quantize(&exact, &p);
        assert_eq!(q.data(), exact.data());
    }

    #[test]
    fn minmax_all_zero_uses_eps_scale() {
        let t = Tensor::zeros(vec![4]);
        let p = minmax_params(&t, 8, Granularity::PerTensor).unwrap();
        assert_eq!(p.scales[0], EPS_SCALE);
        let q = fake_quantize(&t, &p);
        assert!(q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_rejects_bad_input() {
        let t = Tensor::from_vec(vec![1.0]);
        assert!(minmax_params(&t, 5, Granularity::PerTensor).is_err());
    }

    #[test]
    fn per_channel_scales_follow_rows() {
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let p = minmax_params(&t, 8, Granularity::PerChannel).unwrap();
        assert_abs_diff_eq!(p.scales[0], 2.0 / 127.0);
        assert_abs_diff_eq!(p.scales[1], 0.5 / 127.0);
    }

    #[test]
    fn fake_quantize_hand_values() {
        let p = QuantParams {
            bits: 8,
            granularity: Granularity::PerTensor,
            scales: vec![1.0 / 127.0],
        };
        let v = Tensor::from_vec(vec![-1.0, 0.5, 1.0, 0.0]);
        let q = fake_quantize(&v, &p);
        assert_abs_diff_eq!(q.data()[0], -1.0);
        // 0.5 / (1/127) = 63.5 rounds to even 64
        assert_abs_diff_eq!(q.data()[1], 64.0 / 127.0);
        assert_abs_diff_eq!(q.data()[2], 1.0);
        assert_eq!(q.data()[3], 0.0);

        // out-of-range saturates at s * c_max
        let big = Tensor::from_vec(vec![10.0, -10.0]);
        let q = fake_quantize(&big, &p);
        assert_abs_diff_eq!(q.data()[0], 1.0);
        assert_abs_diff_eq!(q.data()[1], -1.0);
    }

    #[test]
    fn fake_quantize_is_idempotent() {
        let v = normal_tensor(vec![512], 3, "idem", 0);
        let p = minmax_params(&v, 8, Granularity::PerTensor).unwrap();
        let q1 = fake_quantize(&v, &p);
        let q2 = fake_quantize(&q1, &p);
        assert_eq!(q1, q2);
    }

    #[test]
    fn fp16_emulation_reference_points() {
        let v = Tensor::from_vec(vec![1.0, 2049.0, 70000.0, -70000.0, 0.0]);
        let h = emulate_fp16(&v);
        assert_eq!(h.data()[0], 1.0);
        assert_eq!(h.data()[1], 2048.0);
        assert_eq!(h.data()[2], FP16_MAX);
        assert_eq!(h.data()[3], -FP16_MAX);
        assert_eq!(h.data()[4], 0.0);
    }

    #[test]
    fn config_rules_resolve_last_match() {
        let mut cfg = PrecisionConfig::homogeneous(PrecisionFormat::Int8, PrecisionFormat::Int8);
        cfg.push_rule("up_blocks.*", PrecisionFormat::Fp16, PrecisionFormat::Fp16);
        cfg.push_rule(
            "up_blocks.0.resnets.0.conv1",
            PrecisionFormat::Fp32,
            PrecisionFormat::Fp32,
        );
        assert_eq!(
            cfg.resolve("down_blocks.0.resnets.0.conv1"),
            (PrecisionFormat::Int8, PrecisionFormat::Int8)
        );
        assert_eq!(
            cfg.resolve("up_blocks.1.attentions.0.proj_out"),
            (PrecisionFormat::Fp16, PrecisionFormat::Fp16)
        );
        assert_eq!(
            cfg.resolve("up_blocks.0.resnets.0.conv1"),
            (PrecisionFormat::Fp32, PrecisionFormat::Fp32)
        );
    }

    #[test]
    fn calibration_covers_all_parameterized_nodes() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 5).unwrap();
        let sched = SchedulerConfig::linear(5, 1e-4, 0.02).unwrap();
        let table = calibrate(&g, &sched, &[5], 2, 11).unwrap();
        for id in g.list_parameterized_modules() {
            let stats = table.entries.get(id).unwrap_or_else(|| panic!("missing {id}"));
            assert!(stats.max >= stats.min);
            assert!(stats.channel_absmax.iter().all(|&v| v >= 0.0));
            assert_eq!(stats.samples, 2);
        }
        assert_eq!(table.entries.len(), g.list_parameterized_modules().len());
    }

    #[test]
    fn calibration_rejects_empty_inputs() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 5).unwrap();
        let sched = SchedulerConfig::linear(5, 1e-4, 0.02).unwrap();
        assert!(calibrate(&g, &sched, &[], 2, 1).is_err());
        assert!(calibrate(&g, &sched, &[1], 0, 1).is_err());
        assert!(calibrate(&g, &sched, &[9], 2, 1).is_err());
    }

    #[test]
    fn single_step_ranges_contained_in_full_schedule() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 5).unwrap();
        let sched = SchedulerConfig::linear(5, 1e-4, 0.1).unwrap();
        let last = calibrate(&g, &sched, &[5], 4, 11).unwrap();
        let all = calibrate(&g, &sched, &[1, 2, 3, 4, 5], 4, 11).unwrap();
        for (id, stats) in &last.entries {
            let full = &all.entries[id];
            assert!(full.min <= stats.min, "{id} min not contained");
            assert!(full.max >= stats.max, "{id} max not contained");
        }
    }

    #[test]
    fn all_fp32_config_is_bit_exact() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 5).unwrap();
        let sched = SchedulerConfig::linear(3, 1e-4, 0.02).unwrap();
        let table = calibrate(&g, &sched, &[3], 2, 11).unwrap();
        let qg = apply_config(&g, &PrecisionConfig::all_fp32(), &table).unwrap();
        let z = normal_tensor(g.input.latent_shape(2), 9, "z", 0);
        let cond = Tensor::zeros(vec![2, g.input.cond_dim]);
        let fp = g.forward(&z, 2, &cond, None).unwrap();
        let q = qg.forward_q(&z, 2, &cond, None).unwrap();
        assert_eq!(fp, q);
    }

    #[test]
    fn single_linear_node_matches_hand_quantization() {
        // one linear evaluated through the quantized path vs explicit Eq-style
        // fake quantization of weight and activation
        let g = build_toy_unet(2, 4, [4, 8, 8], 5).unwrap();
        let id = "down_blocks.0.resnets.0.time_emb_proj";
        let node = g.node(id).unwrap().clone();
        let x = normal_tensor(vec![3, g.input.time_embed_dim], 21, "x", 0);

        let wp = minmax_params(node.weight.as_ref().unwrap(), 8, Granularity::PerTensor).unwrap();
        let ap = minmax_params(&x, 8, Granularity::PerTensor).unwrap();
        let state = NodeQuantState {
            weight_format: PrecisionFormat::Int8,
            act_format: PrecisionFormat::Int8,
            weight_params: Some(wp.clone()),
            act_params: Some(ap.clone()),
            q_weight: Some(fake_quantize(node.weight.as_ref().unwrap(), &wp)),
        };
        let got = eval_node_quantized(&node, &[&x], Some(&state)).unwrap();

        let expect = crate::tensor::linear(
            &fake_quantize(&x, &ap),
            &fake_quantize(node.weight.as_ref().unwrap(), &wp),
            node.bias.as_ref().unwrap(),
        )
        .unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn four_bit_weight_bounds() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 5).unwrap();
        let sched = SchedulerConfig::linear(3, 1e-4, 0.02).unwrap();
        let table = calibrate(&g, &sched, &[3], 2, 11).unwrap();
        let cfg = PrecisionConfig::homogeneous(PrecisionFormat::Int4, PrecisionFormat::Int8);
        let qg = apply_config(&g, &cfg, &table).unwrap();
        for (i, node) in qg.graph().nodes.iter().enumerate() {
            if node.kind.is_parameterized() {
                let state = qg.state_of(i).unwrap();
                assert_eq!(state.weight_params.as_ref().unwrap().c_max(), 7);
                assert_eq!(state.act_params.as_ref().unwrap().c_max(), 127);
            }
        }
    }

    #[test]
    fn missing_calibration_entry_names_node() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 5).unwrap();
        let table = CalibrationTable {
            entries: BTreeMap::new(),
            steps: vec![1],
            samples_per_step: 1,
        };
        let cfg = PrecisionConfig::homogeneous(PrecisionFormat::Int8, PrecisionFormat::Int8);
        let err = apply_config(&g, &cfg, &table).unwrap_err();
        assert!(err.to_string().contains("in_blocks.conv_in"));
    }
}

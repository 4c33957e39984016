//! Hybrid precision planning and operational accounting.
//!
//! A hybrid plan keeps every block strictly before the cut at the low
//! precision pair and runs the cut block and everything after it at fp16.
//! BOPs are `sum(macs * weight_bits * act_bits)` over parameterized nodes;
//! size is the weight-bit-width footprint of the parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModuleGraph;
use crate::quant::{PrecisionConfig, PrecisionFormat};

/// A global hybrid quantization plan with its accounting totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridPlan {
    /// Position of the first high-precision block; blocks before it run at
    /// the low pair. 0 means the whole model is fp16, B means homogeneous
    /// low precision.
    pub cut_block_index: usize,
    pub low: (PrecisionFormat, PrecisionFormat),
    pub high: (PrecisionFormat, PrecisionFormat),
    /// Per-block precision labels in block order.
    pub per_block: Vec<(String, String)>,
    pub config: PrecisionConfig,
    pub total_bops: u128,
    pub total_size_bytes: u64,
}

/// Build the hybrid plan for a cut position in 0..=block-count.
pub fn make_plan(
    graph: &ModuleGraph,
    cut: usize,
    low: (PrecisionFormat, PrecisionFormat),
) -> Result<HybridPlan> {
    let blocks = graph.list_blocks();
    if cut > blocks.len() {
        return Err(Error::invalid(format!(
            "cut {cut} outside 0..={}",
            blocks.len()
        )));
    }
    let high = (PrecisionFormat::Fp16, PrecisionFormat::Fp16);
    let mut config = PrecisionConfig::all_fp32();
    let mut per_block = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        let pair = if i < cut { low } else { high };
        config.push_rule(format!("{}.*", block.name), pair.0, pair.1);
        per_block.push((block.name.clone(), format!("{}/{}", pair.0, pair.1)));
    }
    // unlisted nodes would be fp32, but every block is covered
    config.default = high;
    let total_bops = bops(graph, &config)?;
    let total_size_bytes = model_size(graph, &config);
    Ok(HybridPlan {
        cut_block_index: cut,
        low,
        high,
        per_block,
        config,
        total_bops,
        total_size_bytes,
    })
}

/// Total bit operations of one forward pass under a precision config:
/// `sum(macs * bw * ba)` over parameterized nodes.
pub fn bops(graph: &ModuleGraph, config: &PrecisionConfig) -> Result<u128> {
    let mut total: u128 = 0;
    for node in &graph.nodes {
        if !node.kind.is_parameterized() {
            continue;
        }
        if node.macs == 0 {
            return Err(Error::invalid(format!(
                "parameterized node `{}` has no MAC count",
                node.id
            )));
        }
        let (wf, af) = config.resolve(&node.id);
        total += node.macs as u128 * wf.bit_width() as u128 * af.bit_width() as u128;
    }
    Ok(total)
}

/// Stored parameter footprint in bytes under a precision config: weights and
/// biases of each parameterized node at its weight bit width.
pub fn model_size(graph: &ModuleGraph, config: &PrecisionConfig) -> u64 {
    let mut total_bits: u64 = 0;
    for node in &graph.nodes {
        if !node.kind.is_parameterized() {
            continue;
        }
        let (wf, _) = config.resolve(&node.id);
        let count = node.weight.as_ref().map_or(0, |t| t.numel())
            + node.bias.as_ref().map_or(0, |t| t.numel());
        total_bits += count as u64 * wf.bit_width() as u64;
    }
    total_bits.div_ceil(8)
}

/// Count of smoothed nodes and the total per-sample element count of their
/// runtime pre-multiplies. These operations carry zero BOPs in the totals
/// but are reported so the smoothing trade-off stays visible.
pub fn smoothing_overhead(graph: &ModuleGraph) -> (usize, u64) {
    let mut nodes = 0usize;
    let mut elements = 0u64;
    for node in &graph.nodes {
        if node.smoothing_scales.is_some() {
            nodes += 1;
            elements += node.nominal_input_numel;
        }
    }
    (nodes, elements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_toy_unet;
    use crate::quant::{apply_config, calibrate};
    use crate::tensor::Tensor;

    fn toy() -> ModuleGraph {
        build_toy_unet(2, 4, [4, 8, 8], 3).unwrap()
    }

    #[test]
    fn bops_hand_formula_on_single_node() {
        let g = toy();
        let node = &g.node("in_blocks.conv_in").unwrap();
        let mut cfg = PrecisionConfig::all_fp32();
        cfg.push_rule(
            node.id.clone(),
            PrecisionFormat::Int8,
            PrecisionFormat::Int8,
        );
        let full_fp32 = bops(&g, &PrecisionConfig::all_fp32()).unwrap();
        let with_one = bops(&g, &cfg).unwrap();
        // the one int8 node shrinks by 16x relative to its fp32 share
        let node_fp32 = node.macs as u128 * 32 * 32;
        assert_eq!(with_one, full_fp32 - node_fp32 + node_fp32 / 16);
        assert_eq!(node_fp32 / 16, node.macs as u128 * 8 * 8);
    }

    #[test]
    fn homogeneous_bops_ratio_is_exact() {
        let g = toy();
        let fp32 = bops(&g, &PrecisionConfig::all_fp32()).unwrap();
        let int8 = bops(
            &g,
            &PrecisionConfig::homogeneous(PrecisionFormat::Int8, PrecisionFormat::Int8),
        )
        .unwrap();
        assert_eq!(fp32, int8 * 16);
        let b4w8a = bops(
            &g,
            &PrecisionConfig::homogeneous(PrecisionFormat::Int4, PrecisionFormat::Int8),
        )
        .unwrap();
        assert_eq!(fp32, b4w8a * 32);
    }

    #[test]
    fn size_counts_bit_widths() {
        let g = toy();
        let params: usize = g
            .nodes
            .iter()
            .filter(|n| n.kind.is_parameterized())
            .map(|n| n.weight.as_ref().unwrap().numel() + n.bias.as_ref().unwrap().numel())
            .sum();
        assert_eq!(
            model_size(&g, &PrecisionConfig::all_fp32()),
            (params * 4) as u64
        );
        assert_eq!(
            model_size(
                &g,
                &PrecisionConfig::homogeneous(PrecisionFormat::Int4, PrecisionFormat::Int8)
            ),
            (params as u64) / 2
        );
    }

    #[test]
    fn plan_boundaries() {
        let g = toy();
        let b = g.list_blocks().len();
        let low = (PrecisionFormat::Int8, PrecisionFormat::Int8);

        let all_fp16 = make_plan(&g, 0, low).unwrap();
        for (_, label) in &all_fp16.per_block {
            assert_eq!(label, "fp16/fp16");
        }
        let homogeneous = make_plan(&g, b, low).unwrap();
        for (_, label) in &homogeneous.per_block {
            assert_eq!(label, "int8/int8");
        }
        assert!(make_plan(&g, b + 1, low).is_err());
    }

    #[test]
    fn plan_splits_at_named_block() {
        let g = toy();
        // cut at up_blocks.0 (position 4): in, down.0, down.1, mid are low
        let plan = make_plan(&g, 4, (PrecisionFormat::Int8, PrecisionFormat::Int8)).unwrap();
        for node in &g.nodes {
            if !node.kind.is_parameterized() {
                continue;
            }
            let (wf, af) = plan.config.resolve(&node.id);
            let block = g.block_of(&node.id).unwrap();
            if block < 4 {
                assert_eq!((wf, af), (PrecisionFormat::Int8, PrecisionFormat::Int8));
            } else {
                assert_eq!((wf, af), (PrecisionFormat::Fp16, PrecisionFormat::Fp16));
            }
        }
    }

    #[test]
    fn earlier_cut_never_decreases_totals() {
        let g = toy();
        let low = (PrecisionFormat::Int8, PrecisionFormat::Int8);
        let mut prev: Option<HybridPlan> = None;
        for cut in (0..=g.list_blocks().len()).rev() {
            let plan = make_plan(&g, cut, low).unwrap();
            if let Some(p) = &prev {
                assert!(plan.total_bops >= p.total_bops);
                assert!(plan.total_size_bytes >= p.total_size_bytes);
            }
            prev = Some(plan);
        }
    }

    #[test]
    fn plan_config_applies_cleanly() {
        let g = toy();
        let sched = crate::diffusion::SchedulerConfig::linear(3, 1e-4, 0.05).unwrap();
        let table = calibrate(&g, &sched, &[3], 2, 7).unwrap();
        let plan = make_plan(&g, 4, (PrecisionFormat::Int8, PrecisionFormat::Int8)).unwrap();
        let qg = apply_config(&g, &plan.config, &table).unwrap();
        let z = Tensor::zeros(g.input.latent_shape(1));
        let cond = Tensor::zeros(vec![1, g.input.cond_dim]);
        // executable end to end
        qg.forward_q(&z.map(|_| 0.1), 1, &cond, None).unwrap();
    }

    #[test]
    fn hand_summed_three_node_reference() {
        // three parameterized nodes with known macs under a mixed config
        let g = toy();
        let ids = ["in_blocks.conv_in", "mid_block.resnets.0.conv1", "out_blocks.conv_out"];
        let macs: Vec<u128> = ids
            .iter()
            .map(|id| g.node(id).unwrap().macs as u128)
            .collect();
        let mut cfg = PrecisionConfig::all_fp32();
        cfg.push_rule(ids[0], PrecisionFormat::Int8, PrecisionFormat::Int8);
        cfg.push_rule(ids[1], PrecisionFormat::Int4, PrecisionFormat::Int8);
        cfg.push_rule(ids[2], PrecisionFormat::Fp16, PrecisionFormat::Fp16);

        let rest: u128 = g
            .nodes
            .iter()
            .filter(|n| n.kind.is_parameterized() && !ids.contains(&n.id.as_str()))
            .map(|n| n.macs as u128 * 32 * 32)
            .sum();
        let expect = rest + macs[0] * 64 + macs[1] * 32 + macs[2] * 256;
        assert_eq!(bops(&g, &cfg).unwrap(), expect);
    }
}

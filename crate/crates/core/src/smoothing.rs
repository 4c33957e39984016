//! Per-channel activation smoothing for sensitive modules.
//!
//! Outlier channels stretch the per-tensor activation range and ruin min-max
//! quantization. The migration scale `s_j = max|Z_j|^alpha / max|W_j|^(1-alpha)`
//! moves part of that burden into the weights: the node divides its
//! activation by `s` at runtime and carries `diag(s) * W` as its weight, so
//! the full-precision output is unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModuleGraph, ModuleNode, OpAttrs};
use crate::quant::{CalibrationTable, EPS_SCALE};

/// Migration scales for one node's input channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingScales {
    pub node_id: String,
    pub alpha: f64,
    pub scales: Vec<f64>,
}

/// Compute migration scales from per-channel activation and weight absolute
/// maxima. Zero entries are clamped to [`EPS_SCALE`] before exponentiation.
pub fn compute_scales(
    node_id: &str,
    act_absmax: &[f64],
    weight_absmax: &[f64],
    alpha: f64,
) -> Result<SmoothingScales> {
    if act_absmax.len() != weight_absmax.len() {
        return Err(Error::shape(
            "compute_scales",
            format!(
                "{} activation channels vs {} weight channels",
                act_absmax.len(),
                weight_absmax.len()
            ),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if act_absmax.iter().chain(weight_absmax).any(|&v| v < 0.0) {
        return Err(Error::invalid("absolute maxima must be non-negative"));
    }
    let scales = act_absmax
        .iter()
        .zip(weight_absmax)
        .map(|(&z, &w)| z.max(EPS_SCALE).powf(alpha) / w.max(EPS_SCALE).powf(1.0 - alpha))
        .collect();
    Ok(SmoothingScales {
        node_id: node_id.to_string(),
        alpha,
        scales,
    })
}

/// Per-input-channel absolute maxima of a parameterized node's weight.
pub fn weight_channel_absmax(node: &ModuleNode) -> Result<Vec<f64>> {
    let weight = node
        .weight
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("node `{}` has no weight", node.id)))?;
    match weight.shape() {
        // conv kernels [C_out, C_in, k, k]: input channel is axis 1
        &[c_out, c_in, kh, kw] => {
            let mut absmax = vec![0.0f64; c_in];
            let data = weight.data();
            let kk = kh * kw;
            for oc in 0..c_out {
                for ic in 0..c_in {
                    let base = (oc * c_in + ic) * kk;
                    for &v in &data[base..base + kk] {
                        absmax[ic] = absmax[ic].max(v.abs());
                    }
                }
            }
            Ok(absmax)
        }
        // linear weights [D_out, D_in]: input channel is the column
        &[d_out, d_in] => {
            let mut absmax = vec![0.0f64; d_in];
            let data = weight.data();
            for o in 0..d_out {
                for i in 0..d_in {
                    absmax[i] = absmax[i].max(data[o * d_in + i].abs());
                }
            }
            Ok(absmax)
        }
        other => Err(Error::shape(
            "weight_channel_absmax",
            format!("unsupported weight rank {other:?}"),
        )),
    }
}

fn scale_weight_input_channels(node: &mut ModuleNode, scales: &[f64]) -> Result<()> {
    let weight = node
        .weight
        .as_mut()
        .ok_or_else(|| Error::invalid(format!("node `{}` has no weight", node.id)))?;
    match weight.shape().to_vec().as_slice() {
        &[c_out, c_in, kh, kw] => {
            if c_in != scales.len() {
                return Err(Error::shape(
                    "apply_smoothing",
                    format!("{} scales for {c_in} input channels", scales.len()),
                ));
            }
            let kk = kh * kw;
            let data = weight.data_mut();
            for oc in 0..c_out {
                for ic in 0..c_in {
                    let base = (oc * c_in + ic) * kk;
                    for v in &mut data[base..base + kk] {
                        *v *= scales[ic];
                    }
                }
            }
        }
        &[d_out, d_in] => {
            if d_in != scales.len() {
                return Err(Error::shape(
                    "apply_smoothing",
                    format!("{} scales for {d_in} input columns", scales.len()),
                ));
            }
            let data = weight.data_mut();
            for o in 0..d_out {
                for i in 0..d_in {
                    data[o * d_in + i] *= scales[i];
                }
            }
        }
        other => {
            return Err(Error::shape(
                "apply_smoothing",
                format!("unsupported weight rank {other:?}"),
            ))
        }
    }
    Ok(())
}

/// Fuse `diag(s)` into the node's weight along the input-channel axis and
/// register the runtime 1/s pre-multiply. The full-precision output of the
/// node is unchanged up to rounding. Repeated smoothing composes.
pub fn apply_smoothing(node: &mut ModuleNode, scales: &SmoothingScales) -> Result<()> {
    if !node.kind.is_parameterized() {
        return Err(Error::invalid(format!(
            "cannot smooth `{}`: kind is not a conv/linear/projection module",
            node.id
        )));
    }
    if matches!(node.attrs, OpAttrs::Norm { .. } | OpAttrs::Silu | OpAttrs::Combine { .. }) {
        return Err(Error::invalid(format!(
            "cannot smooth `{}`: node has no weight kernel",
            node.id
        )));
    }
    if scales.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("smoothing scales must be positive and finite"));
    }
    scale_weight_input_channels(node, &scales.scales)?;
    match &mut node.smoothing_scales {
        Some(existing) => {
            if existing.len() != scales.scales.len() {
                return Err(Error::shape(
                    "apply_smoothing",
                    format!(
                        "{} new scales for {} existing",
                        scales.scales.len(),
                        existing.len()
                    ),
                ));
            }
            for (e, s) in existing.iter_mut().zip(&scales.scales) {
                *e *= s;
            }
        }
        None => node.smoothing_scales = Some(scales.scales.clone()),
    }
    Ok(())
}

/// Smooth the selected nodes of a graph using per-channel activation maxima
/// from the calibration table; every other node is untouched.
pub fn smooth_selected(
    graph: &ModuleGraph,
    selected: &[String],
    table: &CalibrationTable,
    alpha: f64,
) -> Result<ModuleGraph> {
    let mut out = graph.clone();
    for id in selected {
        let idx = out
            .node_index(id)
            .ok_or_else(|| Error::UnknownNode(id.clone()))?;
        let stats = table
            .entries
            .get(id)
            .ok_or_else(|| Error::MissingChannelStats(id.clone()))?;
        let node = &mut out.nodes[idx];
        let w_absmax = weight_channel_absmax(node)?;
        if stats.channel_absmax.len() != w_absmax.len() {
            return Err(Error::MissingChannelStats(id.clone()));
        }
        let scales = compute_scales(id, &stats.channel_absmax, &w_absmax, alpha)?;
        apply_smoothing(node, &scales)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SchedulerConfig;
    use crate::graph::build_toy_unet;
    use crate::quant::calibrate;
    use crate::rng::normal_tensor;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scales_hand_values() {
        let s = compute_scales("n", &[4.0], &[1.0], 0.5).unwrap();
        assert_abs_diff_eq!(s.scales[0], 2.0);

        // alpha = 1 reduces to the activation maxima
        let s = compute_scales("n", &[4.0, 0.5], &[9.0, 2.0], 1.0).unwrap();
        assert_eq!(s.scales, vec![4.0, 0.5]);

        // equal maxima c give c^(2a-1); identity at alpha = 0.5
        let c = 3.0f64;
        let s = compute_scales("n", &[c, c], &[c, c], 0.5).unwrap();
        assert_abs_diff_eq!(s.scales[0], 1.0, epsilon = 1e-12);
        let s = compute_scales("n", &[c, c], &[c, c], 0.8).unwrap();
        assert_abs_diff_eq!(s.scales[0], c.powf(0.6), epsilon = 1e-12);
    }

    #[test]
    fn scales_are_covariant_in_activation_maxima() {
        let base = compute_scales("n", &[1.0, 3.0, 0.2], &[0.5, 0.5, 0.5], 1.0).unwrap();
        let doubled = compute_scales("n", &[2.0, 6.0, 0.4], &[0.5, 0.5, 0.5], 1.0).unwrap();
        for (b, d) in base.scales.iter().zip(&doubled.scales) {
            assert_abs_diff_eq!(2.0 * b, *d, epsilon = 1e-12);
        }
    }

    #[test]
    fn scales_reject_bad_input() {
        assert!(compute_scales("n", &[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(compute_scales("n", &[1.0], &[1.0], 1.5).is_err());
        assert!(compute_scales("n", &[-1.0], &[1.0], 0.5).is_err());
        // zero entries are clamped, not rejected
        let s = compute_scales("n", &[0.0], &[0.0], 0.5).unwrap();
        assert!(s.scales[0] > 0.0);
    }

    #[test]
    fn identity_scales_leave_node_bit_identical() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 2).unwrap();
        let mut node = g.node("mid_block.attentions.0.proj_out").unwrap().clone();
        let before = node.clone();
        let ones = SmoothingScales {
            node_id: node.id.clone(),
            alpha: 0.7,
            scales: vec![1.0; weight_channel_absmax(&node).unwrap().len()],
        };
        apply_smoothing(&mut node, &ones).unwrap();
        assert_eq!(node.weight, before.weight);
        assert_eq!(node.macs, before.macs);
        // the pre-multiply by 1.0 is registered but numerically inert
        assert_eq!(node.smoothing_scales, Some(ones.scales));
    }

    #[test]
    fn smoothing_preserves_full_precision_output() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 4).unwrap();
        for id in ["mid_block.resnets.0.conv1", "mid_block.attentions.0.proj_out"] {
            let node = g.node(id).unwrap().clone();
            let mut smoothed = node.clone();
            let w_absmax = weight_channel_absmax(&node).unwrap();
            let act_absmax: Vec<f64> = (0..w_absmax.len())
                .map(|i| 0.5 + i as f64)
                .collect();
            let scales = compute_scales(id, &act_absmax, &w_absmax, 0.7).unwrap();
            apply_smoothing(&mut smoothed, &scales).unwrap();

            let c_in = w_absmax.len();
            let x = match node.attrs {
                OpAttrs::TokenLinear => normal_tensor(vec![2, c_in, 4, 4], 5, "x", 1),
                _ => normal_tensor(vec![2, c_in, 4, 4], 5, "x", 1),
            };
            let before = crate::graph::eval_node_fp(&node, &[&x]).unwrap();
            let after = crate::graph::eval_node_fp(&smoothed, &[&x]).unwrap();
            let num: f64 = before
                .data()
                .iter()
                .zip(after.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = before.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num / den <= 1e-10, "{id}: relative error {}", num / den);
        }
    }

    #[test]
    fn outlier_channels_are_equalized() {
        // one activation channel 100x larger than the rest
        let act_absmax = vec![1.0, 100.0, 0.8, 1.2];
        let w_absmax = vec![0.5, 0.5, 0.5, 0.5];
        let s = compute_scales("n", &act_absmax, &w_absmax, 0.7).unwrap();
        let smoothed: Vec<f64> = act_absmax
            .iter()
            .zip(&s.scales)
            .map(|(a, s)| a / s)
            .collect();
        let ratio = |v: &[f64]| {
            let max = v.iter().cloned().fold(f64::MIN, f64::max);
            let min = v.iter().cloned().fold(f64::MAX, f64::min);
            max / min
        };
        assert!(ratio(&smoothed) < ratio(&act_absmax));
    }

    #[test]
    fn smooth_selected_touches_only_selection() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 6).unwrap();
        let sched = SchedulerConfig::linear(3, 1e-4, 0.05).unwrap();
        let table = calibrate(&g, &sched, &[3], 2, 8).unwrap();

        let empty = smooth_selected(&g, &[], &table, 0.7).unwrap();
        assert_eq!(empty, g);

        let pick = vec!["up_blocks.0.attentions.0.proj_out".to_string()];
        let smoothed = smooth_selected(&g, &pick, &table, 0.7).unwrap();
        let mut changed = 0;
        for (a, b) in g.nodes.iter().zip(&smoothed.nodes) {
            if a != b {
                changed += 1;
                assert_eq!(a.id, pick[0]);
                assert_eq!(a.macs, b.macs);
                assert!(b.smoothing_scales.is_some());
            }
        }
        assert_eq!(changed, 1);
        // topology and ids intact
        assert_eq!(
            g.list_parameterized_modules(),
            smoothed.list_parameterized_modules()
        );
    }

    #[test]
    fn smooth_selected_requires_channel_stats() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 6).unwrap();
        let table = CalibrationTable {
            entries: Default::default(),
            steps: vec![1],
            samples_per_step: 1,
        };
        let pick = vec!["mid_block.resnets.0.conv1".to_string()];
        assert!(smooth_selected(&g, &pick, &table, 0.7).is_err());
    }

    #[test]
    fn smoothing_rejects_passive_nodes() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 6).unwrap();
        let mut node = g.node("mid_block.resnets.0.norm1").unwrap().clone();
        let s = SmoothingScales {
            node_id: node.id.clone(),
            alpha: 0.7,
            scales: vec![1.0; 16],
        };
        assert!(apply_smoothing(&mut node, &s).is_err());
    }
}

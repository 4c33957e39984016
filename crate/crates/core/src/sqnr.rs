//! Relative quantization noise measurement.
//!
//! SQNR between the full-precision and quantized value of a tensor is the
//! per-batch-element ratio 20*log10(|fp| / |fp - q|), averaged over the
//! batch. A dual-path executor evaluates both states of every node in a
//! single graph walk so per-module scores and the output score come from
//! one forward pass; the quantized and full-precision streams never mix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ancestral_update, duplicate_batch, guided_eps, split_halves, stacked_cond_rows,
    SchedulerConfig,
};
use crate::error::{Error, Result};
use crate::graph::{eval_node_fp, run_graph, time_embedding, ModuleGraph};
use crate::quant::{eval_node_quantized, QuantizedGraph};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// Finite sentinel for zero quantization noise, in decibels.
pub const CAP_DB: f64 = 200.0;

/// Samples evaluated per reverse-loop pass; larger requests are split into
/// fixed-size chunks, which leaves every result bit-identical.
const CHUNK_SAMPLES: usize = 32;

fn element_db(ps: f64, pn: f64) -> f64 {
    if pn == 0.0 {
        return CAP_DB;
    }
    if ps == 0.0 {
        return -CAP_DB;
    }
    (20.0 * (ps / pn).log10()).clamp(-CAP_DB, CAP_DB)
}

fn per_element_dbs(fp: &Tensor, q: &Tensor) -> Result<Vec<f64>> {
    if fp.shape() != q.shape() {
        return Err(Error::shape(
            "sqnr",
            format!("fp {:?} vs q {:?}", fp.shape(), q.shape()),
        ));
    }
    let n = fp.shape()[0];
    let stride = fp.numel() / n;
    let mut dbs = Vec::with_capacity(n);
    for i in 0..n {
        let a = &fp.data()[i * stride..(i + 1) * stride];
        let b = &q.data()[i * stride..(i + 1) * stride];
        let mut ps = 0.0;
        let mut pn = 0.0;
        for (x, y) in a.iter().zip(b) {
            ps += x * x;
            let d = x - y;
            pn += d * d;
        }
        dbs.push(element_db(ps.sqrt(), pn.sqrt()));
    }
    Ok(dbs)
}

/// Batch-mean SQNR in decibels between a full-precision tensor and its
/// quantized counterpart. Capped at [`CAP_DB`] when the noise is zero.
pub fn sqnr_db(fp: &Tensor, q: &Tensor) -> Result<f64> {
    if fp.data().iter().all(|&v| v == 0.0) {
        return Err(Error::invalid(
            "SQNR undefined: full-precision signal is all zero",
        ));
    }
    let dbs = per_element_dbs(fp, q)?;
    Ok(dbs.iter().sum::<f64>() / dbs.len() as f64)
}

/// Per-module SQNR observation at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqnrRecord {
    pub node_id: String,
    pub t: usize,
    pub sqnr_db: f64,
    pub sample_count: u64,
}

/// All SQNR records of an evaluation run plus the output-level score per
/// timestep and its time average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTrace {
    pub records: Vec<SqnrRecord>,
    /// Output SQNR indexed by timestep, ascending t = 1..=T.
    pub output_sqnr_per_t: Vec<f64>,
    pub output_avg_db: f64,
}

impl SensitivityTrace {
    /// Time-averaged SQNR per module, in record order of first appearance.
    pub fn per_module_average(&self) -> Vec<(String, f64)> {
        let mut order: Vec<String> = Vec::new();
        let mut acc: BTreeMap<String, (f64, u64)> = BTreeMap::new();
        for r in &self.records {
            if !acc.contains_key(&r.node_id) {
                order.push(r.node_id.clone());
            }
            let e = acc.entry(r.node_id.clone()).or_insert((0.0, 0));
            e.0 += r.sqnr_db;
            e.1 += 1;
        }
        order
            .into_iter()
            .map(|id| {
                let (sum, n) = acc[&id];
                (id, sum / n as f64)
            })
            .collect()
    }

    /// SQNR of a module at one timestep, if recorded.
    pub fn module_at(&self, node_id: &str, t: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.node_id == node_id && r.t == t)
            .map(|r| r.sqnr_db)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct DbAccum {
    sum: f64,
    count: u64,
}

impl DbAccum {
    fn add(&mut self, dbs: &[f64]) {
        for &d in dbs {
            self.sum += d;
        }
        self.count += dbs.len() as u64;
    }

    fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

/// Accumulates per-node and output-level SQNR observations across chunks
/// and steps. The final trace is independent of chunking because per-element
/// scores are summed in batch order and averaged once at the end.
#[derive(Debug, Default)]
pub struct TraceBuilder {
    node_acc: BTreeMap<(usize, usize), DbAccum>,
    output_acc: BTreeMap<usize, DbAccum>,
}

impl TraceBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn record_node(&mut self, node_idx: usize, t: usize, fp: &Tensor, q: &Tensor) -> Result<()> {
        let dbs = per_element_dbs(fp, q)?;
        self.node_acc.entry((node_idx, t)).or_default().add(&dbs);
        Ok(())
    }

    pub fn record_output(&mut self, t: usize, fp: &Tensor, q: &Tensor) -> Result<()> {
        let dbs = per_element_dbs(fp, q)?;
        self.output_acc.entry(t).or_default().add(&dbs);
        Ok(())
    }

    pub fn finish(self, graph: &ModuleGraph) -> SensitivityTrace {
        let mut records: Vec<SqnrRecord> = self
            .node_acc
            .into_iter()
            .map(|((node_idx, t), acc)| SqnrRecord {
                node_id: graph.nodes[node_idx].id.clone(),
                t,
                sqnr_db: acc.mean(),
                sample_count: acc.count,
            })
            .collect();
        // node execution order outer, timestep ascending inner
        let index_of = |id: &str| graph.node_index(id).unwrap_or(usize::MAX);
        records.sort_by(|a, b| {
            index_of(&a.node_id)
                .cmp(&index_of(&b.node_id))
                .then(a.t.cmp(&b.t))
        });
        let output_sqnr_per_t: Vec<f64> = self.output_acc.values().map(DbAccum::mean).collect();
        let output_avg_db = if output_sqnr_per_t.is_empty() {
            f64::NAN
        } else {
            output_sqnr_per_t.iter().sum::<f64>() / output_sqnr_per_t.len() as f64
        };
        SensitivityTrace {
            records,
            output_sqnr_per_t,
            output_avg_db,
        }
    }
}

/// A latent carried through both execution states.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    pub fp: Tensor,
    pub q: Tensor,
}

impl DualTensor {
    /// Both states start from the same tensor.
    pub fn splat(t: Tensor) -> Self {
        DualTensor {
            fp: t.clone(),
            q: t,
        }
    }
}

/// Single-pass dual-state forward: every node evaluates its full-precision
/// state on the full-precision stream and its quantized state on the
/// quantized stream. One SQNR record per parameterized node is appended to
/// the builder; the output pair is returned unmixed.
pub fn dual_path_forward(
    qgraph: &QuantizedGraph,
    z: &DualTensor,
    t: usize,
    cond: &Tensor,
    trace: &mut TraceBuilder,
) -> Result<DualTensor> {
    let graph = qgraph.graph();
    let temb = time_embedding(t, graph.input.time_embed_dim, z.fp.shape()[0]);
    let temb = DualTensor::splat(temb);
    let cond = DualTensor::splat(cond.clone());
    let mut idx = 0usize;
    let mut record_err: Option<Error> = None;
    let out = run_graph(graph, z, &temb, &cond, |node, inputs| {
        let fp_inputs: Vec<&Tensor> = inputs.iter().map(|d| &d.fp).collect();
        let q_inputs: Vec<&Tensor> = inputs.iter().map(|d| &d.q).collect();
        let state = qgraph.state_of(idx);
        let fp_out = eval_node_fp(node, &fp_inputs)?;
        let q_out = eval_node_quantized(node, &q_inputs, state)?;
        if node.kind.is_parameterized() && record_err.is_none() {
            if let Err(e) = trace.record_node(idx, t, &fp_out, &q_out) {
                record_err = Some(e);
            }
        }
        idx += 1;
        Ok(DualTensor {
            fp: fp_out,
            q: q_out,
        })
    })?;
    if let Some(e) = record_err {
        return Err(e);
    }
    Ok(out)
}

fn stack_rows(rows: &[Tensor]) -> Tensor {
    let inner = rows[0].shape().to_vec();
    let mut shape = Vec::with_capacity(inner.len() + 1);
    shape.push(rows.len());
    shape.extend_from_slice(&inner);
    let mut data = Vec::with_capacity(rows.len() * rows[0].numel());
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(shape, data).expect("uniform rows")
}

fn chunk_init_latent(input: [usize; 3], seed: u64, sample_range: std::ops::Range<usize>) -> Tensor {
    let rows: Vec<Tensor> = sample_range
        .map(|i| normal_tensor(vec![input[0], input[1], input[2]], seed, "eval-init", i as u64))
        .collect();
    stack_rows(&rows)
}

fn chunk_step_noise(
    input: [usize; 3],
    seed: u64,
    t_max: usize,
    t: usize,
    sample_range: std::ops::Range<usize>,
) -> Tensor {
    let rows: Vec<Tensor> = sample_range
        .map(|i| {
            let index = (i * (t_max + 1) + t) as u64;
            normal_tensor(vec![input[0], input[1], input[2]], seed, "eval-noise", index)
        })
        .collect();
    stack_rows(&rows)
}

/// Run the full reverse loop with dual execution states, collecting output
/// SQNR at every step and one record per parameterized node per step.
/// Guidance blends conditional and unconditional halves per path; the
/// ancestral noise draws are shared between the two states of each sample.
pub fn time_averaged_output_sqnr(
    qgraph: &QuantizedGraph,
    scheduler: &SchedulerConfig,
    guidance: f64,
    cond: &Tensor,
    n_samples: usize,
    seed: u64,
) -> Result<SensitivityTrace> {
    if n_samples == 0 {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let graph = qgraph.graph();
    let latent = [
        graph.input.latent_channels,
        graph.input.latent_height,
        graph.input.latent_width,
    ];
    let t_max = scheduler.t_max();
    let mut trace = TraceBuilder::new();

    let mut start = 0usize;
    while start < n_samples {
        let end = (start + CHUNK_SAMPLES).min(n_samples);
        let k = end - start;
        let init = chunk_init_latent(latent, seed, start..end);
        let mut z = DualTensor::splat(init);
        let cond_rows = stacked_cond_rows(cond, k)?;
        for t in (1..=t_max).rev() {
            let stacked = DualTensor {
                fp: duplicate_batch(&z.fp)?,
                q: duplicate_batch(&z.q)?,
            };
            let out = dual_path_forward(qgraph, &stacked, t, &cond_rows, &mut trace)?;
            trace.record_output(t, &out.fp, &out.q)?;

            let (c_fp, u_fp) = split_halves(&out.fp)?;
            let (c_q, u_q) = split_halves(&out.q)?;
            let eps_fp = guided_eps(&c_fp, &u_fp, guidance);
            let eps_q = guided_eps(&c_q, &u_q, guidance);
            let noise = if t > 1 {
                Some(chunk_step_noise(latent, seed, t_max, t, start..end))
            } else {
                None
            };
            z = DualTensor {
                fp: ancestral_update(scheduler, &z.fp, &eps_fp, t, noise.as_ref())?,
                q: ancestral_update(scheduler, &z.q, &eps_q, t, noise.as_ref())?,
            };
        }
        start = end;
    }
    Ok(trace.finish(graph))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_toy_unet, ModuleNode};
    use crate::quant::{apply_config, calibrate, parse_bit_setting, PrecisionConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn sqnr_reference_points() {
        let fp = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(sqnr_db(&fp, &fp).unwrap(), CAP_DB);

        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let zero = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert_abs_diff_eq!(sqnr_db(&one, &zero).unwrap(), 0.0);

        let q = Tensor::new(vec![1, 2], vec![1.1, 0.0]).unwrap();
        assert_abs_diff_eq!(sqnr_db(&fp, &q).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn sqnr_rejects_all_zero_signal() {
        let zero = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.1, 0.0]).unwrap();
        assert!(sqnr_db(&zero, &q).is_err());
    }

    #[test]
    fn sqnr_is_scale_invariant() {
        let fp = normal_tensor(vec![4, 32], 3, "fp", 0);
        let q = fp.map(|v| v + 0.01 * v.sin());
        let base = sqnr_db(&fp, &q).unwrap();
        for a in [2.0, -3.5, 1e6, 1e-6] {
            let s = sqnr_db(&fp.map(|v| a * v), &q.map(|v| a * v)).unwrap();
            assert!((s - base).abs() < 1e-9, "a={a}: {s} vs {base}");
        }
    }

    #[test]
    fn sqnr_is_batch_mean_of_element_scores() {
        let fp = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let q = Tensor::new(vec![2, 1], vec![0.9, 0.0]).unwrap();
        // element scores: 20*log10(1/0.1) = 20 and 20*log10(1/1) = 0
        assert_abs_diff_eq!(sqnr_db(&fp, &q).unwrap(), 10.0, epsilon = 1e-9);
    }

    fn toy_quantized(
        seed: u64,
        bits: &str,
    ) -> (crate::graph::ModuleGraph, SchedulerConfig, QuantizedGraph) {
        let g = build_toy_unet(2, 4, [4, 8, 8], seed).unwrap();
        let sched = SchedulerConfig::linear(3, 1e-4, 0.05).unwrap();
        let table = calibrate(&g, &sched, &[3], 4, seed ^ 1).unwrap();
        let (w, a) = parse_bit_setting(bits).unwrap();
        let qg = apply_config(&g, &PrecisionConfig::homogeneous(w, a), &table).unwrap();
        (g, sched, qg)
    }

    #[test]
    fn fp32_trace_is_capped_everywhere() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 2).unwrap();
        let sched = SchedulerConfig::linear(2, 1e-4, 0.05).unwrap();
        let table = calibrate(&g, &sched, &[2], 2, 3).unwrap();
        let qg = apply_config(&g, &PrecisionConfig::all_fp32(), &table).unwrap();
        let cond = normal_tensor(vec![g.input.cond_dim], 5, "cond", 0);
        let trace = time_averaged_output_sqnr(&qg, &sched, 7.5, &cond, 2, 9).unwrap();
        assert_eq!(trace.output_avg_db, CAP_DB);
        assert!(trace.records.iter().all(|r| r.sqnr_db == CAP_DB));
        assert_eq!(trace.output_sqnr_per_t.len(), 2);
    }

    #[test]
    fn record_count_covers_parameterized_nodes_per_step() {
        let (g, sched, qg) = toy_quantized(4, "8w8a");
        let cond = normal_tensor(vec![g.input.cond_dim], 5, "cond", 0);
        let trace = time_averaged_output_sqnr(&qg, &sched, 7.5, &cond, 2, 9).unwrap();
        let n_params = g.list_parameterized_modules().len();
        assert_eq!(trace.records.len(), n_params * sched.t_max());
    }

    #[test]
    fn dual_path_matches_two_separate_passes() {
        let (g, _sched, qg) = toy_quantized(6, "8w8a");
        let z = normal_tensor(g.input.latent_shape(4), 8, "z", 0);
        let cond = normal_tensor(vec![4, g.input.cond_dim], 8, "cond-rows", 0);

        let mut trace = TraceBuilder::new();
        let dual = dual_path_forward(&qg, &DualTensor::splat(z.clone()), 2, &cond, &mut trace)
            .unwrap();

        let mut fp_outs: Vec<(String, Tensor)> = Vec::new();
        let mut obs_fp = |n: &ModuleNode, _: &[&Tensor], out: &Tensor| {
            fp_outs.push((n.id.clone(), out.clone()));
        };
        let fp = g.forward(&z, 2, &cond, Some(&mut obs_fp)).unwrap();

        let mut q_outs: Vec<(String, Tensor)> = Vec::new();
        let mut obs_q = |n: &ModuleNode, _: &[&Tensor], out: &Tensor| {
            q_outs.push((n.id.clone(), out.clone()));
        };
        let q = qg.forward_q(&z, 2, &cond, Some(&mut obs_q)).unwrap();

        assert_eq!(dual.fp, fp);
        assert_eq!(dual.q, q);

        // per-node scores recomputed from the two separate passes
        let finished = trace.finish(&g);
        for ((id_fp, out_fp), (id_q, out_q)) in fp_outs.iter().zip(&q_outs) {
            assert_eq!(id_fp, id_q);
            if g.node(id_fp).unwrap().kind.is_parameterized() {
                let expect = sqnr_db(out_fp, out_q).unwrap();
                let got = finished.module_at(id_fp, 2).unwrap();
                assert!(
                    (got - expect).abs() <= 1e-12,
                    "{id_fp}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn quantizing_more_nodes_does_not_raise_output_sqnr() {
        let mut diffs = Vec::new();
        for seed in 0..10u64 {
            let g = build_toy_unet(2, 4, [4, 8, 8], seed).unwrap();
            let sched = SchedulerConfig::linear(2, 1e-4, 0.05).unwrap();
            let table = calibrate(&g, &sched, &[2], 2, seed).unwrap();
            let cond = normal_tensor(vec![g.input.cond_dim], seed, "cond", 0);

            let mut few = PrecisionConfig::all_fp32();
            few.push_rule(
                "down_blocks.*",
                crate::quant::PrecisionFormat::Int8,
                crate::quant::PrecisionFormat::Int8,
            );
            let mut many = few.clone();
            many.push_rule(
                "up_blocks.*",
                crate::quant::PrecisionFormat::Int8,
                crate::quant::PrecisionFormat::Int8,
            );

            let qg_few = apply_config(&g, &few, &table).unwrap();
            let qg_many = apply_config(&g, &many, &table).unwrap();
            let db_few = time_averaged_output_sqnr(&qg_few, &sched, 7.5, &cond, 2, seed)
                .unwrap()
                .output_avg_db;
            let db_many = time_averaged_output_sqnr(&qg_many, &sched, 7.5, &cond, 2, seed)
                .unwrap()
                .output_avg_db;
            diffs.push(db_many - db_few);
        }
        diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = diffs[diffs.len() / 2];
        assert!(median <= 0.0, "median delta {median}");
    }

    #[test]
    fn chunking_does_not_change_results() {
        let (g, sched, qg) = toy_quantized(3, "8w8a");
        let cond = normal_tensor(vec![g.input.cond_dim], 5, "cond", 0);
        // 33 samples forces a chunk boundary at 32
        let a = time_averaged_output_sqnr(&qg, &sched, 7.5, &cond, 33, 9).unwrap();
        let b = time_averaged_output_sqnr(&qg, &sched, 7.5, &cond, 33, 9).unwrap();
        assert_eq!(a, b);
    }
}

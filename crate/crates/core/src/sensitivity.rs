//! Block- and module-level sensitivity analysis.
//!
//! The global sweep quantizes the first N blocks for every N and reads the
//! time-averaged output SQNR; the local ranking orders parameterized modules
//! by their time-averaged per-module SQNR, ascending, so the most
//! quantization-sensitive modules come first.

use serde::{Deserialize, Serialize};

use crate::diffusion::SchedulerConfig;
use crate::error::{Error, Result};
use crate::graph::ModuleGraph;
use crate::quant::{apply_config, CalibrationTable, PrecisionConfig, PrecisionFormat};
use crate::sqnr::{time_averaged_output_sqnr, SensitivityTrace, CAP_DB};
use crate::tensor::Tensor;

/// One operating point of the progressive-quantization sweep: the first
/// `quantized_blocks` blocks run at the low precision, the rest at fp32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub quantized_blocks: usize,
    pub output_avg_db: f64,
    /// Name of the block quantized last at this point; `None` at N = 0.
    pub newest_block: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSweepCurve {
    pub points: Vec<SweepPoint>,
}

impl BlockSweepCurve {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.output_avg_db).collect()
    }
}

/// Precision config quantizing the first `n` blocks of the graph.
pub fn first_n_blocks_config(
    graph: &ModuleGraph,
    n: usize,
    low: (PrecisionFormat, PrecisionFormat),
) -> PrecisionConfig {
    let mut cfg = PrecisionConfig::all_fp32();
    for block in graph.list_blocks().iter().take(n) {
        cfg.push_rule(format!("{}.*", block.name), low.0, low.1);
    }
    cfg
}

/// Progressively quantize the first N blocks for N in 0..=B and evaluate the
/// time-averaged output SQNR at each point.
#[allow(clippy::too_many_arguments)]
pub fn block_sweep(
    graph: &ModuleGraph,
    table: &CalibrationTable,
    low: (PrecisionFormat, PrecisionFormat),
    scheduler: &SchedulerConfig,
    guidance: f64,
    cond: &Tensor,
    n_samples: usize,
    seed: u64,
) -> Result<BlockSweepCurve> {
    if !low.0.is_integer() && low.0 != PrecisionFormat::Fp16 {
        return Err(Error::invalid(
            "sweep precision must be a quantized format, not fp32",
        ));
    }
    let blocks = graph.list_blocks();
    let mut points = Vec::with_capacity(blocks.len() + 1);
    for n in 0..=blocks.len() {
        let output_avg_db = if n == 0 {
            CAP_DB
        } else {
            let cfg = first_n_blocks_config(graph, n, low);
            let qg = apply_config(graph, &cfg, table)?;
            time_averaged_output_sqnr(&qg, scheduler, guidance, cond, n_samples, seed)?
                .output_avg_db
        };
        points.push(SweepPoint {
            quantized_blocks: n,
            output_avg_db,
            newest_block: n.checked_sub(1).map(|i| blocks[i].name.clone()),
        });
    }
    Ok(BlockSweepCurve { points })
}

/// How the cut position is chosen from a sweep curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CutPolicy {
    /// Position of the largest single-step drop between two quantized
    /// operating points.
    LargestDrop,
    /// Smallest N whose value falls below the threshold (dB).
    Threshold(f64),
}

/// Outcome of cut selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CutOutcome {
    Cut {
        /// Curve position N*: quantizing the first N* blocks triggers the
        /// selected descent.
        curve_position: usize,
    },
    /// The threshold was never crossed; no hybrid cut is warranted.
    NoCutNeeded,
}

impl CutOutcome {
    /// Index of the block whose quantization caused the descent: the first
    /// block a hybrid plan keeps at high precision.
    pub fn first_sensitive_block(&self) -> Option<usize> {
        match self {
            CutOutcome::Cut { curve_position } => Some(curve_position - 1),
            CutOutcome::NoCutNeeded => None,
        }
    }
}

/// Select the cut position from a sweep curve. Drops are measured between
/// two quantized operating points only; a transition out of the unquantized
/// [`CAP_DB`] sentinel is not a drop.
pub fn select_cut_block(curve: &BlockSweepCurve, policy: CutPolicy) -> Result<CutOutcome> {
    let values = curve.values();
    if values.len() < 2 {
        return Err(Error::invalid("sweep curve needs at least two points"));
    }
    match policy {
        CutPolicy::LargestDrop => {
            let mut best: Option<(usize, f64)> = None;
            for n in 1..values.len() {
                if values[n - 1] >= CAP_DB {
                    continue;
                }
                let drop = values[n - 1] - values[n];
                if best.map_or(true, |(_, d)| drop > d) {
                    best = Some((n, drop));
                }
            }
            match best {
                Some((n, _)) => Ok(CutOutcome::Cut { curve_position: n }),
                None => Ok(CutOutcome::NoCutNeeded),
            }
        }
        CutPolicy::Threshold(db) => {
            for (n, v) in values.iter().enumerate() {
                if *v < db {
                    return Ok(CutOutcome::Cut { curve_position: n });
                }
            }
            Ok(CutOutcome::NoCutNeeded)
        }
    }
}

/// Per-module sensitivity summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleScore {
    pub node_id: String,
    pub avg_db: f64,
    /// Score at the first inference step (largest timestep).
    pub first_step_db: f64,
    /// Score at the last inference step (t = 1).
    pub last_step_db: f64,
}

/// Modules ordered by ascending time-averaged SQNR (most sensitive first)
/// plus the selected top-k% set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleRanking {
    pub scores: Vec<ModuleScore>,
    pub k_percent: f64,
    pub selected: Vec<String>,
}

/// Rank parameterized modules by time-averaged SQNR and select the top-k%
/// most sensitive ones, ties broken by execution order.
pub fn rank_modules(
    trace: &SensitivityTrace,
    graph: &ModuleGraph,
    k_percent: f64,
) -> Result<ModuleRanking> {
    if trace.records.is_empty() {
        return Err(Error::invalid("trace has no module records"));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::invalid(format!(
            "k_percent must lie in (0, 100], got {k_percent}"
        )));
    }
    let averages = trace.per_module_average();
    let mut scores: Vec<ModuleScore> = averages
        .into_iter()
        .map(|(node_id, avg_db)| {
            let mut first_t = usize::MIN;
            let mut last_t = usize::MAX;
            let mut first = f64::NAN;
            let mut last = f64::NAN;
            for r in trace.records.iter().filter(|r| r.node_id == node_id) {
                if r.t >= first_t {
                    first_t = r.t;
                    first = r.sqnr_db;
                }
                if r.t <= last_t {
                    last_t = r.t;
                    last = r.sqnr_db;
                }
            }
            ModuleScore {
                node_id,
                avg_db,
                first_step_db: first,
                last_step_db: last,
            }
        })
        .collect();
    let order_of = |id: &str| graph.node_index(id).unwrap_or(usize::MAX);
    scores.sort_by(|a, b| {
        a.avg_db
            .partial_cmp(&b.avg_db)
            .unwrap()
            .then_with(|| order_of(&a.node_id).cmp(&order_of(&b.node_id)))
    });
    let count = ((k_percent / 100.0) * scores.len() as f64).floor() as usize;
    let count = count.clamp(1, scores.len());
    let selected = scores[..count].iter().map(|s| s.node_id.clone()).collect();
    Ok(ModuleRanking {
        scores,
        k_percent,
        selected,
    })
}

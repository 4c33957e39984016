//! Versioned artifact formats.
//!
//! JSON-style artifacts carry a `format` name and integer `version`; readers
//! refuse anything newer than they understand. Weight payloads are base64 of
//! little-endian 64-bit values, so graph round-trips are bit-exact. CSV
//! exports start with a `# qprobe-csv v1 <kind>` line and keep a stable
//! column order for golden tests.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BlockGroup, InputSpec, ModuleGraph, ModuleNode};
use crate::planner::HybridPlan;
use crate::quant::{
    CalibrationTable, ConfigRule, NodeQuantState, PrecisionConfig, PrecisionFormat, QuantizedGraph,
};
use crate::sensitivity::{BlockSweepCurve, ModuleRanking, SweepPoint};
use crate::sqnr::SensitivityTrace;
use crate::tensor::Tensor;

/// Version written into every artifact this build produces.
pub const FORMAT_VERSION: u32 = 1;

pub const FORMAT_GRAPH: &str = "qprobe.graph";
pub const FORMAT_CALIBRATION: &str = "qprobe.calibration";
pub const FORMAT_QGRAPH: &str = "qprobe.qgraph";
pub const FORMAT_PLAN: &str = "qprobe.plan";
pub const FORMAT_TRACE: &str = "qprobe.trace";
pub const FORMAT_TENSOR: &str = "qprobe.tensor";
pub const FORMAT_MANIFEST: &str = "qprobe.manifest";

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: T,
}

/// Serialize a payload under a named, versioned envelope.
pub fn write_versioned<T: Serialize>(format: &str, payload: &T) -> Result<String> {
    let env = Envelope {
        format: format.to_string(),
        version: FORMAT_VERSION,
        payload,
    };
    serde_json::to_string_pretty(&env)
        .map_err(|e| Error::format("artifact", "serialization", e.to_string()))
}

fn json_error_position(e: &serde_json::Error) -> String {
    format!("line {} column {}", e.line(), e.column())
}

/// Parse a versioned envelope, checking its format name and version.
pub fn read_versioned<T: DeserializeOwned>(format: &'static str, text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::format("artifact", json_error_position(&e), e.to_string()))?;
    let found_format = value
        .get("format")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::format("artifact", "header", "missing `format` field"))?;
    if found_format != format {
        return Err(Error::format(
            "artifact",
            "header",
            format!("expected format `{format}`, found `{found_format}`"),
        ));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format("artifact", "header", "missing `version` field"))?;
    if version as u32 > FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "artifact",
            found: version as u32,
            supported: FORMAT_VERSION,
        });
    }
    let payload = value
        .get("payload")
        .cloned()
        .ok_or_else(|| Error::format("artifact", "header", "missing `payload` field"))?;
    serde_json::from_value(payload)
        .map_err(|e| Error::format("artifact", json_error_position(&e), e.to_string()))
}

// ---------------------------------------------------------------------------
// Graph and quantized-graph artifacts
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    input: InputSpec,
    nodes: Vec<ModuleNode>,
    blocks: Vec<BlockGroup>,
}

impl GraphRepr {
    fn of(graph: &ModuleGraph) -> Self {
        GraphRepr {
            input: graph.input,
            nodes: graph.nodes.clone(),
            blocks: graph.blocks.clone(),
        }
    }

    fn build(self) -> Result<ModuleGraph> {
        ModuleGraph::from_parts(self.input, self.nodes, self.blocks)
    }
}

pub fn graph_to_string(graph: &ModuleGraph) -> Result<String> {
    write_versioned(FORMAT_GRAPH, &GraphRepr::of(graph))
}

pub fn graph_from_str(text: &str) -> Result<ModuleGraph> {
    read_versioned::<GraphRepr>(FORMAT_GRAPH, text)?.build()
}

#[derive(Serialize, Deserialize)]
struct QuantizedGraphRepr {
    graph: GraphRepr,
    states: Vec<Option<NodeQuantState>>,
}

pub fn qgraph_to_string(qgraph: &QuantizedGraph) -> Result<String> {
    write_versioned(
        FORMAT_QGRAPH,
        &QuantizedGraphRepr {
            graph: GraphRepr::of(qgraph.graph()),
            states: qgraph.states().to_vec(),
        },
    )
}

pub fn qgraph_from_str(text: &str) -> Result<QuantizedGraph> {
    let repr = read_versioned::<QuantizedGraphRepr>(FORMAT_QGRAPH, text)?;
    QuantizedGraph::from_states(repr.graph.build()?, repr.states)
}

pub fn calibration_to_string(table: &CalibrationTable) -> Result<String> {
    write_versioned(FORMAT_CALIBRATION, table)
}

pub fn calibration_from_str(text: &str) -> Result<CalibrationTable> {
    read_versioned(FORMAT_CALIBRATION, text)
}

pub fn plan_to_string(plan: &HybridPlan) -> Result<String> {
    write_versioned(FORMAT_PLAN, plan)
}

pub fn plan_from_str(text: &str) -> Result<HybridPlan> {
    read_versioned(FORMAT_PLAN, text)
}

pub fn trace_to_string(trace: &SensitivityTrace) -> Result<String> {
    write_versioned(FORMAT_TRACE, trace)
}

pub fn trace_from_str(text: &str) -> Result<SensitivityTrace> {
    read_versioned(FORMAT_TRACE, text)
}

pub fn tensor_to_string(tensor: &Tensor) -> Result<String> {
    write_versioned(FORMAT_TENSOR, tensor)
}

pub fn tensor_from_str(text: &str) -> Result<Tensor> {
    read_versioned(FORMAT_TENSOR, text)
}

// ---------------------------------------------------------------------------
// Precision-config text format
// ---------------------------------------------------------------------------

const CONFIG_HEADER: &str = "# qprobe-config v";

fn format_pair(weight: PrecisionFormat, activation: PrecisionFormat) -> String {
    format!("{weight}/{activation}")
}

fn parse_pair(value: &str, line_no: usize) -> Result<(PrecisionFormat, PrecisionFormat)> {
    let mut parts = value.splitn(2, '/');
    let first: PrecisionFormat = parts
        .next()
        .unwrap()
        .parse()
        .map_err(|e: Error| Error::format("config", format!("line {line_no}"), e.to_string()))?;
    match parts.next() {
        Some(second) => {
            let second = second.parse().map_err(|e: Error| {
                Error::format("config", format!("line {line_no}"), e.to_string())
            })?;
            Ok((first, second))
        }
        None => Ok((first, first)),
    }
}

/// Render a precision config as the line-based text format:
/// `pattern = weight/activation`, later lines overriding earlier ones.
pub fn config_to_string(config: &PrecisionConfig) -> String {
    let mut out = format!("{CONFIG_HEADER}{FORMAT_VERSION}\n");
    out.push_str(&format!(
        "default = {}\n",
        format_pair(config.default.0, config.default.1)
    ));
    for rule in &config.rules {
        out.push_str(&format!(
            "{} = {}\n",
            rule.pattern,
            format_pair(rule.weight, rule.activation)
        ));
    }
    out
}

/// Parse the precision-config text format. The version header is optional
/// for hand-written files but must not exceed the supported version.
pub fn config_from_str(text: &str) -> Result<PrecisionConfig> {
    let mut config = PrecisionConfig::all_fp32();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix(CONFIG_HEADER) {
            let version: u32 = rest.trim().parse().map_err(|_| {
                Error::format("config", format!("line {line_no}"), "bad version header")
            })?;
            if version > FORMAT_VERSION {
                return Err(Error::UnsupportedVersion {
                    what: "config",
                    found: version,
                    supported: FORMAT_VERSION,
                });
            }
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (pattern, value) = line.split_once('=').ok_or_else(|| {
            Error::format("config", format!("line {line_no}"), "expected `pattern = formats`")
        })?;
        let pattern = pattern.trim();
        let (w, a) = parse_pair(value.trim(), line_no)?;
        if pattern == "default" {
            config.default = (w, a);
        } else {
            config.rules.push(ConfigRule {
                pattern: pattern.to_string(),
                weight: w,
                activation: a,
            });
        }
    }
    Ok(config)
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

fn csv_header(kind: &str) -> String {
    format!("# qprobe-csv v{FORMAT_VERSION} {kind}\n")
}

/// Check a CSV header line and reject newer versions.
pub fn check_csv_header(text: &str, kind: &str) -> Result<()> {
    let first = text.lines().next().unwrap_or_default();
    let expected_prefix = "# qprobe-csv v";
    let rest = first
        .strip_prefix(expected_prefix)
        .ok_or_else(|| Error::format("csv", "line 1", "missing qprobe-csv header"))?;
    let mut parts = rest.splitn(2, ' ');
    let version: u32 = parts
        .next()
        .unwrap()
        .parse()
        .map_err(|_| Error::format("csv", "line 1", "bad version"))?;
    if version > FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "csv",
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let found_kind = parts.next().unwrap_or_default().trim();
    if found_kind != kind {
        return Err(Error::format(
            "csv",
            "line 1",
            format!("expected kind `{kind}`, found `{found_kind}`"),
        ));
    }
    Ok(())
}

/// Module trace CSV: per-node-per-timestep records, an averages section and
/// the output-level scores.
pub fn trace_to_csv(trace: &SensitivityTrace) -> String {
    let mut out = csv_header("module-trace");
    out.push_str("node_id,t,sqnr_db,samples\n");
    for r in &trace.records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.node_id, r.t, r.sqnr_db, r.sample_count
        ));
    }
    out.push_str("# averages\n");
    out.push_str("node_id,avg_sqnr_db\n");
    for (id, avg) in trace.per_module_average() {
        out.push_str(&format!("{id},{avg}\n"));
    }
    out.push_str("# output\n");
    out.push_str("t,output_sqnr_db\n");
    for (i, db) in trace.output_sqnr_per_t.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, db));
    }
    out.push_str(&format!("avg,{}\n", trace.output_avg_db));
    out
}

/// Block sweep CSV, one row per operating point.
pub fn sweep_to_csv(curve: &BlockSweepCurve) -> String {
    let mut out = csv_header("block-sweep");
    out.push_str("quantized_blocks,newest_block,output_avg_db\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.quantized_blocks,
            p.newest_block.as_deref().unwrap_or(""),
            p.output_avg_db
        ));
    }
    out
}

/// Parse a block-sweep CSV back into a curve.
pub fn sweep_from_csv(text: &str) -> Result<BlockSweepCurve> {
    check_csv_header(text, "block-sweep")?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(2) {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::format(
                "csv",
                format!("line {}", i + 1),
                "expected 3 columns",
            ));
        }
        let quantized_blocks = cols[0].parse().map_err(|_| {
            Error::format("csv", format!("line {}", i + 1), "bad block count")
        })?;
        let output_avg_db = cols[2].parse().map_err(|_| {
            Error::format("csv", format!("line {}", i + 1), "bad sqnr value")
        })?;
        points.push(SweepPoint {
            quantized_blocks,
            output_avg_db,
            newest_block: if cols[1].is_empty() {
                None
            } else {
                Some(cols[1].to_string())
            },
        });
    }
    if points.is_empty() {
        return Err(Error::format("csv", "body", "sweep has no points"));
    }
    Ok(BlockSweepCurve { points })
}

/// Module ranking CSV, ascending by time-averaged SQNR.
pub fn ranking_to_csv(ranking: &ModuleRanking) -> String {
    let mut out = csv_header("module-ranking");
    out.push_str("rank,node_id,avg_sqnr_db,first_step_db,last_step_db,selected\n");
    for (i, s) in ranking.scores.iter().enumerate() {
        let selected = ranking.selected.contains(&s.node_id);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            s.node_id,
            s.avg_db,
            s.first_step_db,
            s.last_step_db,
            selected
        ));
    }
    out
}

/// Parse a ranking CSV into (node_id, avg_db) rows in rank order.
pub fn ranking_from_csv(text: &str) -> Result<Vec<(String, f64)>> {
    check_csv_header(text, "module-ranking")?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(2) {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::format(
                "csv",
                format!("line {}", i + 1),
                "expected 6 columns",
            ));
        }
        let avg = cols[2]
            .parse()
            .map_err(|_| Error::format("csv", format!("line {}", i + 1), "bad sqnr value"))?;
        rows.push((cols[1].to_string(), avg));
    }
    if rows.is_empty() {
        return Err(Error::format("csv", "body", "ranking has no rows"));
    }
    Ok(rows)
}

/// Two-column x/y plot data with the version header.
pub fn xy_to_csv(kind: &str, pairs: &[(f64, f64)]) -> String {
    let mut out = csv_header(kind);
    out.push_str("x,y\n");
    for (x, y) in pairs {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SchedulerConfig;
    use crate::graph::build_toy_unet;
    use crate::quant::{apply_config, calibrate};
    use crate::rng::normal_tensor;

    #[test]
    fn graph_round_trip_is_exact() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 13).unwrap();
        let text = graph_to_string(&g).unwrap();
        let back = graph_from_str(&text).unwrap();
        assert_eq!(g, back);

        // forward outputs are bit-identical through the round trip
        let z = normal_tensor(g.input.latent_shape(1), 3, "z", 0);
        let cond = crate::tensor::Tensor::zeros(vec![1, g.input.cond_dim]);
        let a = g.forward(&z, 2, &cond, None).unwrap();
        let b = back.forward(&z, 2, &cond, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_stream_fails_with_position() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 13).unwrap();
        let text = graph_to_string(&g).unwrap();
        let truncated = &text[..text.len() / 2];
        let err = graph_from_str(truncated).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn newer_version_is_refused() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 13).unwrap();
        let text = graph_to_string(&g).unwrap();
        let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
        match graph_from_str(&bumped).unwrap_err() {
            Error::UnsupportedVersion { found, .. } => assert_eq!(found, 99),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn wrong_format_name_is_refused() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 13).unwrap();
        let text = graph_to_string(&g).unwrap();
        assert!(calibration_from_str(&text).is_err());
    }

    #[test]
    fn qgraph_round_trip_preserves_execution() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 13).unwrap();
        let sched = SchedulerConfig::linear(3, 1e-4, 0.05).unwrap();
        let table = calibrate(&g, &sched, &[3], 2, 5).unwrap();
        let cfg = crate::quant::PrecisionConfig::homogeneous(
            PrecisionFormat::Int8,
            PrecisionFormat::Int8,
        );
        let qg = apply_config(&g, &cfg, &table).unwrap();
        let text = qgraph_to_string(&qg).unwrap();
        let back = qgraph_from_str(&text).unwrap();

        let z = normal_tensor(g.input.latent_shape(2), 3, "z", 0);
        let cond = crate::tensor::Tensor::zeros(vec![2, g.input.cond_dim]);
        let a = qg.forward_q(&z, 2, &cond, None).unwrap();
        let b = back.forward_q(&z, 2, &cond, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_round_trip() {
        let g = build_toy_unet(2, 4, [4, 8, 8], 13).unwrap();
        let sched = SchedulerConfig::linear(3, 1e-4, 0.05).unwrap();
        let table = calibrate(&g, &sched, &[1, 3], 2, 5).unwrap();
        let text = calibration_to_string(&table).unwrap();
        assert_eq!(table, calibration_from_str(&text).unwrap());
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = PrecisionConfig::homogeneous(PrecisionFormat::Int8, PrecisionFormat::Int8);
        cfg.push_rule("up_blocks.*", PrecisionFormat::Fp16, PrecisionFormat::Fp16);
        cfg.push_rule(
            "mid_block.resnets.0.conv1",
            PrecisionFormat::Int4,
            PrecisionFormat::Int8,
        );
        let text = config_to_string(&cfg);
        let back = config_from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_accepts_paper_style_tokens() {
        let cfg = config_from_str(
            "default = 32fp/32fp\nup_blocks.2.* = 16fp/16fp\ndown_blocks.* = 8/8\n",
        )
        .unwrap();
        assert_eq!(
            cfg.resolve("up_blocks.2.resnets.0.conv1"),
            (PrecisionFormat::Fp16, PrecisionFormat::Fp16)
        );
        assert_eq!(
            cfg.resolve("down_blocks.1.resnets.0.conv1"),
            (PrecisionFormat::Int8, PrecisionFormat::Int8)
        );
        assert_eq!(
            cfg.resolve("mid_block.resnets.0.conv1"),
            (PrecisionFormat::Fp32, PrecisionFormat::Fp32)
        );
    }

    #[test]
    fn config_rejects_newer_version_and_garbage() {
        assert!(matches!(
            config_from_str("# qprobe-config v9\n"),
            Err(Error::UnsupportedVersion { .. })
        ));
        assert!(config_from_str("what is this\n").is_err());
        assert!(config_from_str("a = int7\n").is_err());
    }

    #[test]
    fn sweep_csv_round_trip() {
        let curve = BlockSweepCurve {
            points: vec![
                SweepPoint {
                    quantized_blocks: 0,
                    output_avg_db: 200.0,
                    newest_block: None,
                },
                SweepPoint {
                    quantized_blocks: 1,
                    output_avg_db: 35.25,
                    newest_block: Some("in_blocks".to_string()),
                },
            ],
        };
        let text = sweep_to_csv(&curve);
        let back = sweep_from_csv(&text).unwrap();
        assert_eq!(curve, back);
    }

    #[test]
    fn csv_header_checks() {
        assert!(check_csv_header("# qprobe-csv v1 block-sweep\n", "block-sweep").is_ok());
        assert!(check_csv_header("# qprobe-csv v2 block-sweep\n", "block-sweep").is_err());
        assert!(check_csv_header("# qprobe-csv v1 other\n", "block-sweep").is_err());
        assert!(check_csv_header("node_id,t\n", "block-sweep").is_err());
    }
}

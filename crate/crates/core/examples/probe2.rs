//! Scratch diagnostics: per-block isolation, worst modules, range drift.

use qprobe_core::diffusion::SchedulerConfig;
use qprobe_core::graph::build_toy_unet;
use qprobe_core::quant::{apply_config, calibrate, parse_bit_setting, PrecisionConfig};
use qprobe_core::rng::normal_tensor;
use qprobe_core::sensitivity::rank_modules;
use qprobe_core::sqnr::time_averaged_output_sqnr;

fn main() {
    let t_max = 5usize;
    let beta_end = 0.15f64;
    let n_eval = 4usize;
    let guidance: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7.5);

    let seed = 1u64;
    let g = build_toy_unet(2, 4, [4, 16, 16], seed).unwrap();
    let sched = SchedulerConfig::linear(t_max, 1e-4, beta_end).unwrap();
    let low = parse_bit_setting("8w8a").unwrap();
    let cond = normal_tensor(vec![g.input.cond_dim], seed, "cond", 0);
    let table = calibrate(&g, &sched, &[t_max], 16, seed + 100).unwrap();

    println!("== quantize one block at a time (guidance {guidance}) ==");
    for block in g.list_blocks() {
        let mut cfg = PrecisionConfig::all_fp32();
        cfg.push_rule(format!("{}.*", block.name), low.0, low.1);
        let qg = apply_config(&g, &cfg, &table).unwrap();
        let tr = time_averaged_output_sqnr(&qg, &sched, guidance, &cond, n_eval, seed).unwrap();
        println!(
            "  only {:<16} output_avg {:6.2}  per-t {:?}",
            block.name,
            tr.output_avg_db,
            tr.output_sqnr_per_t
                .iter()
                .map(|v| (v * 10.0).round() / 10.0)
                .collect::<Vec<_>>()
        );
    }

    println!("== quantize one KIND at a time (whole net) ==");
    for (label, pattern_kinds) in [
        ("convs", vec!["conv1", "conv2", "conv_in", "conv_out"]),
        ("time_proj", vec!["time_emb_proj"]),
        ("cond_proj", vec!["cond_proj"]),
        ("attn_proj", vec!["proj_out"]),
        ("shortcut", vec!["conv_shortcut"]),
        ("downsample", vec!["downsamplers"]),
        ("upsample", vec!["upsamplers"]),
    ] {
        let mut cfg = PrecisionConfig::all_fp32();
        for node in &g.nodes {
            if pattern_kinds.iter().any(|k| node.id.contains(k)) {
                cfg.push_rule(node.id.clone(), low.0, low.1);
            }
        }
        let qg = apply_config(&g, &cfg, &table).unwrap();
        let tr = time_averaged_output_sqnr(&qg, &sched, guidance, &cond, n_eval, seed).unwrap();
        println!("  only {label:<10} output_avg {:6.2}", tr.output_avg_db);
    }

    println!("== homogeneous 8W8A: worst modules ==");
    let qh = apply_config(&g, &PrecisionConfig::homogeneous(low.0, low.1), &table).unwrap();
    let tr = time_averaged_output_sqnr(&qh, &sched, guidance, &cond, n_eval, seed).unwrap();
    println!("  output per-t {:?}", tr.output_sqnr_per_t);
    let ranking = rank_modules(&tr, &g, 100.0).unwrap();
    for s in ranking.scores.iter().take(10) {
        println!(
            "  {:<44} avg {:6.2} first {:6.2} last {:6.2}",
            s.node_id, s.avg_db, s.first_step_db, s.last_step_db
        );
    }
    println!("  ...best:");
    for s in ranking.scores.iter().rev().take(4) {
        println!(
            "  {:<44} avg {:6.2} first {:6.2} last {:6.2}",
            s.node_id, s.avg_db, s.first_step_db, s.last_step_db
        );
    }
}

//! Scratch diagnostics: single-module isolation at one forward pass.

use qprobe_core::diffusion::SchedulerConfig;
use qprobe_core::graph::build_toy_unet;
use qprobe_core::quant::{apply_config, calibrate, parse_bit_setting, PrecisionConfig};
use qprobe_core::rng::normal_tensor;
use qprobe_core::sqnr::{dual_path_forward, DualTensor, TraceBuilder};
use qprobe_core::tensor::Tensor;

fn main() {
    let t_max = 5usize;
    let seed = 1u64;
    let g = build_toy_unet(2, 4, [4, 16, 16], seed).unwrap();
    let sched = SchedulerConfig::linear(t_max, 1e-4, 0.15).unwrap();
    let low = parse_bit_setting("8w8a").unwrap();
    let table = calibrate(&g, &sched, &[t_max], 16, seed + 100).unwrap();

    let z = normal_tensor(g.input.latent_shape(8), 7, "z", 0);
    let cond_rows = {
        let c = normal_tensor(vec![g.input.cond_dim], seed, "cond", 0);
        let mut rows = Vec::new();
        for _ in 0..8 {
            rows.extend_from_slice(c.data());
        }
        Tensor::new(vec![8, g.input.cond_dim], rows).unwrap()
    };

    println!("== quantize exactly one module, output SQNR of one forward at t=T ==");
    let mut rows: Vec<(String, f64)> = Vec::new();
    for id in g.list_parameterized_modules() {
        let mut cfg = PrecisionConfig::all_fp32();
        cfg.push_rule(id.to_string(), low.0, low.1);
        let qg = apply_config(&g, &cfg, &table).unwrap();
        let mut tb = TraceBuilder::new();
        let out =
            dual_path_forward(&qg, &DualTensor::splat(z.clone()), t_max, &cond_rows, &mut tb)
                .unwrap();
        tb.record_output(t_max, &out.fp, &out.q).unwrap();
        let trace = tb.finish(&g);
        rows.push((id.to_string(), trace.output_sqnr_per_t[0]));
    }
    rows.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    for (id, db) in &rows {
        println!("  {id:<48} {db:7.2}");
    }
}

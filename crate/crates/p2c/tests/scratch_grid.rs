use p2c::config::RunConfig;
use p2c::runner::{ablation_variants, apply_variant, execute_run};
use p2c::rng::derive_seed;
use p2c::synthdata::generate_task;

fn probe(label: &str, cfg: &RunConfig, seeds: u64) {
    let task = generate_task(&cfg.task_spec(), cfg.data.seed).unwrap();
    let variants = ablation_variants();
    let mut lines = Vec::new();
    for v in [&variants[0], &variants[2], &variants[4]] {
        let vcfg = apply_variant(cfg, v);
        let mut hms = Vec::new();
        let mut bases = Vec::new();
        let mut novels = Vec::new();
        for si in 0..seeds {
            let out = execute_run(&vcfg, &task, derive_seed(42, si)).unwrap();
            hms.push(out.report.hm);
            bases.push(out.report.base_acc);
            novels.push(out.report.novel_acc);
        }
        let m = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        lines.push(format!(
            "  {:<10} base {:5.1} novel {:5.1} hm {:5.2} [{}]",
            v.name,
            m(&bases),
            m(&novels),
            m(&hms),
            hms.iter().map(|h| format!("{h:.0}")).collect::<Vec<_>>().join(",")
        ));
    }
    println!("{label}:");
    for l in lines {
        println!("{l}");
    }
}

#[test]
#[ignore]
fn grid() {
    let t0 = std::time::Instant::now();
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 0;
    probe("ZERO-SHOT (no training)", &cfg, 3);

    cfg = RunConfig::default();
    probe("defaults (idio .25, offset .3, noise .35)", &cfg, 5);

    cfg = RunConfig::default();
    cfg.prompts.token_idio_std = 0.1;
    cfg.data.class_offset_std = 0.15;
    probe("comp (idio .1, offset .15, noise .35)", &cfg, 5);

    cfg = RunConfig::default();
    cfg.prompts.token_idio_std = 0.05;
    cfg.data.class_offset_std = 0.1;
    cfg.data.noise_std = 0.25;
    probe("very comp (idio .05, offset .1, noise .25)", &cfg, 5);

    cfg = RunConfig::default();
    cfg.prompts.token_idio_std = 0.1;
    cfg.data.class_offset_std = 0.15;
    cfg.data.noise_std = 0.45;
    probe("comp + harder noise (.45)", &cfg, 5);

    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}

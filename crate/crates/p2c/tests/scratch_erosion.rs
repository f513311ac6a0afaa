use p2c::config::RunConfig;
use p2c::rng::derive_seed;
use p2c::runner::{ablation_variants, apply_variant, execute_run};
use p2c::synthdata::generate_task;

fn probe(label: &str, cfg: &RunConfig, batches: u64, per: u64) {
    let task = generate_task(&cfg.task_spec(), cfg.data.seed).unwrap();
    let variants = ablation_variants();
    let pick = [0usize, 2]; // baseline, +DPD(GMM)
    println!("{label}:");
    for b in 0..batches {
        let mut rows = Vec::new();
        for &vi in &pick {
            let vcfg = apply_variant(cfg, &variants[vi]);
            let (mut mb, mut mn, mut mh) = (0.0, 0.0, 0.0);
            for si in 0..per {
                let out = execute_run(&vcfg, &task, derive_seed(2000 + b, si)).unwrap();
                mb += out.report.base_acc / per as f64;
                mn += out.report.novel_acc / per as f64;
                mh += out.report.hm / per as f64;
            }
            rows.push((variants[vi].name, mb, mn, mh));
        }
        let d = rows[1].3 - rows[0].3;
        let dn = rows[1].2 - rows[0].2;
        println!(
            "  batch {b}: baseline base {:5.1} novel {:5.1} hm {:5.2} | dpd_gmm dHM {d:+.2} dNovel {dn:+.2}",
            rows[0].1, rows[0].2, rows[0].3
        );
    }
}

#[test]
#[ignore]
fn erosion() {
    let t0 = std::time::Instant::now();
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 150;
    probe("A defaults T=150", &cfg, 3, 5);

    let mut cfg = RunConfig::default();
    cfg.train.epochs = 300;
    probe("A defaults T=300", &cfg, 2, 5);

    let mut cfg = RunConfig::default();
    cfg.prompts.token_idio_std = 0.1;
    cfg.data.class_offset_std = 0.15;
    cfg.train.epochs = 150;
    probe("B comp T=150", &cfg, 3, 5);
    println!("elapsed {:.0}s", t0.elapsed().as_secs_f64());
}

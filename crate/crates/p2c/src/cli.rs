//! Command implementations behind the binary: data generation, single runs,
//! component ablations, hyperparameter sweeps, shift evaluation, and
//! plot-data emission.
//!
//! Exit-code contract: validation problems (bad config, unknown keys, bad
//! axis, missing inputs) map to 2; runtime failures (non-finite loss, io on
//! outputs) map to 3. Every CSV has a header, LF endings, and a stable
//! column order; runs embed the config hash for provenance.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{ConfigError, RunConfig};
use crate::eval::{build_report, evaluate_split, harmonic_mean, EvalReport, RunFlags, Split};
use crate::noise::ScheduleKind;
use crate::rng::{derive_seed, rng_from_seed};
use crate::runner::{
    ablation_variants, apply_variant, execute_run, run_parallel, RunnerError, TrainedParams,
};
use crate::synthdata::{apply_shift, generate_task, ShiftKind, ShiftSpec, SynthTask};
use crate::train::{overhead_report, read_curves_csv, write_curves_csv, StepRecord};

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CmdError {
    /// exit code 2
    Validation(String),
    /// exit code 3
    Runtime(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Validation(_) => 2,
            CmdError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Validation(m) | CmdError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Validation(e.to_string())
    }
}

impl From<RunnerError> for CmdError {
    fn from(e: RunnerError) -> Self {
        match e {
            RunnerError::Config(c) => CmdError::Validation(c.to_string()),
            other => CmdError::Runtime(other.to_string()),
        }
    }
}

fn load_task(path: &Path) -> Result<SynthTask, CmdError> {
    SynthTask::load(path).map_err(|e| CmdError::Validation(e.to_string()))
}

fn load_params(path: &Path) -> Result<TrainedParams, CmdError> {
    TrainedParams::load(path).map_err(|e| CmdError::Validation(e.to_string()))
}

fn ensure_dir(path: &Path) -> Result<(), CmdError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CmdError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CmdError> {
    std::fs::write(path, text)
        .map_err(|e| CmdError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn pct1(x: f64) -> String {
    format!("{x:.1}")
}

/// Generate a task file from the config's `data` section.
pub fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CmdError> {
    let cfg = RunConfig::load(config)?;
    let task_seed = seed.unwrap_or(cfg.data.seed);
    let task = generate_task(&cfg.task_spec(), task_seed)
        .map_err(|e| CmdError::Validation(e.to_string()))?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    task.save(out)
        .map_err(|e| CmdError::Runtime(e.to_string()))?;
    println!(
        "task: {} base + {} novel classes, {} train / {} test samples, seed {} -> {}",
        task.spec.c_base,
        task.spec.c_novel,
        task.train_x.len(),
        task.test_x.len(),
        task_seed,
        out.display()
    );
    Ok(())
}

/// Write the three run artifacts into `out_dir`.
fn write_run_artifacts(
    out_dir: &Path,
    cfg: &RunConfig,
    seed: u64,
    records: &[StepRecord],
    report: &EvalReport,
    model: Option<&crate::model::ModelState>,
) -> Result<(), CmdError> {
    ensure_dir(out_dir)?;
    write_curves_csv(records, &out_dir.join("curves.csv"))
        .map_err(|e| CmdError::Runtime(e.to_string()))?;
    report
        .save(&out_dir.join("report.json"))
        .map_err(|e| CmdError::Runtime(e.to_string()))?;
    if let Some(model) = model {
        TrainedParams {
            config: cfg.clone(),
            seed,
            model: model.clone(),
        }
        .save(&out_dir.join("params.json"))
        .map_err(|e| CmdError::Runtime(e.to_string()))?;
    }
    Ok(())
}

/// Train one run and write curves.csv, report.json, params.json.
pub fn cmd_train(
    config: &Path,
    task: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<(), CmdError> {
    let cfg = RunConfig::load(config)?;
    let task = load_task(task)?;
    let run_seed = seed.unwrap_or(cfg.train.seed);
    let out = execute_run(&cfg, &task, run_seed)?;
    write_run_artifacts(out_dir, &cfg, run_seed, &out.records, &out.report, Some(&out.model))?;
    println!(
        "run seed {}: base {} novel {} hm {} macro_f1 {} -> {}",
        run_seed,
        pct1(out.report.base_acc),
        pct1(out.report.novel_acc),
        pct1(out.report.hm),
        pct1(out.report.macro_f1_base),
        out_dir.display()
    );
    Ok(())
}

/// Re-evaluate stored parameters on a task and write report.json.
pub fn cmd_eval(params: &Path, task: &Path, out_dir: &Path) -> Result<(), CmdError> {
    let tp = load_params(params)?;
    let task = load_task(task)?;
    let started = std::time::Instant::now();
    let report = build_report(
        &tp.model,
        &task,
        tp.config.hash(),
        tp.seed,
        tp.config.train.epochs,
        0.0,
        RunFlags {
            dpd: tp.config.train.dpd,
            aux: tp.config.train.aux,
            noise_kind: tp.config.noise.kind.name().to_string(),
            schedule: tp.config.noise.schedule.name().to_string(),
        },
    )
    .map_err(|e| CmdError::Runtime(e.to_string()))?;
    let report = EvalReport {
        total_wall_ms: started.elapsed().as_secs_f64() * 1e3,
        ..report
    };
    ensure_dir(out_dir)?;
    report
        .save(&out_dir.join("report.json"))
        .map_err(|e| CmdError::Runtime(e.to_string()))?;
    println!(
        "eval seed {}: base {} novel {} hm {}",
        tp.seed,
        pct1(report.base_acc),
        pct1(report.novel_acc),
        pct1(report.hm)
    );
    Ok(())
}

struct CompletedRun {
    label: String,
    slug: String,
    seed: u64,
    records: Vec<StepRecord>,
    report: EvalReport,
}

/// Run the five component-ablation variants over `seeds` seeds and write
/// ablation.csv plus one artifact directory per run.
pub fn cmd_ablate(
    config: &Path,
    task: &Path,
    out_dir: &Path,
    seeds: usize,
    jobs: usize,
    seed: Option<u64>,
) -> Result<(), CmdError> {
    if seeds < 1 {
        return Err(CmdError::Validation("--seeds must be >= 1".into()));
    }
    let cfg = RunConfig::load(config)?;
    let task = load_task(task)?;
    let master = seed.unwrap_or(cfg.train.seed);

    let variants = ablation_variants();
    let slugs = ["baseline", "dpd_gm", "dpd_gmm", "dpd_gm_aux", "p2c"];
    let mut specs = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for si in 0..seeds {
            // the same per-index seed across variants pairs the comparisons
            let run_seed = derive_seed(master, si as u64);
            specs.push((vi, si, apply_variant(&cfg, v), run_seed));
        }
    }
    let results = run_parallel(specs, jobs, |(vi, _si, vcfg, run_seed)| {
        execute_run(vcfg, &task, *run_seed).map(|out| CompletedRun {
            label: variants[*vi].name.to_string(),
            slug: slugs[*vi].to_string(),
            seed: *run_seed,
            records: out.records,
            report: out.report,
        })
    });
    let mut runs = Vec::new();
    for r in results {
        runs.push(r?);
    }

    ensure_dir(out_dir)?;
    let mut csv = String::from("variant,seed,base_acc,novel_acc,hm,delta_hm\n");
    let per_seed = seeds;
    for (vi, _) in variants.iter().enumerate() {
        for si in 0..per_seed {
            let run = &runs[vi * per_seed + si];
            let dir = out_dir.join("runs").join(format!("{}-s{}", run.slug, si));
            write_run_artifacts(&dir, &cfg, run.seed, &run.records, &run.report, None)?;
            writeln!(
                csv,
                "{},{},{},{},{},",
                run.label, run.seed, run.report.base_acc, run.report.novel_acc, run.report.hm
            )
            .expect("string write");
        }
    }
    // summary rows: per-variant means and the gap to baseline (mean of HMs,
    // not HM of means)
    let mean_of = |vi: usize, f: &dyn Fn(&EvalReport) -> f64| -> f64 {
        (0..per_seed)
            .map(|si| f(&runs[vi * per_seed + si].report))
            .sum::<f64>()
            / per_seed as f64
    };
    let baseline_hm = mean_of(0, &|r| r.hm);
    println!("variant means over {per_seed} seeds:");
    for (vi, v) in variants.iter().enumerate() {
        let mb = mean_of(vi, &|r| r.base_acc);
        let mn = mean_of(vi, &|r| r.novel_acc);
        let mh = mean_of(vi, &|r| r.hm);
        let delta = mh - baseline_hm;
        writeln!(csv, "{},mean,{},{},{},{}", v.name, mb, mn, mh, delta).expect("string write");
        println!(
            "  {:<14} base {} novel {} hm {} (delta {})",
            v.name,
            pct1(mb),
            pct1(mn),
            pct1(mh),
            pct1(delta)
        );
    }
    write_text(&out_dir.join("ablation.csv"), &csv)?;
    Ok(())
}

/// Axes a sweep can vary.
const SWEEP_AXES: [&str; 6] = ["schedule", "sigma_max", "sigma_aux", "lambda", "s_H", "TL"];

fn apply_axis(cfg: &RunConfig, axis: &str, value: &str) -> Result<RunConfig, CmdError> {
    let mut out = cfg.clone();
    let parse_f = |v: &str| -> Result<f64, CmdError> {
        v.parse()
            .map_err(|_| CmdError::Validation(format!("bad numeric value {v:?} for axis")))
    };
    let parse_u = |v: &str| -> Result<usize, CmdError> {
        v.parse()
            .map_err(|_| CmdError::Validation(format!("bad integer value {v:?} for axis")))
    };
    match axis {
        "schedule" => {
            out.noise.schedule = ScheduleKind::parse(value).ok_or_else(|| {
                CmdError::Validation(format!(
                    "unknown schedule {value:?}; expected constant|linear|cosine|sigmoid"
                ))
            })?;
        }
        "sigma_max" => out.noise.sigma_max = parse_f(value)?,
        "sigma_aux" => {
            out.noise.sigma_aux = parse_f(value)?;
            out.mapper.sigma_aux = None;
        }
        "lambda" => out.mapper.lambda = parse_f(value)?,
        "s_H" => out.mapper.s_h = parse_u(value)?,
        "TL" => out.prompts.tl_att = parse_u(value)?,
        other => {
            return Err(CmdError::Validation(format!(
                "unknown axis {other:?}; expected one of {SWEEP_AXES:?}"
            )))
        }
    }
    out.validate()?;
    Ok(out)
}

/// One run per (axis value, seed); per-value mean/std of HM appended.
#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    config: &Path,
    task: &Path,
    axis: &str,
    values: &str,
    out_dir: &Path,
    seeds: usize,
    jobs: usize,
    seed: Option<u64>,
) -> Result<(), CmdError> {
    if seeds < 1 {
        return Err(CmdError::Validation("--seeds must be >= 1".into()));
    }
    if !SWEEP_AXES.contains(&axis) {
        return Err(CmdError::Validation(format!(
            "unknown axis {axis:?}; expected one of {SWEEP_AXES:?}"
        )));
    }
    let cfg = RunConfig::load(config)?;
    let task = load_task(task)?;
    let master = seed.unwrap_or(cfg.train.seed);
    let value_list: Vec<String> = values
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if value_list.is_empty() {
        return Err(CmdError::Validation("--values is empty".into()));
    }

    let mut specs = Vec::new();
    for (vi, value) in value_list.iter().enumerate() {
        let vcfg = apply_axis(&cfg, axis, value)?;
        for si in 0..seeds {
            let run_seed = derive_seed(master, si as u64);
            specs.push((vi, si, value.clone(), vcfg.clone(), run_seed));
        }
    }
    let results = run_parallel(specs, jobs, |(_vi, si, value, vcfg, run_seed)| {
        execute_run(vcfg, &task, *run_seed).map(|out| CompletedRun {
            label: value.clone(),
            slug: format!("{}-{}-s{}", axis, value.replace('.', "_"), si),
            seed: *run_seed,
            records: out.records,
            report: out.report,
        })
    });
    let mut runs = Vec::new();
    for r in results {
        runs.push(r?);
    }

    ensure_dir(out_dir)?;
    let mut csv = String::from("axis,value,seed,base_acc,novel_acc,hm,hm_mean,hm_std\n");
    for run in &runs {
        let dir = out_dir.join("runs").join(&run.slug);
        write_run_artifacts(&dir, &cfg, run.seed, &run.records, &run.report, None)?;
        writeln!(
            csv,
            "{},{},{},{},{},{},,",
            axis, run.label, run.seed, run.report.base_acc, run.report.novel_acc, run.report.hm
        )
        .expect("string write");
    }
    println!("sweep over {axis} ({} values x {seeds} seeds):", value_list.len());
    for (vi, value) in value_list.iter().enumerate() {
        let hms: Vec<f64> = (0..seeds)
            .map(|si| runs[vi * seeds + si].report.hm)
            .collect();
        let mean = hms.iter().sum::<f64>() / hms.len() as f64;
        let std = if hms.len() > 1 {
            (hms.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>()
                / (hms.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        writeln!(csv, "{axis},{value},summary,,,,{mean},{std}").expect("string write");
        println!("  {value:<10} hm {} +- {}", pct1(mean), pct1(std));
    }
    write_text(&out_dir.join("sweep.csv"), &csv)?;
    Ok(())
}

/// Evaluate stored parameters on shifted test sets.
pub fn cmd_shift_eval(
    params: &Path,
    task: &Path,
    out_dir: &Path,
    kinds: &str,
    magnitudes: &str,
) -> Result<(), CmdError> {
    let tp = load_params(params)?;
    let task = load_task(task)?;
    let kind_list: Vec<ShiftKind> = kinds
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            ShiftKind::parse(s).ok_or_else(|| {
                CmdError::Validation(format!(
                    "unknown shift kind {s:?}; expected mean_shift|linear_warp"
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    let mut mag_list: Vec<f64> = magnitudes
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CmdError::Validation(format!("bad magnitude {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    if kind_list.is_empty() || mag_list.is_empty() {
        return Err(CmdError::Validation(
            "need at least one shift kind and one magnitude".into(),
        ));
    }
    mag_list.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));

    let mut rows = Vec::new();
    for &magnitude in &mag_list {
        for &kind in &kind_list {
            // one fixed direction per kind: the rng depends on (task seed, kind)
            let mut rng = rng_from_seed(derive_seed(task.seed, kind as u64 + 1));
            let shifted = apply_shift(&task, &ShiftSpec { kind, magnitude }, &mut rng);
            let base = evaluate_split(&tp.model, &shifted, Split::Base)
                .map_err(|e| CmdError::Runtime(e.to_string()))?;
            let novel = evaluate_split(&tp.model, &shifted, Split::Novel)
                .map_err(|e| CmdError::Runtime(e.to_string()))?;
            rows.push((
                kind.name(),
                magnitude,
                base.accuracy_pct,
                novel.accuracy_pct,
                harmonic_mean(base.accuracy_pct, novel.accuracy_pct),
            ));
        }
    }
    ensure_dir(out_dir)?;
    let mut csv = String::from("kind,magnitude,base_acc,novel_acc,hm\n");
    for (kind, mag, b, n, h) in &rows {
        writeln!(csv, "{kind},{mag},{b},{n},{h}").expect("string write");
        println!("  {kind:<12} mag {mag:<6} base {} novel {} hm {}", pct1(*b), pct1(*n), pct1(*h));
    }
    write_text(&out_dir.join("shift.csv"), &csv)?;
    Ok(())
}

/// Merge run directories into plot-ready CSVs: downsampled loss curves,
/// per-run metric bars, and pairwise baseline-vs-full overhead.
pub fn cmd_report(
    run_dirs: &[PathBuf],
    out_dir: &Path,
    downsample: usize,
) -> Result<(), CmdError> {
    if run_dirs.is_empty() {
        return Err(CmdError::Validation("need at least one run directory".into()));
    }
    if downsample < 1 {
        return Err(CmdError::Validation("--downsample must be >= 1".into()));
    }
    let mut dirs: Vec<PathBuf> = run_dirs.to_vec();
    dirs.sort();
    dirs.dedup();

    struct LoadedRun {
        name: String,
        records: Vec<StepRecord>,
        report: EvalReport,
    }
    let mut runs = Vec::new();
    for dir in &dirs {
        let curves = dir.join("curves.csv");
        let report = dir.join("report.json");
        for p in [&curves, &report] {
            if !p.exists() {
                return Err(CmdError::Validation(format!(
                    "missing artifact {}",
                    p.display()
                )));
            }
        }
        runs.push(LoadedRun {
            name: dir
                .file_name()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| dir.display().to_string()),
            records: read_curves_csv(&curves).map_err(|e| CmdError::Validation(e.to_string()))?,
            report: EvalReport::load(&report).map_err(|e| CmdError::Validation(e.to_string()))?,
        });
    }
    runs.sort_by(|a, b| a.name.cmp(&b.name));

    ensure_dir(out_dir)?;
    let mut curves = String::from("run,epoch,step,loss_total,loss_cls,loss_aux,sigma_t\n");
    for run in &runs {
        for rec in run.records.iter().step_by(downsample) {
            writeln!(
                curves,
                "{},{},{},{},{},{},{}",
                run.name,
                rec.epoch,
                rec.step,
                rec.loss_total,
                rec.loss_cls,
                rec.loss_aux,
                rec.sigma_t
            )
            .expect("string write");
        }
    }
    write_text(&out_dir.join("curves_plot.csv"), &curves)?;

    let mut bars = String::from(
        "run,dpd,aux,noise_kind,schedule,base_acc,novel_acc,hm,macro_f1_base\n",
    );
    for run in &runs {
        let r = &run.report;
        writeln!(
            bars,
            "{},{},{},{},{},{},{},{},{}",
            run.name,
            r.flags.dpd,
            r.flags.aux,
            r.flags.noise_kind,
            r.flags.schedule,
            r.base_acc,
            r.novel_acc,
            r.hm,
            r.macro_f1_base
        )
        .expect("string write");
    }
    write_text(&out_dir.join("bars.csv"), &bars)?;

    // overhead: every baseline-flagged run against every fully-enabled run
    let mut overhead = String::from("baseline_run,p2c_run,overhead_pct\n");
    let baselines: Vec<&LoadedRun> = runs
        .iter()
        .filter(|r| !r.report.flags.dpd && !r.report.flags.aux)
        .collect();
    let p2cs: Vec<&LoadedRun> = runs
        .iter()
        .filter(|r| r.report.flags.dpd && r.report.flags.aux)
        .collect();
    let mut reported = Vec::new();
    for b in &baselines {
        for p in &p2cs {
            match overhead_report(&b.records, &p.records) {
                Ok(pct) => {
                    writeln!(overhead, "{},{},{}", b.name, p.name, pct).expect("string write");
                    reported.push(pct);
                }
                Err(e) => {
                    return Err(CmdError::Runtime(format!(
                        "overhead {} vs {}: {e}",
                        b.name, p.name
                    )))
                }
            }
        }
    }
    write_text(&out_dir.join("overhead.csv"), &overhead)?;
    if !reported.is_empty() {
        let mean = reported.iter().sum::<f64>() / reported.len() as f64;
        println!(
            "overhead: mean {:.1}% over {} baseline x full pairs",
            mean,
            reported.len()
        );
    }
    println!(
        "report: {} runs merged -> {}",
        runs.len(),
        out_dir.display()
    );
    Ok(())
}

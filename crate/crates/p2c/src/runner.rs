//! Run orchestration: build a model for (config, task, seed), train it,
//! evaluate both splits, and bundle the artifacts. Also the ablation variant
//! table and a small deterministic work-queue for parallel runs.

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::eval::{build_report, EvalError, EvalReport, RunFlags};
use crate::model::ModelState;
use crate::noise::{NoiseError, NoiseKind};
use crate::rng::rng_from_seed;
use crate::synthdata::{GenError, SynthTask};
use crate::train::{run_training, StepRecord, TrainError};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Everything one run produces.
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub report: EvalReport,
    pub model: ModelState,
}

/// Train and evaluate one run. All randomness (model init, shuffles, noise)
/// flows from `run_seed`; the task is fixed input.
pub fn execute_run(
    cfg: &RunConfig,
    task: &SynthTask,
    run_seed: u64,
) -> Result<RunOutput, RunnerError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = rng_from_seed(run_seed);
    let mut model = ModelState::init(
        &cfg.prompt_config(),
        task.spec.d_x,
        cfg.mapper.s_h,
        &task.prototypes,
        &mut rng,
    );
    let schedule = cfg.schedule_spec()?;
    let nm = cfg.noise_model(run_seed);
    let settings = cfg.train_settings();
    let records = run_training(&mut model, task, &schedule, &nm, &settings, &mut rng)?;
    let report = build_report(
        &model,
        task,
        cfg.hash(),
        run_seed,
        cfg.train.epochs,
        started.elapsed().as_secs_f64() * 1e3,
        RunFlags {
            dpd: cfg.train.dpd,
            aux: cfg.train.aux,
            noise_kind: cfg.noise.kind.name().to_string(),
            schedule: cfg.noise.schedule.name().to_string(),
        },
    )?;
    Ok(RunOutput {
        records,
        report,
        model,
    })
}

/// Trained parameters plus the config that produced them; self-contained for
/// later evaluation.
#[derive(Serialize, Deserialize)]
pub struct TrainedParams {
    pub config: RunConfig,
    pub seed: u64,
    pub model: ModelState,
}

impl TrainedParams {
    pub fn save(&self, path: &Path) -> Result<(), RunnerError> {
        let json = serde_json::to_string(self).map_err(|source| RunnerError::Json {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, json + "\n").map_err(|source| RunnerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let raw = std::fs::read_to_string(path).map_err(|source| RunnerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|source| RunnerError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

/// One row of the component ablation.
#[derive(Clone, Copy, Debug)]
pub struct Variant {
    pub name: &'static str,
    pub dpd: bool,
    pub aux: bool,
    pub noise_kind: NoiseKind,
}

/// The five ablation variants, baseline first.
pub fn ablation_variants() -> [Variant; 5] {
    [
        Variant {
            name: "baseline",
            dpd: false,
            aux: false,
            noise_kind: NoiseKind::Gm,
        },
        Variant {
            name: "+DPD(GM)",
            dpd: true,
            aux: false,
            noise_kind: NoiseKind::Gm,
        },
        Variant {
            name: "+DPD(GMM)",
            dpd: true,
            aux: false,
            noise_kind: NoiseKind::Gmm,
        },
        Variant {
            name: "+DPD(GM)+aux",
            dpd: true,
            aux: true,
            noise_kind: NoiseKind::Gm,
        },
        Variant {
            name: "P2C",
            dpd: true,
            aux: true,
            noise_kind: NoiseKind::Gmm,
        },
    ]
}

/// Config for one ablation variant; everything else stays at the base config.
pub fn apply_variant(cfg: &RunConfig, v: &Variant) -> RunConfig {
    let mut out = cfg.clone();
    out.train.dpd = v.dpd;
    out.train.aux = v.aux;
    out.noise.kind = v.noise_kind;
    out
}

/// Map `f` over `inputs` on up to `jobs` threads. Results come back in input
/// order regardless of scheduling.
pub fn run_parallel<T, R, F>(inputs: Vec<T>, jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.max(1).min(inputs.len().max(1));
    let n = inputs.len();
    let queue = Mutex::new((0..n).collect::<Vec<usize>>());
    let results: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = {
                    let mut q = queue.lock().unwrap();
                    match q.pop() {
                        Some(i) => i,
                        None => break,
                    }
                };
                let out = f(&inputs[idx]);
                *results[idx].lock().unwrap() = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

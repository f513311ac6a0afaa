//! The training loop: assembles the weighted objective, runs SGD over
//! annealed epochs, and logs per-step losses plus per-epoch wall time.
//!
//! Rng consumption per epoch is fixed: one shuffle, then per step the DPD
//! draw followed by the auxiliary eta draw. Both draws happen whether or not
//! the corresponding mechanism is enabled, so toggling a component (or
//! setting lambda to zero) never shifts any other draw: runs that differ
//! only in flags see identical shuffles and identical noise candidates.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor};
use crate::mapper::{draw_eta, AuxLossSpec};
use crate::model::{build_total_loss, ModelState, StepInputs};
use crate::noise::{perturb_prompts, NoiseError, NoiseModel, PerturbedPrompts, ScheduleSpec};
use crate::rng::RunRng;
use crate::synthdata::SynthTask;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step}; first non-finite tensor: {tensor}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        tensor: String,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("task has no training samples")]
    EmptyTrainingSet,
    #[error("frozen tensors changed during training")]
    FrozenMutated,
    #[error("curve log: {0}")]
    BadCurveLog(String),
    #[error("baseline epoch wall time is zero; overhead undefined")]
    DegenerateTiming,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(LrSchedule::Constant),
            "cosine" => Some(LrSchedule::Cosine),
            _ => None,
        }
    }

    fn value(&self, lr: f64, t: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
            }
        }
    }
}

/// Optimization settings of one run.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dpd: bool,
    pub aux: bool,
    pub aux_spec: AuxLossSpec,
    pub vis_from_noisy: bool,
    pub lr_schedule: LrSchedule,
}

/// One logged optimization step. `epoch_wall_ms` is the wall time of the
/// whole enclosing epoch, written once the epoch finishes.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_aux: f64,
    pub sigma_t: f64,
    pub epoch_wall_ms: f64,
}

/// Noise drawn for one step, before the graph is built.
pub struct StepNoise {
    pub perturbed: PerturbedPrompts,
    pub eta: Tensor,
}

/// Fixed consumption order: DPD draw, then eta, both unconditional.
pub fn draw_step_noise(
    model: &ModelState,
    nm: &NoiseModel,
    sigma_t: f64,
    st: &TrainSettings,
    rng: &mut RunRng,
) -> StepNoise {
    let perturbed = perturb_prompts(&model.prompts, nm, sigma_t, rng);
    let eta = draw_eta(st.aux_spec.sigma_aux, model.prompt_cfg.d_in(), rng);
    StepNoise { perturbed, eta }
}

/// One SGD step over a batch: build the objective, backprop, update.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    model: &mut ModelState,
    batch: &[(&Tensor, usize)],
    class_set: &[usize],
    sigma_t: f64,
    lr_t: f64,
    nm: &NoiseModel,
    st: &TrainSettings,
    epoch: usize,
    step: usize,
    rng: &mut RunRng,
) -> Result<StepRecord, TrainError> {
    let noise = draw_step_noise(model, nm, sigma_t, st, rng);

    let mut tape = Tape::new();
    let vars = model.param_vars(&mut tape);
    let inputs = StepInputs {
        batch,
        class_set,
        eps_cls: st.dpd.then_some(&noise.perturbed.draw_cls.epsilon),
        eps_att: st.dpd.then_some(&noise.perturbed.draw_att.epsilon),
        eta: &noise.eta,
        aux_enabled: st.aux,
        aux_spec: &st.aux_spec,
        aux_clean_target: None,
        vis_from_noisy: st.vis_from_noisy,
    };
    let lv = build_total_loss(&mut tape, model, &vars, &inputs)?;

    let loss_total = tape.value(lv.total).item();
    if !loss_total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch,
            step,
            tensor: tape
                .first_non_finite()
                .unwrap_or_else(|| "loss".to_string()),
        });
    }
    let loss_cls = tape.value(lv.cls).item();
    let loss_aux = lv.aux.map_or(0.0, |a| tape.value(a).item());

    let grads = tape.backward(lv.total)?;
    let grad_tensors: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get_or_zeros(v, &tape))
        .collect();
    model.apply_sgd(&grad_tensors, lr_t);

    Ok(StepRecord {
        epoch,
        step,
        loss_total,
        loss_cls,
        loss_aux,
        sigma_t,
        epoch_wall_ms: 0.0,
    })
}

/// Train for `epochs` epochs over the task's k-shot base training set.
/// Returns the per-step curve log; the model is updated in place.
pub fn run_training(
    model: &mut ModelState,
    task: &SynthTask,
    schedule: &ScheduleSpec,
    nm: &NoiseModel,
    st: &TrainSettings,
    rng: &mut RunRng,
) -> Result<Vec<StepRecord>, TrainError> {
    if task.train_x.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let frozen_before = model.frozen_checksum();
    let class_set = task.base_classes();
    let mut records = Vec::new();
    let mut global_step = 0usize;

    for t in 0..st.epochs {
        let sigma_t = schedule.sigma_at(t)?;
        let lr_t = st.lr_schedule.value(st.lr, t, st.epochs);
        let mut order: Vec<usize> = (0..task.train_x.len()).collect();
        order.shuffle(rng);

        let epoch_start = Instant::now();
        let first_record = records.len();
        for chunk in order.chunks(st.batch_size) {
            let batch: Vec<(&Tensor, usize)> = chunk
                .iter()
                .map(|&i| (&task.train_x[i], task.train_y[i]))
                .collect();
            let rec = training_step(
                model, &batch, &class_set, sigma_t, lr_t, nm, st, t, global_step, rng,
            )?;
            records.push(rec);
            global_step += 1;
        }
        let wall_ms = epoch_start.elapsed().as_secs_f64() * 1e3;
        for rec in records[first_record..].iter_mut() {
            rec.epoch_wall_ms = wall_ms;
        }
    }

    if model.frozen_checksum() != frozen_before {
        return Err(TrainError::FrozenMutated);
    }
    Ok(records)
}

/// Mean per-epoch wall-time increase of `p2c` over `baseline`, in percent.
pub fn overhead_report(
    baseline: &[StepRecord],
    p2c: &[StepRecord],
) -> Result<f64, TrainError> {
    let mean_epoch_wall = |log: &[StepRecord]| -> Result<f64, TrainError> {
        if log.is_empty() {
            return Err(TrainError::BadCurveLog("empty log".into()));
        }
        let mut walls: Vec<(usize, f64)> = Vec::new();
        for r in log {
            if walls.last().map(|(e, _)| *e) != Some(r.epoch) {
                walls.push((r.epoch, r.epoch_wall_ms));
            }
        }
        Ok(walls.iter().map(|(_, w)| w).sum::<f64>() / walls.len() as f64)
    };
    let epochs = |log: &[StepRecord]| log.last().map(|r| r.epoch + 1).unwrap_or(0);
    if epochs(baseline) != epochs(p2c) {
        return Err(TrainError::BadCurveLog(format!(
            "epoch counts differ: {} vs {}",
            epochs(baseline),
            epochs(p2c)
        )));
    }
    let base = mean_epoch_wall(baseline)?;
    let ours = mean_epoch_wall(p2c)?;
    if base == 0.0 {
        return Err(TrainError::DegenerateTiming);
    }
    Ok((ours / base - 1.0) * 100.0)
}

/// Nine significant digits, the curve-log float format.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

pub const CURVES_HEADER: &str = "epoch,step,loss_total,loss_cls,loss_aux,sigma_t,epoch_wall_ms";

/// Write the curve log as CSV (LF endings, losses at 9 significant digits).
pub fn write_curves_csv(records: &[StepRecord], path: &Path) -> Result<(), TrainError> {
    let io_err = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    let mut out = String::new();
    out.push_str(CURVES_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.3}\n",
            r.epoch,
            r.step,
            fmt_sig9(r.loss_total),
            fmt_sig9(r.loss_cls),
            fmt_sig9(r.loss_aux),
            fmt_sig9(r.sigma_t),
            r.epoch_wall_ms
        ));
    }
    f.write_all(out.as_bytes()).map_err(io_err)
}

/// Parse a curve log written by [`write_curves_csv`].
pub fn read_curves_csv(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let raw = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = raw.lines();
    match lines.next() {
        Some(h) if h == CURVES_HEADER => {}
        other => {
            return Err(TrainError::BadCurveLog(format!(
                "bad header in {}: {:?}",
                path.display(),
                other
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(TrainError::BadCurveLog(format!(
                "line {} has {} columns",
                i + 2,
                cols.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, TrainError> {
            s.parse().map_err(|_| {
                TrainError::BadCurveLog(format!("bad {what} {s:?} on line {}", i + 2))
            })
        };
        records.push(StepRecord {
            epoch: cols[0]
                .parse()
                .map_err(|_| TrainError::BadCurveLog(format!("bad epoch on line {}", i + 2)))?,
            step: cols[1]
                .parse()
                .map_err(|_| TrainError::BadCurveLog(format!("bad step on line {}", i + 2)))?,
            loss_total: parse_f(cols[2], "loss_total")?,
            loss_cls: parse_f(cols[3], "loss_cls")?,
            loss_aux: parse_f(cols[4], "loss_aux")?,
            sigma_t: parse_f(cols[5], "sigma_t")?,
            epoch_wall_ms: parse_f(cols[6], "epoch_wall_ms")?,
        });
    }
    Ok(records)
}

/// Trailing mean of `loss_total` over the last `window` steps of an epoch.
pub fn trailing_mean(records: &[StepRecord], epoch: usize, window: usize) -> Option<f64> {
    let of_epoch: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch == epoch)
        .map(|r| r.loss_total)
        .collect();
    if of_epoch.is_empty() {
        return None;
    }
    let w = window.min(of_epoch.len());
    Some(of_epoch[of_epoch.len() - w..].iter().sum::<f64>() / w as f64)
}

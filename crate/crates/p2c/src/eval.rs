//! Base-to-novel evaluation: split accuracies, harmonic mean, macro-F1, and
//! report assembly.
//!
//! Evaluation always runs on clean prompts (the API takes no noise source;
//! visual prompts are the mapper applied to the clean prompt vectors).
//! Novel-class predictions restrict the label space to the novel set: the
//! learned P_att/P_cls are composed with each novel class token zero-shot.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor};
use crate::mapper::map_forward;
use crate::model::ModelState;
use crate::prompts::{encode_class_texts, encode_image, logits_from_embeddings};
use crate::synthdata::SynthTask;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("no class has positive support")]
    AllSupportsZero,
    #[error(transparent)]
    Diff(#[from] DiffError),
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Base,
    Novel,
}

/// Confusion counts of one class within its split.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCounts {
    pub class: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.support() == 0 {
            0.0
        } else {
            self.tp as f64 / self.support() as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Result of evaluating one split.
#[derive(Clone, Debug)]
pub struct SplitEval {
    pub accuracy_pct: f64,
    pub counts: Vec<ClassCounts>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Predict a class (global index) for each sample, restricted to `class_set`.
/// Ties break toward the earlier class in the set.
pub fn predict(
    model: &ModelState,
    class_set: &[usize],
    samples: &[&Tensor],
) -> Result<Vec<usize>, DiffError> {
    if class_set.is_empty() {
        return Err(DiffError::EmptyInput);
    }
    let cfg = &model.prompt_cfg;
    let mut tape = Tape::new();
    let enc = model.encoders.vars(&mut tape);
    let pv = model.prompts.vars(&mut tape, false);
    let mv = model.mapper.vars(&mut tape, false);
    let clean_flat = tape.concat(&[pv.p_cls, pv.p_att])?;
    let p_v = map_forward(&mut tape, &mv, clean_flat)?;
    let txt = encode_class_texts(&mut tape, cfg, &enc, &pv, class_set)?;

    let mut out = Vec::with_capacity(samples.len());
    for x in samples {
        let xv = tape.leaf((*x).clone());
        let img = encode_image(&mut tape, &enc, xv, p_v)?;
        let lg = logits_from_embeddings(&mut tape, img, &txt, cfg.logit_scale)?;
        let d = tape.value(lg).data();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &v) in d.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        out.push(class_set[best.0]);
    }
    Ok(out)
}

/// Accuracy and per-class confusion counts from labeled predictions.
pub fn score_predictions(
    class_set: &[usize],
    labels: &[usize],
    predictions: &[usize],
) -> SplitEval {
    assert_eq!(labels.len(), predictions.len());
    let correct = labels
        .iter()
        .zip(predictions)
        .filter(|(y, p)| y == p)
        .count();
    let counts = class_set
        .iter()
        .map(|&c| {
            let tp = labels
                .iter()
                .zip(predictions)
                .filter(|(y, p)| **y == c && **p == c)
                .count();
            let fp = labels
                .iter()
                .zip(predictions)
                .filter(|(y, p)| **y != c && **p == c)
                .count();
            let fn_ = labels
                .iter()
                .zip(predictions)
                .filter(|(y, p)| **y == c && **p != c)
                .count();
            ClassCounts { class: c, tp, fp, fn_ }
        })
        .collect();
    SplitEval {
        accuracy_pct: 100.0 * correct as f64 / labels.len() as f64,
        counts,
        predictions: predictions.to_vec(),
        labels: labels.to_vec(),
    }
}

/// Evaluate one split of the task with clean prompts.
pub fn evaluate_split(
    model: &ModelState,
    task: &SynthTask,
    split: Split,
) -> Result<SplitEval, EvalError> {
    let class_set = match split {
        Split::Base => task.base_classes(),
        Split::Novel => task.novel_classes(),
    };
    let test = task.test_of(&class_set);
    if test.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let samples: Vec<&Tensor> = test.iter().map(|(x, _)| *x).collect();
    let labels: Vec<usize> = test.iter().map(|(_, y)| *y).collect();
    let predictions = predict(model, &class_set, &samples)?;
    Ok(score_predictions(&class_set, &labels, &predictions))
}

/// 2ab/(a+b) over percentages; 0 when both arguments are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Unweighted mean of per-class F1 (percent); zero-support classes are
/// excluded. Errors when every class has zero support.
pub fn macro_f1(counts: &[ClassCounts]) -> Result<f64, EvalError> {
    let with_support: Vec<&ClassCounts> =
        counts.iter().filter(|c| c.support() > 0).collect();
    if with_support.is_empty() {
        return Err(EvalError::AllSupportsZero);
    }
    let sum: f64 = with_support.iter().map(|c| c.f1()).sum();
    Ok(100.0 * sum / with_support.len() as f64)
}

/// Per-class row of the report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerClassRow {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Flags recorded for provenance.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunFlags {
    pub dpd: bool,
    pub aux: bool,
    pub noise_kind: String,
    pub schedule: String,
}

/// The run report. Percentages carry full precision here; human-facing
/// output rounds to one decimal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub macro_f1_base: f64,
    pub per_class: Vec<PerClassRow>,
    pub epochs: usize,
    pub total_wall_ms: f64,
    pub flags: RunFlags,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).map_err(|source| EvalError::Json {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, json + "\n").map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let raw = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|source| EvalError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Evaluate both splits and assemble the report.
pub fn build_report(
    model: &ModelState,
    task: &SynthTask,
    config_hash: String,
    seed: u64,
    epochs: usize,
    total_wall_ms: f64,
    flags: RunFlags,
) -> Result<EvalReport, EvalError> {
    let base = evaluate_split(model, task, Split::Base)?;
    let novel = evaluate_split(model, task, Split::Novel)?;
    let macro_f1_base = macro_f1(&base.counts)?;
    let per_class = base
        .counts
        .iter()
        .map(|c| PerClassRow {
            class: c.class,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            support: c.support(),
        })
        .collect();
    Ok(EvalReport {
        config_hash,
        seed,
        base_acc: base.accuracy_pct,
        novel_acc: novel.accuracy_pct,
        hm: harmonic_mean(base.accuracy_pct, novel.accuracy_pct),
        macro_f1_base,
        per_class,
        epochs,
        total_wall_ms,
        flags,
    })
}

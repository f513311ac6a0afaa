//! Run configuration: nested sections with documented defaults, strict
//! parsing (unknown keys abort before any computation), validation with
//! key-precise messages, and a canonical hash for provenance.
//!
//! The config file is JSON. Every key is optional and falls back to its
//! default, so `{}` is a valid config. Defaults follow the best rows of the
//! hyperparameter study: sigmoid annealing, sigma_max 0.015, sigma_aux 0.01,
//! lambda 0.1, s_H 2, SGD at 3.5e-3 with batch 4 and 16 shots per base class.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mapper::AuxLossSpec;
use crate::noise::{NoiseKind, NoiseModel, ScheduleKind, ScheduleSpec};
use crate::prompts::PromptConfig;
use crate::synthdata::TaskSpec;
use crate::train::{LrSchedule, TrainSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for {key}: {why}")]
    Invalid { key: &'static str, why: String },
}

/// Prompt/encoder dimensions (section `prompts`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsCfg {
    /// token embedding dimension (default 8)
    pub d_tok: usize,
    /// class-prompt token count (default 2)
    pub tl_cls: usize,
    /// attribute-prompt token count per attribute (default 2)
    pub tl_att: usize,
    /// number of universal attributes (default 2)
    pub n_att: usize,
    /// joint embedding dimension (default 16)
    pub d_e: usize,
    /// encoder hidden dimension (default 32)
    pub d_h: usize,
    /// frozen cosine temperature (default 1/0.07)
    pub logit_scale: f64,
    /// std of the non-compositional class-token part (default 0.1)
    pub token_idio_std: f64,
}

impl Default for PromptsCfg {
    fn default() -> Self {
        PromptsCfg {
            d_tok: 8,
            tl_cls: 2,
            tl_att: 2,
            n_att: 2,
            d_e: 16,
            d_h: 32,
            logit_scale: 1.0 / 0.07,
            token_idio_std: 0.1,
        }
    }
}

/// Noise generator and annealing (section `noise`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseCfg {
    /// "gm" or "gmm" (default "gmm")
    pub kind: NoiseKind,
    /// mixture components; forced to 1 for "gm" (default 3)
    #[serde(alias = "K")]
    pub k: usize,
    /// peak noise scale (default 0.015)
    pub sigma_max: f64,
    /// schedule shape: constant | linear | cosine | sigmoid (default sigmoid)
    pub schedule: ScheduleKind,
    /// sigmoid steepness (default 12)
    pub sigmoid_k: f64,
    /// std of the auxiliary-loss corruption, consumed by the mapper (default 0.01)
    pub sigma_aux: f64,
    /// one draw shared across prompt tensors instead of independent draws (default false)
    pub shared_draw: bool,
}

impl Default for NoiseCfg {
    fn default() -> Self {
        NoiseCfg {
            kind: NoiseKind::Gmm,
            k: 3,
            sigma_max: 0.015,
            schedule: ScheduleKind::Sigmoid,
            sigmoid_k: 12.0,
            sigma_aux: 0.01,
            shared_draw: false,
        }
    }
}

/// The text-to-visual mapper and its auxiliary loss (section `mapper`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperCfg {
    /// hidden scale factor (default 2)
    #[serde(alias = "s_H")]
    pub s_h: usize,
    /// auxiliary loss weight, may be negative (default 0.1)
    pub lambda: f64,
    /// overrides noise.sigma_aux when set (default unset)
    pub sigma_aux: Option<f64>,
    /// detach the clean reconstruction target (default true)
    pub detach_clean: bool,
    /// derive classification visual prompts from the noised prompts (default true)
    pub vis_from_noisy: bool,
    /// let the auxiliary loss update the prompts, not just the mapper (default true)
    pub aux_updates_prompts: bool,
}

impl Default for MapperCfg {
    fn default() -> Self {
        MapperCfg {
            s_h: 2,
            lambda: 0.1,
            sigma_aux: None,
            detach_clean: true,
            vis_from_noisy: true,
            aux_updates_prompts: true,
        }
    }
}

/// Optimization (section `train`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    /// SGD learning rate (default 3.5e-3)
    pub lr: f64,
    /// batch size (default 4)
    pub batch_size: usize,
    /// epochs T (default 100)
    pub epochs: usize,
    /// run seed (default 42)
    pub seed: u64,
    /// "constant" or "cosine" (default "constant")
    pub lr_schedule: String,
    /// enable dynamic prompt denoising (default true)
    pub dpd: bool,
    /// enable the auxiliary mapper loss (default true)
    pub aux: bool,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lr: 3.5e-3,
            batch_size: 4,
            epochs: 100,
            seed: 42,
            lr_schedule: "constant".into(),
            dpd: true,
            aux: true,
        }
    }
}

/// Synthetic task generation (section `data`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataCfg {
    /// task seed (default 7)
    pub seed: u64,
    /// base class count (default 8)
    pub c_base: usize,
    /// novel class count (default 8)
    pub c_novel: usize,
    /// attribute factors (default 2)
    pub n_factors: usize,
    /// values per factor (default 4)
    pub values_per_factor: usize,
    /// feature dimension (default 16)
    pub d_x: usize,
    /// intra-class sample noise std (default 0.35)
    pub noise_std: f64,
    /// train shots per base class (default 16)
    pub shots_k: usize,
    /// test samples per class (default 64)
    pub test_per_class: usize,
    /// std of the per-class non-compositional offset (default 0.15)
    pub class_offset_std: f64,
    /// optional per-class test-count overrides as [class, count] pairs
    pub test_count_override: Vec<(usize, usize)>,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg {
            seed: 7,
            c_base: 8,
            c_novel: 8,
            n_factors: 2,
            values_per_factor: 4,
            d_x: 16,
            noise_std: 0.35,
            shots_k: 16,
            test_per_class: 64,
            class_offset_std: 0.15,
            test_count_override: vec![],
        }
    }
}

/// Report emission (section `eval`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    /// curve downsampling stride for plot data (default 10)
    pub downsample: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg { downsample: 10 }
    }
}

/// Whole run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompts: PromptsCfg,
    pub noise: NoiseCfg,
    pub mapper: MapperCfg,
    pub train: TrainCfg,
    pub data: DataCfg,
    pub eval: EvalCfg,
}

impl RunConfig {
    /// Parse a config file strictly; unknown keys and type errors abort with
    /// line/column positions.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&raw).map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every invariant, naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(key: &'static str, why: String) -> Result<(), ConfigError> {
            Err(ConfigError::Invalid { key, why })
        }
        let p = &self.prompts;
        for (key, v) in [
            ("prompts.d_tok", p.d_tok),
            ("prompts.tl_cls", p.tl_cls),
            ("prompts.tl_att", p.tl_att),
            ("prompts.d_e", p.d_e),
            ("prompts.d_h", p.d_h),
        ] {
            if v < 1 {
                return bad(key, format!("must be >= 1, got {v}"));
            }
        }
        if !(p.logit_scale > 0.0) {
            return bad(
                "prompts.logit_scale",
                format!("must be > 0, got {}", p.logit_scale),
            );
        }
        if p.token_idio_std < 0.0 {
            return bad("prompts.token_idio_std", "must be >= 0".into());
        }
        let n = &self.noise;
        if n.k < 1 {
            return bad("noise.k", format!("must be >= 1, got {}", n.k));
        }
        if !(n.sigma_max >= 0.0) {
            return bad("noise.sigma_max", format!("must be >= 0, got {}", n.sigma_max));
        }
        if !(n.sigmoid_k > 0.0) {
            return bad("noise.sigmoid_k", format!("must be > 0, got {}", n.sigmoid_k));
        }
        if !(n.sigma_aux >= 0.0) {
            return bad("noise.sigma_aux", format!("must be >= 0, got {}", n.sigma_aux));
        }
        let m = &self.mapper;
        if m.s_h < 1 {
            return bad("mapper.s_h", format!("must be >= 1, got {}", m.s_h));
        }
        if let Some(sa) = m.sigma_aux {
            if !(sa >= 0.0) {
                return bad("mapper.sigma_aux", format!("must be >= 0, got {sa}"));
            }
        }
        let t = &self.train;
        if !(t.lr >= 0.0) {
            return bad("train.lr", format!("must be >= 0, got {}", t.lr));
        }
        if t.batch_size < 1 {
            return bad("train.batch_size", "must be >= 1".into());
        }
        if LrSchedule::parse(&t.lr_schedule).is_none() {
            return bad(
                "train.lr_schedule",
                format!("must be \"constant\" or \"cosine\", got {:?}", t.lr_schedule),
            );
        }
        let d = &self.data;
        for (key, v) in [
            ("data.c_base", d.c_base),
            ("data.c_novel", d.c_novel),
            ("data.n_factors", d.n_factors),
            ("data.d_x", d.d_x),
            ("data.shots_k", d.shots_k),
            ("data.test_per_class", d.test_per_class),
        ] {
            if v < 1 {
                return bad(key, format!("must be >= 1, got {v}"));
            }
        }
        if d.values_per_factor < 2 {
            return bad(
                "data.values_per_factor",
                format!("must be >= 2, got {}", d.values_per_factor),
            );
        }
        if !(d.noise_std >= 0.0) {
            return bad("data.noise_std", format!("must be >= 0, got {}", d.noise_std));
        }
        if !(d.class_offset_std >= 0.0) {
            return bad("data.class_offset_std", "must be >= 0".into());
        }
        if self.eval.downsample < 1 {
            return bad("eval.downsample", "must be >= 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization (struct field order is the
    /// canonical key order).
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Effective sigma_aux: `mapper.sigma_aux` wins when set.
    pub fn sigma_aux(&self) -> f64 {
        self.mapper.sigma_aux.unwrap_or(self.noise.sigma_aux)
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            d_tok: self.prompts.d_tok,
            tl_cls: self.prompts.tl_cls,
            tl_att: self.prompts.tl_att,
            n_att: self.prompts.n_att,
            d_e: self.prompts.d_e,
            d_h: self.prompts.d_h,
            logit_scale: self.prompts.logit_scale,
            token_idio_std: self.prompts.token_idio_std,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            c_base: self.data.c_base,
            c_novel: self.data.c_novel,
            n_factors: self.data.n_factors,
            values_per_factor: self.data.values_per_factor,
            d_x: self.data.d_x,
            noise_std: self.data.noise_std,
            shots_k: self.data.shots_k,
            test_per_class: self.data.test_per_class,
            class_offset_std: self.data.class_offset_std,
            test_count_override: self.data.test_count_override.clone(),
        }
    }

    pub fn schedule_spec(&self) -> Result<ScheduleSpec, ConfigError> {
        ScheduleSpec::new(
            self.noise.schedule,
            self.noise.sigma_max,
            self.train.epochs.max(1),
            self.noise.sigmoid_k,
        )
        .map_err(|e| ConfigError::Invalid {
            key: "noise.schedule",
            why: e.to_string(),
        })
    }

    /// Build the noise model; GMM component means derive from the run seed.
    pub fn noise_model(&self, run_seed: u64) -> NoiseModel {
        let nm = match self.noise.kind {
            NoiseKind::Gm => NoiseModel::gm(),
            NoiseKind::Gmm => {
                NoiseModel::gmm(self.noise.k, crate::rng::derive_seed(run_seed, 0xA11))
            }
        };
        nm.with_shared_draw(self.noise.shared_draw)
    }

    pub fn aux_spec(&self) -> AuxLossSpec {
        AuxLossSpec {
            sigma_aux: self.sigma_aux(),
            lambda: self.mapper.lambda,
            detach_clean: self.mapper.detach_clean,
            aux_updates_prompts: self.mapper.aux_updates_prompts,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            dpd: self.train.dpd,
            aux: self.train.aux,
            aux_spec: self.aux_spec(),
            vis_from_noisy: self.mapper.vis_from_noisy,
            lr_schedule: LrSchedule::parse(&self.train.lr_schedule)
                .expect("validated lr_schedule"),
        }
    }
}

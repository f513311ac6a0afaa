//! Dynamic prompt denoising: annealed noise scales and the GM/GMM generator.
//!
//! The noise scale at epoch t is `sigma_t = sigma_max * S(t, T)` where S is
//! one of four schedule shapes. All shapes satisfy S(0) = 1; the annealing
//! shapes (linear, cosine, sigmoid) also satisfy S(T) = 0, and the sigmoid
//! shape hits exactly 0.5 at t = T/2 by construction.
//!
//! Perturbations are drawn per learnable tensor: pick a mixture component,
//! then `eps = sigma_t * mu_k + sigma_t * rho_k * z` with z iid standard
//! normal in row-major order. Component means are unit-scale vectors fixed
//! for the whole run and recentred so the mixture stays mean-zero; they are
//! regenerated deterministically from a dedicated seed whenever needed, so
//! sampling never consumes main-stream draws for them.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::prompts::PromptSet;
use crate::rng::{fill_standard_normal, rng_from_seed};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("epoch {t} out of range 0..={total}")]
    EpochOutOfRange { t: usize, total: usize },
    #[error("invalid schedule spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Cosine,
    Sigmoid,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(ScheduleKind::Constant),
            "linear" => Some(ScheduleKind::Linear),
            "cosine" => Some(ScheduleKind::Cosine),
            "sigmoid" => Some(ScheduleKind::Sigmoid),
            _ => None,
        }
    }
}

/// Annealing schedule: shape, peak scale, horizon, sigmoid steepness.
#[derive(Clone, Debug)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub sigma_max: f64,
    pub total_epochs: usize,
    pub sigmoid_k: f64,
}

impl ScheduleSpec {
    pub fn new(
        kind: ScheduleKind,
        sigma_max: f64,
        total_epochs: usize,
        sigmoid_k: f64,
    ) -> Result<Self, NoiseError> {
        if !(sigma_max >= 0.0) {
            return Err(NoiseError::InvalidSpec(format!(
                "sigma_max must be >= 0, got {sigma_max}"
            )));
        }
        if total_epochs < 1 {
            return Err(NoiseError::InvalidSpec("total epochs must be >= 1".into()));
        }
        if !(sigmoid_k > 0.0) {
            return Err(NoiseError::InvalidSpec(format!(
                "sigmoid steepness must be > 0, got {sigmoid_k}"
            )));
        }
        Ok(ScheduleSpec {
            kind,
            sigma_max,
            total_epochs,
            sigmoid_k,
        })
    }

    /// S(t, T) in [0, 1].
    pub fn schedule_value(&self, t: usize) -> Result<f64, NoiseError> {
        let total = self.total_epochs;
        if t > total {
            return Err(NoiseError::EpochOutOfRange { t, total });
        }
        let u = t as f64 / total as f64;
        Ok(match self.kind {
            ScheduleKind::Constant => 1.0,
            ScheduleKind::Linear => 1.0 - u,
            ScheduleKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * u).cos()),
            ScheduleKind::Sigmoid => {
                // (r(t) - r(T)) / (r(0) - r(T)) for r(t) = 1/(1 + exp(k(u - 1/2))),
                // written via tanh so the endpoints and midpoint are exact:
                // r(t) - 1/2 = tanh(k(1/2 - u)/2)/2.
                let g = 0.5 * (0.5 * self.sigmoid_k * (0.5 - u)).tanh();
                let g0 = 0.5 * (0.25 * self.sigmoid_k).tanh();
                (g + g0) / (2.0 * g0)
            }
        })
    }

    /// sigma_t = sigma_max * S(t, T).
    pub fn sigma_at(&self, t: usize) -> Result<f64, NoiseError> {
        Ok(self.sigma_max * self.schedule_value(t)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// single zero-mean Gaussian
    Gm,
    /// Gaussian mixture
    Gmm,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gm => "gm",
            NoiseKind::Gmm => "gmm",
        }
    }
}

/// Mixture noise generator.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// component weights, nonnegative, summing to 1
    pub weights: Vec<f64>,
    /// per-component std ratio rho_k
    pub std_ratios: Vec<f64>,
    /// std of the unit-scale component means (0 for GM)
    mean_scale: f64,
    /// seed of the dedicated mean stream
    mean_seed: u64,
    /// one draw across all learnable tensors instead of one per tensor
    pub shared_draw: bool,
}

/// One structurally-matched noise draw.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub epsilon: Tensor,
    pub sigma_t: f64,
    pub component: usize,
}

/// Noisy prompt copies plus the draws that produced them.
#[derive(Clone, Debug)]
pub struct PerturbedPrompts {
    pub p_cls: Tensor,
    pub p_att: Tensor,
    pub draw_cls: NoiseDraw,
    pub draw_att: NoiseDraw,
}

impl NoiseModel {
    /// Pure Gaussian: K = 1, mu = 0, rho = 1.
    pub fn gm() -> Self {
        NoiseModel {
            kind: NoiseKind::Gm,
            weights: vec![1.0],
            std_ratios: vec![1.0],
            mean_scale: 0.0,
            mean_seed: 0,
            shared_draw: false,
        }
    }

    /// Uniform-weight mixture with K components; unit-scale means are drawn
    /// from N(0, 0.25 I) on the dedicated mean stream and recentred so the
    /// mixture is exactly mean-zero.
    pub fn gmm(k: usize, mean_seed: u64) -> Self {
        assert!(k >= 1);
        NoiseModel {
            kind: NoiseKind::Gmm,
            weights: vec![1.0 / k as f64; k],
            std_ratios: vec![1.0; k],
            mean_scale: 0.5,
            mean_seed,
            shared_draw: false,
        }
    }

    pub fn with_shared_draw(mut self, shared: bool) -> Self {
        self.shared_draw = shared;
        self
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Unit-scale component means for a target shape, recentred so that
    /// sum_k pi_k mu_k = 0. Deterministic in (mean_seed, shape).
    pub fn component_means(&self, shape: &[usize]) -> Vec<Tensor> {
        let k = self.components();
        if self.mean_scale == 0.0 {
            return vec![Tensor::zeros(shape); k];
        }
        let mut rng = rng_from_seed(self.mean_seed ^ shape_tag(shape));
        let mut means: Vec<Tensor> = (0..k)
            .map(|_| Tensor::randn(shape, self.mean_scale, &mut rng))
            .collect();
        let numel = means[0].numel();
        let mut centre = vec![0.0; numel];
        for (m, w) in means.iter().zip(&self.weights) {
            for (c, v) in centre.iter_mut().zip(m.data()) {
                *c += w * v;
            }
        }
        for m in means.iter_mut() {
            for (v, c) in m.data_mut().iter_mut().zip(&centre) {
                *v -= c;
            }
        }
        means
    }

    /// Draw eps = sigma_t * mu_k + sigma_t * rho_k * z for a sampled k.
    /// sigma_t = 0 short-circuits to the zero tensor without consuming draws.
    pub fn sample<R: Rng>(&self, sigma_t: f64, shape: &[usize], rng: &mut R) -> NoiseDraw {
        assert!(sigma_t >= 0.0, "sigma_t must be nonnegative");
        if sigma_t == 0.0 {
            return NoiseDraw {
                epsilon: Tensor::zeros(shape),
                sigma_t,
                component: 0,
            };
        }
        let component = self.pick_component(rng);
        let means = self.component_means(shape);
        let rho = self.std_ratios[component];
        let mut eps = Tensor::zeros(shape);
        fill_standard_normal(rng, eps.data_mut());
        for (e, m) in eps.data_mut().iter_mut().zip(means[component].data()) {
            *e = sigma_t * m + sigma_t * rho * *e;
        }
        NoiseDraw {
            epsilon: eps,
            sigma_t,
            component,
        }
    }

    fn pick_component<R: Rng>(&self, rng: &mut R) -> usize {
        // one uniform is consumed even for K = 1, so GM and GMM runs stay on
        // the same stream and differ only in the noise applied
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.components() - 1
    }
}

fn shape_tag(shape: &[usize]) -> u64 {
    let mut tag = 0xA076_1D64_78BD_642Fu64;
    for &d in shape {
        tag = tag
            .rotate_left(17)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(d as u64);
    }
    tag
}

/// Perturb the learnable prompt tensors (noisy = clean + eps).
///
/// Each learnable tensor gets an independent draw unless `shared_draw` is
/// set, in which case one flat draw over [P_cls | P_att] is split back into
/// the two shapes (one mixture component for both). The originals are not
/// touched; the noise is a constant in backprop.
pub fn perturb_prompts<R: Rng>(
    ps: &PromptSet,
    nm: &NoiseModel,
    sigma_t: f64,
    rng: &mut R,
) -> PerturbedPrompts {
    let cls_shape = ps.p_cls.shape().to_vec();
    let att_shape = ps.p_att.shape().to_vec();
    let (draw_cls, draw_att) = if nm.shared_draw {
        let n_cls = ps.p_cls.numel();
        let n_att = ps.p_att.numel();
        let joint = nm.sample(sigma_t, &[n_cls + n_att], rng);
        let eps_cls = Tensor::new(cls_shape.clone(), joint.epsilon.data()[..n_cls].to_vec())
            .expect("split shape");
        let eps_att = Tensor::new(att_shape.clone(), joint.epsilon.data()[n_cls..].to_vec())
            .expect("split shape");
        (
            NoiseDraw {
                epsilon: eps_cls,
                sigma_t,
                component: joint.component,
            },
            NoiseDraw {
                epsilon: eps_att,
                sigma_t,
                component: joint.component,
            },
        )
    } else {
        let d_cls = nm.sample(sigma_t, &cls_shape, rng);
        let d_att = nm.sample(sigma_t, &att_shape, rng);
        (d_cls, d_att)
    };

    let mut p_cls = ps.p_cls.clone();
    for (v, e) in p_cls.data_mut().iter_mut().zip(draw_cls.epsilon.data()) {
        *v += e;
    }
    let mut p_att = ps.p_att.clone();
    for (v, e) in p_att.data_mut().iter_mut().zip(draw_att.epsilon.data()) {
        *v += e;
    }
    PerturbedPrompts {
        p_cls,
        p_att,
        draw_cls,
        draw_att,
    }
}

//! The trainable text-to-visual prompt map and its denoising-autoencoder
//! auxiliary loss.
//!
//! The map is a one-hidden-layer MLP whose width is `s_H` times its input:
//! `F(p) = W2 relu(W1 p + b1) + b2` with input the flattened learnable
//! prompts `[P_cls | P_att]` and output the flattened visual prompts. The
//! auxiliary loss feeds F a Gaussian-corrupted copy of the prompts and asks
//! it to reproduce the clean output: `L_aux = MSE(F(p + eta), F(p))`, with
//! the clean branch detached by default so it acts as a reconstruction
//! target rather than a second moving head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::prompts::PromptSet;
use crate::rng::fill_standard_normal;

/// Trainable two-layer map from flattened text prompts to visual prompts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VlMapper {
    /// [s_h * d_in, d_in]
    pub w1: Tensor,
    /// [s_h * d_in]
    pub b1: Tensor,
    /// [d_out, s_h * d_in]
    pub w2: Tensor,
    /// [d_out]
    pub b2: Tensor,
    pub s_h: usize,
}

impl VlMapper {
    /// N(0, 1/fan_in) weights, zero biases.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, s_h: usize, rng: &mut R) -> Self {
        assert!(s_h >= 1);
        let hidden = s_h * d_in;
        VlMapper {
            w1: Tensor::randn(&[hidden, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[d_out, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d_out]),
            s_h,
        }
    }

    /// All-zero weights and biases: the constant zero map.
    pub fn zeroed(d_in: usize, d_out: usize, s_h: usize) -> Self {
        let hidden = s_h * d_in;
        VlMapper {
            w1: Tensor::zeros(&[hidden, d_in]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[d_out, hidden]),
            b2: Tensor::zeros(&[d_out]),
            s_h,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn vars(&self, tape: &mut Tape, learnable: bool) -> MapperVars {
        let mk = |tape: &mut Tape, t: &Tensor| {
            if learnable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        MapperVars {
            w1: mk(tape, &self.w1),
            b1: mk(tape, &self.b1),
            w2: mk(tape, &self.w2),
            b2: mk(tape, &self.b2),
        }
    }
}

/// Mapper weights as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct MapperVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Auxiliary-loss parameters.
#[derive(Clone, Debug)]
pub struct AuxLossSpec {
    /// std of the corruption noise eta (>= 0)
    pub sigma_aux: f64,
    /// loss weight; may be negative
    pub lambda: f64,
    /// treat the clean output as a constant target
    pub detach_clean: bool,
    /// let gradients from the recon branch reach the prompts
    pub aux_updates_prompts: bool,
}

impl Default for AuxLossSpec {
    fn default() -> Self {
        AuxLossSpec {
            sigma_aux: 0.01,
            lambda: 0.1,
            detach_clean: true,
            aux_updates_prompts: true,
        }
    }
}

/// F(p) = W2 relu(W1 p + b1) + b2, flat output of length d_out
/// (rows of the visual prompt matrix laid out contiguously).
pub fn map_forward(tape: &mut Tape, mv: &MapperVars, p_flat: Var) -> Result<Var, DiffError> {
    let h = tape.affine(p_flat, mv.w1, mv.b1)?;
    let h = tape.relu_elem(h);
    tape.affine(h, mv.w2, mv.b2)
}

/// The corruption noise for the auxiliary loss. Always consumes `d_in`
/// normals so the rng stream advances identically whether or not the loss is
/// used or `sigma_aux` is zero.
pub fn draw_eta<R: Rng>(sigma_aux: f64, d_in: usize, rng: &mut R) -> Tensor {
    let mut eta = Tensor::zeros(&[d_in]);
    fill_standard_normal(rng, eta.data_mut());
    for v in eta.data_mut() {
        *v *= sigma_aux;
    }
    eta
}

/// Build the reconstruction loss on the tape:
/// clean = F(p), recon = F(p + eta), loss = MSE(recon, clean).
///
/// With `detach_clean` the clean output value becomes a constant leaf so no
/// gradient flows through the target branch; a finite-difference check of
/// the surrounding graph must then hold that target fixed at the base point,
/// which is what `frozen_target` is for (training passes `None` and lets the
/// target be the clean output at the current parameters). With
/// `aux_updates_prompts` false, the corrupted input is also severed from the
/// prompt leaves, so only the mapper weights learn from this loss.
pub fn aux_denoising_loss_graph(
    tape: &mut Tape,
    mv: &MapperVars,
    clean_flat: Var,
    eta: &Tensor,
    spec: &AuxLossSpec,
    frozen_target: Option<&Tensor>,
) -> Result<Var, DiffError> {
    let target = match (spec.detach_clean, frozen_target) {
        (true, Some(t)) => tape.leaf(t.clone()),
        (true, None) => {
            let clean_out = map_forward(tape, mv, clean_flat)?;
            let frozen = tape.value(clean_out).clone();
            tape.leaf(frozen)
        }
        (false, _) => map_forward(tape, mv, clean_flat)?,
    };
    let noisy_in = if spec.aux_updates_prompts {
        tape.add_const(clean_flat, eta)?
    } else {
        let mut v = tape.value(clean_flat).clone();
        for (a, e) in v.data_mut().iter_mut().zip(eta.data()) {
            *a += e;
        }
        tape.leaf(v)
    };
    let recon = map_forward(tape, mv, noisy_in)?;
    tape.mse(recon, target)
}

/// Value-level auxiliary loss for a prompt set (fresh tape, own eta draw).
pub fn aux_denoising_loss<R: Rng>(
    mapper: &VlMapper,
    ps: &PromptSet,
    spec: &AuxLossSpec,
    rng: &mut R,
) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let mv = mapper.vars(&mut tape, false);
    let pc = tape.leaf(ps.p_cls.clone());
    let pa = tape.leaf(ps.p_att.clone());
    let clean = tape.concat(&[pc, pa])?;
    let eta = draw_eta(spec.sigma_aux, mapper.d_in(), rng);
    let loss = aux_denoising_loss_graph(&mut tape, &mv, clean, &eta, spec, None)?;
    Ok(tape.value(loss).item())
}

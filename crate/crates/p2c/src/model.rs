//! Assembly of prompts, frozen encoders, and the mapper into one trainable
//! state, plus the builder for the full training objective
//! `L_total = L_cls + lambda * L_aux`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::mapper::{aux_denoising_loss_graph, map_forward, AuxLossSpec, MapperVars, VlMapper};
use crate::prompts::{
    encode_class_texts, encode_image, logits_from_embeddings, FrozenEncoders, PromptConfig,
    PromptSet, PromptVars,
};

/// Learnable tensors in their canonical order.
pub const PARAM_NAMES: [&str; 6] = [
    "p_cls",
    "p_att",
    "mapper_w1",
    "mapper_b1",
    "mapper_w2",
    "mapper_b2",
];

/// Everything the classifier needs: learnable prompts and mapper weights,
/// frozen anchors/class tokens/encoders, and the dimensions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelState {
    pub prompt_cfg: PromptConfig,
    pub prompts: PromptSet,
    pub encoders: FrozenEncoders,
    pub mapper: VlMapper,
}

impl ModelState {
    /// Draw a fresh model from one rng stream: the prototype-to-token
    /// projection, then prompts, encoders, and mapper weights.
    pub fn init<R: Rng>(
        cfg: &PromptConfig,
        d_x: usize,
        s_h: usize,
        prototypes: &[Tensor],
        rng: &mut R,
    ) -> Self {
        let token_proj = PromptSet::draw_token_proj(cfg, d_x, rng);
        let prompts = PromptSet::init(cfg, prototypes, &token_proj, rng);
        let encoders = FrozenEncoders::init(cfg, d_x, &token_proj, rng);
        let mapper = VlMapper::init(cfg.d_in(), cfg.d_in(), s_h, rng);
        ModelState {
            prompt_cfg: cfg.clone(),
            prompts,
            encoders,
            mapper,
        }
    }

    /// Clones of the learnable tensors in [`PARAM_NAMES`] order.
    pub fn param_values(&self) -> Vec<Tensor> {
        vec![
            self.prompts.p_cls.clone(),
            self.prompts.p_att.clone(),
            self.mapper.w1.clone(),
            self.mapper.b1.clone(),
            self.mapper.w2.clone(),
            self.mapper.b2.clone(),
        ]
    }

    pub fn set_param_values(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), 6);
        self.prompts.p_cls = values[0].clone();
        self.prompts.p_att = values[1].clone();
        self.mapper.w1 = values[2].clone();
        self.mapper.b1 = values[3].clone();
        self.mapper.w2 = values[4].clone();
        self.mapper.b2 = values[5].clone();
    }

    /// Parameter leaves on a tape, in [`PARAM_NAMES`] order.
    pub fn param_vars(&self, tape: &mut Tape) -> Vec<Var> {
        self.param_values()
            .into_iter()
            .map(|t| tape.param(t))
            .collect()
    }

    /// theta <- theta - lr * grad for every learnable tensor.
    pub fn apply_sgd(&mut self, grads: &[Tensor], lr: f64) {
        let mut values = self.param_values();
        for (v, g) in values.iter_mut().zip(grads) {
            assert_eq!(v.shape(), g.shape());
            for (a, b) in v.data_mut().iter_mut().zip(g.data()) {
                *a -= lr * b;
            }
        }
        self.set_param_values(&values);
    }

    /// Clean visual prompts F(flatten([P_cls | P_att])) at the current
    /// parameters, for freezing the detached reconstruction target.
    pub fn clean_visual_prompts(&self) -> Result<Tensor, DiffError> {
        let mut tape = Tape::new();
        let mv = self.mapper.vars(&mut tape, false);
        let pc = tape.leaf(self.prompts.p_cls.clone());
        let pa = tape.leaf(self.prompts.p_att.clone());
        let flat = tape.concat(&[pc, pa])?;
        let out = map_forward(&mut tape, &mv, flat)?;
        Ok(tape.value(out).clone())
    }

    /// Checksum over every frozen tensor (anchors, class tokens, encoders).
    pub fn frozen_checksum(&self) -> String {
        format!("{}|{}", self.prompts.frozen_checksum(), self.encoders.checksum())
    }
}

/// Frozen per-evaluation inputs of the training objective: the batch and the
/// pre-drawn noise. With `eps` set the classification pass runs on perturbed
/// prompts; `eta` is the corruption for the auxiliary loss (drawn even when
/// the loss is disabled, so rng consumption does not depend on the flag).
pub struct StepInputs<'a> {
    pub batch: &'a [(&'a Tensor, usize)],
    /// classes the softmax runs over; labels must be members
    pub class_set: &'a [usize],
    pub eps_cls: Option<&'a Tensor>,
    pub eps_att: Option<&'a Tensor>,
    pub eta: &'a Tensor,
    pub aux_enabled: bool,
    pub aux_spec: &'a AuxLossSpec,
    /// base-point clean mapper output; lets a finite-difference run honor the
    /// stop-gradient on the detached reconstruction target
    pub aux_clean_target: Option<&'a Tensor>,
    /// derive visual prompts from the perturbed prompts instead of the clean ones
    pub vis_from_noisy: bool,
}

/// Loss nodes of one step.
#[derive(Debug)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub aux: Option<Var>,
}

/// Build the full objective on a tape from parameter leaves in
/// [`PARAM_NAMES`] order. Frozen tensors come from `model`; learnables come
/// only from `param_vars`, so the same builder serves training and the
/// finite-difference checker.
pub fn build_total_loss(
    tape: &mut Tape,
    model: &ModelState,
    param_vars: &[Var],
    inputs: &StepInputs,
) -> Result<LossVars, DiffError> {
    assert_eq!(param_vars.len(), 6);
    if inputs.batch.is_empty() {
        return Err(DiffError::EmptyInput);
    }
    let cfg = &model.prompt_cfg;
    let enc = model.encoders.vars(tape);
    let anchors = tape.leaf(model.prompts.anchors.clone());
    let class_tokens = tape.leaf(model.prompts.class_tokens.clone());
    let (p_cls, p_att) = (param_vars[0], param_vars[1]);
    let mv = MapperVars {
        w1: param_vars[2],
        b1: param_vars[3],
        w2: param_vars[4],
        b2: param_vars[5],
    };

    // Perturbed prompts for the classification pass (identity Jacobian).
    let (pt_cls, pt_att) = match (inputs.eps_cls, inputs.eps_att) {
        (Some(ec), Some(ea)) => (tape.add_const(p_cls, ec)?, tape.add_const(p_att, ea)?),
        (None, None) => (p_cls, p_att),
        _ => panic!("eps must be given for both prompt tensors or neither"),
    };
    let pv_noisy = PromptVars {
        p_cls: pt_cls,
        p_att: pt_att,
        anchors,
        class_tokens,
    };

    // Visual prompts through the mapper.
    let clean_flat = tape.concat(&[p_cls, p_att])?;
    let p_v_input = if inputs.vis_from_noisy {
        tape.concat(&[pt_cls, pt_att])?
    } else {
        clean_flat
    };
    let p_v = map_forward(tape, &mv, p_v_input)?;

    // Classification loss: text embeddings once per class, reused per sample.
    let txt = encode_class_texts(tape, cfg, &enc, &pv_noisy, inputs.class_set)?;
    let mut ces = Vec::with_capacity(inputs.batch.len());
    for (x, y) in inputs.batch {
        let label = inputs
            .class_set
            .iter()
            .position(|c| c == y)
            .ok_or(DiffError::IndexOutOfRange {
                index: *y,
                count: inputs.class_set.len(),
            })?;
        let xv = tape.leaf((*x).clone());
        let img = encode_image(tape, &enc, xv, p_v)?;
        let lg = logits_from_embeddings(tape, img, &txt, cfg.logit_scale)?;
        ces.push(tape.softmax_cross_entropy(lg, label)?);
    }
    let cls = tape.mean_scalars(&ces)?;

    // Auxiliary denoising loss on the mapper.
    if inputs.aux_enabled {
        let aux = aux_denoising_loss_graph(
            tape,
            &mv,
            clean_flat,
            inputs.eta,
            inputs.aux_spec,
            inputs.aux_clean_target,
        )?;
        let weighted = tape.scale(aux, inputs.aux_spec.lambda);
        let total = tape.add(cls, weighted)?;
        Ok(LossVars {
            total,
            cls,
            aux: Some(aux),
        })
    } else {
        Ok(LossVars {
            total: cls,
            cls,
            aux: None,
        })
    }
}

//! Learnable prompts, the attribute-anchored text layout, and the frozen toy
//! dual encoder that maps (image features, prompts) to classification logits.
//!
//! The text side of class c is the sequence
//!
//! ```text
//! [P_att[0], anchor[0], P_att[1], anchor[1], ..., P_cls, class_token[c]]
//! ```
//!
//! where only `P_cls` and `P_att` are learnable; anchors and class tokens are
//! frozen draws. Both encoders are frozen single-hidden-layer maps followed
//! by l2 normalization, so logits are scaled cosine similarities.
//!
//! The frozen weights are drawn *aligned*, standing in for a pretrained
//! joint space: a class token is a frozen random projection T of the class's
//! feature-space prototype (plus an idiosyncratic part), and the text
//! encoder's token columns are constructed as W_x T^+ so that, before any
//! learning, a class token excites approximately the same hidden units as
//! images of that class. The two encoders share their embedding head and
//! hidden biases. Zero-shot classification therefore works at init -- novel
//! classes included -- and prompt learning specializes it, which is the
//! regime the training mechanism targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Tape, Tensor, Var};

/// Dimensions and scales of the prompt/encoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// token embedding dimension
    pub d_tok: usize,
    /// class-prompt token count
    pub tl_cls: usize,
    /// attribute-prompt token count per attribute
    pub tl_att: usize,
    /// number of universal attributes
    pub n_att: usize,
    /// joint embedding dimension
    pub d_e: usize,
    /// encoder hidden dimension
    pub d_h: usize,
    /// frozen temperature on the cosine logits
    pub logit_scale: f64,
    /// std of the non-compositional part of a class token
    pub token_idio_std: f64,
}

impl PromptConfig {
    /// Total token count of an assembled text sequence.
    pub fn l_text(&self) -> usize {
        self.n_att * (self.tl_att + 1) + self.tl_cls + 1
    }

    /// Visual prompt token count; mirrors the learnable text prompt tokens.
    pub fn l_vis(&self) -> usize {
        self.tl_cls + self.n_att * self.tl_att
    }

    /// Flattened size of the learnable prompt tensors.
    pub fn d_in(&self) -> usize {
        self.l_vis() * self.d_tok
    }
}

/// Learnable prompt tensors plus the frozen anchor/class-token embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptSet {
    /// learnable, [tl_cls, d_tok]
    pub p_cls: Tensor,
    /// learnable, [n_att, tl_att, d_tok]
    pub p_att: Tensor,
    /// frozen, [n_att, d_tok]
    pub anchors: Tensor,
    /// frozen, [C, d_tok]; row c is the token of class c
    pub class_tokens: Tensor,
}

impl PromptSet {
    /// Draw a fresh prompt set. Learnables are N(0, 0.02^2); anchors are unit
    /// Gaussians. Class token c is `T prototype_c + idio` with `token_proj`
    /// the frozen projection T shared with the text encoder, so token
    /// geometry inherits the prototypes' attribute structure (novel classes
    /// included) without exposing feature space directly.
    pub fn init<R: Rng>(
        cfg: &PromptConfig,
        prototypes: &[Tensor],
        token_proj: &Tensor,
        rng: &mut R,
    ) -> Self {
        let p_cls = Tensor::randn(&[cfg.tl_cls, cfg.d_tok], 0.02, rng);
        let p_att = Tensor::randn(&[cfg.n_att, cfg.tl_att, cfg.d_tok], 0.02, rng);
        let anchors = Tensor::randn(&[cfg.n_att, cfg.d_tok], 1.0, rng);

        let d_x = prototypes.first().map_or(1, |p| p.numel());
        assert_eq!(token_proj.shape(), &[cfg.d_tok, d_x]);

        let c_total = prototypes.len();
        let mut class_tokens = Tensor::zeros(&[c_total, cfg.d_tok]);
        for (c, proto) in prototypes.iter().enumerate() {
            let idio = Tensor::randn(&[cfg.d_tok], cfg.token_idio_std, rng);
            let row = &mut class_tokens.data_mut()[c * cfg.d_tok..(c + 1) * cfg.d_tok];
            for (i, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, p) in proto.data().iter().enumerate() {
                    acc += token_proj.data()[i * d_x + j] * p;
                }
                *r = acc + idio.data()[i];
            }
        }
        PromptSet {
            p_cls,
            p_att,
            anchors,
            class_tokens,
        }
    }

    /// The frozen prototype-to-token projection, unit rows in expectation.
    pub fn draw_token_proj<R: Rng>(cfg: &PromptConfig, d_x: usize, rng: &mut R) -> Tensor {
        Tensor::randn(&[cfg.d_tok, d_x], 1.0 / (d_x as f64).sqrt(), rng)
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.shape()[0]
    }

    /// Checksum over the frozen tensors; must not change across a run.
    pub fn frozen_checksum(&self) -> String {
        format!(
            "{}:{}",
            self.anchors.checksum(),
            self.class_tokens.checksum()
        )
    }

    /// Put the prompt tensors on a tape. `learnable` decides whether the
    /// p_cls/p_att leaves receive gradients; anchors and class tokens never do.
    pub fn vars(&self, tape: &mut Tape, learnable: bool) -> PromptVars {
        let (p_cls, p_att) = if learnable {
            (
                tape.param(self.p_cls.clone()),
                tape.param(self.p_att.clone()),
            )
        } else {
            (tape.leaf(self.p_cls.clone()), tape.leaf(self.p_att.clone()))
        };
        PromptVars {
            p_cls,
            p_att,
            anchors: tape.leaf(self.anchors.clone()),
            class_tokens: tape.leaf(self.class_tokens.clone()),
        }
    }
}

/// Prompt tensors as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub p_cls: Var,
    pub p_att: Var,
    pub anchors: Var,
    pub class_tokens: Var,
}

/// Frozen single-hidden-layer text and vision encoders.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrozenEncoders {
    pub w_t: Tensor,
    pub b_t: Tensor,
    pub u_t: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub u_v: Tensor,
    pub d_x: usize,
}

/// Hidden gain on the image-feature columns; keeps tanh in its informative range.
const FEATURE_GAIN: f64 = 0.5;
/// Relative scale of the visual-prompt columns.
const PROMPT_GAIN: f64 = 1.0;
/// Relative scale of the frozen anchor rows in the text context.
const ANCHOR_GAIN: f64 = 0.5;
/// Relative scale of the learnable prompt rows in the text context; high
/// enough that the prompts carry real influence over the embedding.
const LEARNABLE_GAIN: f64 = 4.0;

impl FrozenEncoders {
    /// Draw the aligned frozen encoders. The vision side is
    /// `l2n(U tanh(W_x x + W_pv P_v + b))`; the text side reuses U and b, its
    /// token columns are `W_x T^+` (so tokens excite the hidden units their
    /// class's images excite, up to the token bottleneck), and its context
    /// columns are small random draws the learnable prompts act through.
    pub fn init<R: Rng>(
        cfg: &PromptConfig,
        d_x: usize,
        token_proj: &Tensor,
        rng: &mut R,
    ) -> Self {
        let d_h = cfg.d_h;
        let d = cfg.d_tok;
        let pv_in = cfg.l_vis() * d;
        let ctx_in = (cfg.l_text() - 1) * d;

        let w_x = Tensor::randn(&[d_h, d_x], FEATURE_GAIN / (d_x as f64).sqrt(), rng);
        let w_pv = Tensor::randn(&[d_h, pv_in], PROMPT_GAIN / (pv_in as f64).sqrt(), rng);
        let b = Tensor::randn(&[d_h], 0.1, rng);
        let u = Tensor::randn(&[cfg.d_e, d_h], 1.0 / (d_h as f64).sqrt(), rng);
        // context rows: learnable prompt rows carry more gain than anchors
        let mut w_ctx = Tensor::randn(&[d_h, ctx_in], 1.0 / (ctx_in as f64).sqrt(), rng);
        let mut row_gain = Vec::with_capacity(cfg.l_text() - 1);
        for _ in 0..cfg.n_att {
            row_gain.extend(std::iter::repeat(LEARNABLE_GAIN).take(cfg.tl_att));
            row_gain.push(ANCHOR_GAIN);
        }
        row_gain.extend(std::iter::repeat(LEARNABLE_GAIN).take(cfg.tl_cls));
        for i in 0..d_h {
            for (r, g) in row_gain.iter().enumerate() {
                for k in 0..d {
                    w_ctx.data_mut()[i * ctx_in + r * d + k] *= g;
                }
            }
        }

        // token columns: W_x T^+ with T^+ = T^T (T T^T)^{-1}
        let t_pinv = right_pseudo_inverse(token_proj);
        let mut w_tok = Tensor::zeros(&[d_h, d]);
        for i in 0..d_h {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d_x {
                    acc += w_x.data()[i * d_x + k] * t_pinv.data()[k * d + j];
                }
                w_tok.data_mut()[i * d + j] = acc;
            }
        }

        // assemble block matrices column-wise
        let mut w_v = Tensor::zeros(&[d_h, d_x + pv_in]);
        for i in 0..d_h {
            let row = &mut w_v.data_mut()[i * (d_x + pv_in)..(i + 1) * (d_x + pv_in)];
            row[..d_x].copy_from_slice(&w_x.data()[i * d_x..(i + 1) * d_x]);
            row[d_x..].copy_from_slice(&w_pv.data()[i * pv_in..(i + 1) * pv_in]);
        }
        let text_in = ctx_in + d;
        let mut w_t = Tensor::zeros(&[d_h, text_in]);
        for i in 0..d_h {
            let row = &mut w_t.data_mut()[i * text_in..(i + 1) * text_in];
            row[..ctx_in].copy_from_slice(&w_ctx.data()[i * ctx_in..(i + 1) * ctx_in]);
            row[ctx_in..].copy_from_slice(&w_tok.data()[i * d..(i + 1) * d]);
        }

        FrozenEncoders {
            w_t,
            b_t: b.clone(),
            u_t: u.clone(),
            w_v,
            b_v: b,
            u_v: u,
            d_x,
        }
    }

    pub fn checksum(&self) -> String {
        let mut s = String::new();
        for t in [
            &self.w_t, &self.b_t, &self.u_t, &self.w_v, &self.b_v, &self.u_v,
        ] {
            s.push_str(&t.checksum());
        }
        s
    }

    pub fn vars(&self, tape: &mut Tape) -> EncoderVars {
        let d_e = self.u_t.shape()[0];
        EncoderVars {
            w_t: tape.leaf(self.w_t.clone()),
            b_t: tape.leaf(self.b_t.clone()),
            u_t: tape.leaf(self.u_t.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            b_v: tape.leaf(self.b_v.clone()),
            u_v: tape.leaf(self.u_v.clone()),
            zero_e: tape.leaf(Tensor::zeros(&[d_e])),
        }
    }
}

/// Encoder weights as (constant) tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w_t: Var,
    pub b_t: Var,
    pub u_t: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub u_v: Var,
    zero_e: Var,
}

/// Assemble the text token sequence of one class:
/// [P_att[0], anchor[0], ..., P_att[n-1], anchor[n-1], P_cls, class_token[c]],
/// returned as [L_text, d_tok].
pub fn assemble_text_sequence(
    tape: &mut Tape,
    cfg: &PromptConfig,
    pv: &PromptVars,
    class_index: usize,
) -> Result<Var, DiffError> {
    let c_total = tape.value(pv.class_tokens).shape()[0];
    if class_index >= c_total {
        return Err(DiffError::IndexOutOfRange {
            index: class_index,
            count: c_total,
        });
    }
    let d = cfg.d_tok;
    let att_block = cfg.tl_att * d;
    let mut parts = Vec::with_capacity(2 * cfg.n_att + 2);
    for a in 0..cfg.n_att {
        parts.push(tape.slice(pv.p_att, a * att_block, att_block)?);
        parts.push(tape.slice(pv.anchors, a * d, d)?);
    }
    parts.push(pv.p_cls);
    parts.push(tape.slice(pv.class_tokens, class_index * d, d)?);
    let flat = tape.concat(&parts)?;
    tape.reshape(flat, vec![cfg.l_text(), d])
}

/// l2_normalize(U_t tanh(W_t flatten(seq) + b_t)).
pub fn encode_text(tape: &mut Tape, enc: &EncoderVars, seq: Var) -> Result<Var, DiffError> {
    let n = tape.value(seq).numel();
    let flat = tape.reshape(seq, vec![n])?;
    let h = tape.affine(flat, enc.w_t, enc.b_t)?;
    let h = tape.tanh_elem(h);
    let e = tape.affine(h, enc.u_t, enc.zero_e)?;
    tape.l2_normalize(e)
}

/// l2_normalize(U_v tanh(W_v [x | flatten(P_v)] + b_v)).
pub fn encode_image(
    tape: &mut Tape,
    enc: &EncoderVars,
    x: Var,
    p_v: Var,
) -> Result<Var, DiffError> {
    let joint = tape.concat(&[x, p_v])?;
    let h = tape.affine(joint, enc.w_v, enc.b_v)?;
    let h = tape.tanh_elem(h);
    let e = tape.affine(h, enc.u_v, enc.zero_e)?;
    tape.l2_normalize(e)
}

/// Text embeddings for each class in `class_set`, in order.
pub fn encode_class_texts(
    tape: &mut Tape,
    cfg: &PromptConfig,
    enc: &EncoderVars,
    pv: &PromptVars,
    class_set: &[usize],
) -> Result<Vec<Var>, DiffError> {
    class_set
        .iter()
        .map(|&c| {
            let seq = assemble_text_sequence(tape, cfg, pv, c)?;
            encode_text(tape, enc, seq)
        })
        .collect()
}

/// logit_c = logit_scale * <img_emb, txt_emb_c> stacked over the class set.
pub fn logits_from_embeddings(
    tape: &mut Tape,
    img_emb: Var,
    txt_embs: &[Var],
    logit_scale: f64,
) -> Result<Var, DiffError> {
    let scalars: Vec<Var> = txt_embs
        .iter()
        .map(|&t| {
            let d = tape.dot(img_emb, t)?;
            Ok(tape.scale(d, logit_scale))
        })
        .collect::<Result<_, DiffError>>()?;
    tape.stack_scalars(&scalars)
}

/// T^T (T T^T)^{-1} for a wide full-row-rank T: [r, c] -> [c, r].
fn right_pseudo_inverse(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    // gram = T T^T
    let mut gram = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            let mut acc = 0.0;
            for k in 0..c {
                acc += t.data()[i * c + k] * t.data()[j * c + k];
            }
            gram[i * r + j] = acc;
        }
    }
    let inv = invert_in_place(gram, r);
    // out = T^T inv
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..c {
        for j in 0..r {
            let mut acc = 0.0;
            for k in 0..r {
                acc += t.data()[k * c + i] * inv[k * r + j];
            }
            out.data_mut()[i * r + j] = acc;
        }
    }
    out
}

/// Gauss-Jordan with partial pivoting; n is small (the token dimension).
fn invert_in_place(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| {
                a[p * n + col]
                    .abs()
                    .partial_cmp(&a[q * n + col].abs())
                    .expect("finite entries")
            })
            .expect("nonempty range");
        assert!(a[pivot * n + col].abs() > 1e-12, "singular token projection");
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        let d = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = a[row * n + col];
                for j in 0..n {
                    a[row * n + j] -= f * a[col * n + j];
                    inv[row * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    inv
}

/// Full per-sample logits over `class_set`.
pub fn logits(
    tape: &mut Tape,
    cfg: &PromptConfig,
    enc: &EncoderVars,
    pv: &PromptVars,
    x: Var,
    p_v: Var,
    class_set: &[usize],
) -> Result<Var, DiffError> {
    if class_set.is_empty() {
        return Err(DiffError::EmptyInput);
    }
    let txt = encode_class_texts(tape, cfg, enc, pv, class_set)?;
    let img = encode_image(tape, enc, x, p_v)?;
    logits_from_embeddings(tape, img, &txt, cfg.logit_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;
    use crate::rng::rng_from_seed;

    fn cfg() -> PromptConfig {
        PromptConfig {
            d_tok: 4,
            tl_cls: 2,
            tl_att: 2,
            n_att: 2,
            d_e: 8,
            d_h: 16,
            logit_scale: 1.0 / 0.07,
            token_idio_std: 0.25,
        }
    }

    fn protos4(rng: &mut crate::rng::RunRng) -> Vec<Tensor> {
        (0..4).map(|_| Tensor::randn(&[6], 1.5, rng)).collect()
    }

    fn setup() -> (PromptConfig, PromptSet, FrozenEncoders) {
        let cfg = cfg();
        let mut rng = rng_from_seed(41);
        let protos = protos4(&mut rng);
        let proj = PromptSet::draw_token_proj(&cfg, 6, &mut rng);
        let ps = PromptSet::init(&cfg, &protos, &proj, &mut rng);
        let enc = FrozenEncoders::init(&cfg, 6, &proj, &mut rng);
        (cfg, ps, enc)
    }

    #[test]
    fn layout_counts_match_formula() {
        let c = cfg();
        // n_att * (tl_att + 1) + tl_cls + 1 = 2*3 + 2 + 1
        assert_eq!(c.l_text(), 9);
        assert_eq!(c.l_vis(), 6);

        let mut no_att = cfg();
        no_att.n_att = 0;
        no_att.tl_cls = 1;
        assert_eq!(no_att.l_text(), 2);
    }

    #[test]
    fn assemble_produces_expected_shape_and_content() {
        let (cfg, ps, _) = setup();
        let mut tape = Tape::new();
        let pv = ps.vars(&mut tape, false);
        let seq = assemble_text_sequence(&mut tape, &cfg, &pv, 1).unwrap();
        assert_eq!(tape.value(seq).shape(), &[9, 4]);
        let d = tape.value(seq).data();
        // first attribute block then its anchor
        assert_eq!(&d[0..8], &ps.p_att.data()[0..8]);
        assert_eq!(&d[8..12], &ps.anchors.data()[0..4]);
        // class prompt before the class token
        assert_eq!(&d[24..32], ps.p_cls.data());
        assert_eq!(&d[32..36], &ps.class_tokens.data()[4..8]);
    }

    #[test]
    fn assemble_without_attributes_degenerates_to_cls_token_layout() {
        let mut c = cfg();
        c.n_att = 0;
        c.tl_cls = 1;
        let mut rng = rng_from_seed(5);
        let protos = protos4(&mut rng);
        let proj = PromptSet::draw_token_proj(&c, 6, &mut rng);
        let ps = PromptSet::init(&c, &protos, &proj, &mut rng);
        let mut tape = Tape::new();
        let pv = ps.vars(&mut tape, false);
        let seq = assemble_text_sequence(&mut tape, &c, &pv, 0).unwrap();
        assert_eq!(tape.value(seq).shape(), &[2, 4]);
        let d = tape.value(seq).data();
        assert_eq!(&d[0..4], ps.p_cls.data());
        assert_eq!(&d[4..8], &ps.class_tokens.data()[0..4]);
    }

    #[test]
    fn changing_class_changes_only_the_last_row() {
        let (cfg, ps, _) = setup();
        let mut tape = Tape::new();
        let pv = ps.vars(&mut tape, false);
        let s0 = assemble_text_sequence(&mut tape, &cfg, &pv, 0).unwrap();
        let s2 = assemble_text_sequence(&mut tape, &cfg, &pv, 2).unwrap();
        let (a, b) = (tape.value(s0).data(), tape.value(s2).data());
        let last = (cfg.l_text() - 1) * cfg.d_tok;
        assert_eq!(&a[..last], &b[..last]);
        assert_ne!(&a[last..], &b[last..]);
    }

    #[test]
    fn assemble_rejects_out_of_range_class() {
        let (cfg, ps, _) = setup();
        let mut tape = Tape::new();
        let pv = ps.vars(&mut tape, false);
        assert!(matches!(
            assemble_text_sequence(&mut tape, &cfg, &pv, 4),
            Err(DiffError::IndexOutOfRange { index: 4, count: 4 })
        ));
    }

    #[test]
    fn text_embeddings_are_unit_norm_and_deterministic() {
        let (cfg, ps, enc) = setup();
        let run = || {
            let mut tape = Tape::new();
            let pv = ps.vars(&mut tape, false);
            let ev = enc.vars(&mut tape);
            let seq = assemble_text_sequence(&mut tape, &cfg, &pv, 3).unwrap();
            let e = encode_text(&mut tape, &ev, seq).unwrap();
            tape.value(e).clone()
        };
        let e1 = run();
        let e2 = run();
        assert!((e1.l2_norm() - 1.0).abs() < 1e-12);
        assert_eq!(e1, e2);
    }

    #[test]
    fn text_gradient_wrt_class_prompt_matches_finite_differences() {
        let (cfg, ps, enc) = setup();
        let probe = Tensor::randn(&[cfg.d_e], 1.0, &mut rng_from_seed(77));
        let mut values = [ps.p_cls.clone(), ps.p_att.clone()];
        let report = check_gradients(&["p_cls", "p_att"], &mut values, |tape, vars| {
            let pv = PromptVars {
                p_cls: vars[0],
                p_att: vars[1],
                anchors: tape.leaf(ps.anchors.clone()),
                class_tokens: tape.leaf(ps.class_tokens.clone()),
            };
            let ev = enc.vars(tape);
            let seq = assemble_text_sequence(tape, &cfg, &pv, 2)?;
            let e = encode_text(tape, &ev, seq)?;
            let p = tape.leaf(probe.clone());
            tape.dot(e, p)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }

    #[test]
    fn image_embeddings_unit_norm_and_distinct_across_visual_prompts() {
        let (cfg, _, enc) = setup();
        let mut rng = rng_from_seed(6);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let pv1 = Tensor::randn(&[cfg.d_in()], 0.1, &mut rng);
        let pv2 = Tensor::randn(&[cfg.d_in()], 0.1, &mut rng);
        let mut tape = Tape::new();
        let ev = enc.vars(&mut tape);
        let xv = tape.leaf(x);
        let p1 = tape.leaf(pv1);
        let p2 = tape.leaf(pv2);
        let e1 = encode_image(&mut tape, &ev, xv, p1).unwrap();
        let e2 = encode_image(&mut tape, &ev, xv, p2).unwrap();
        assert!((tape.value(e1).l2_norm() - 1.0).abs() < 1e-12);
        assert_ne!(tape.value(e1), tape.value(e2));
    }

    #[test]
    fn image_gradient_wrt_visual_prompt_matches_finite_differences() {
        let (cfg, _, enc) = setup();
        let mut rng = rng_from_seed(8);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let p_v = Tensor::randn(&[cfg.d_in()], 0.1, &mut rng);
        let probe = Tensor::randn(&[cfg.d_e], 1.0, &mut rng);
        let mut values = [p_v];
        let report = check_gradients(&["p_v"], &mut values, |tape, vars| {
            let ev = enc.vars(tape);
            let xv = tape.leaf(x.clone());
            let e = encode_image(tape, &ev, xv, vars[0])?;
            let p = tape.leaf(probe.clone());
            tape.dot(e, p)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-6);
    }

    #[test]
    fn identical_class_tokens_give_equal_logits() {
        let (cfg, mut ps, enc) = setup();
        // force all class tokens equal
        let row: Vec<f64> = ps.class_tokens.data()[0..cfg.d_tok].to_vec();
        for c in 0..ps.num_classes() {
            ps.class_tokens.data_mut()[c * cfg.d_tok..(c + 1) * cfg.d_tok]
                .copy_from_slice(&row);
        }
        let mut rng = rng_from_seed(12);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let p_v = Tensor::randn(&[cfg.d_in()], 0.1, &mut rng);
        let mut tape = Tape::new();
        let pv = ps.vars(&mut tape, false);
        let ev = enc.vars(&mut tape);
        let xv = tape.leaf(x);
        let pvv = tape.leaf(p_v);
        let l = logits(&mut tape, &cfg, &ev, &pv, xv, pvv, &[0, 1, 2, 3]).unwrap();
        let d = tape.value(l).data();
        for v in d {
            assert!((v - d[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_are_bounded_by_the_scale() {
        let (cfg, ps, enc) = setup();
        let mut rng = rng_from_seed(13);
        for _ in 0..20 {
            let x = Tensor::randn(&[6], 2.0, &mut rng);
            let p_v = Tensor::randn(&[cfg.d_in()], 0.5, &mut rng);
            let mut tape = Tape::new();
            let pv = ps.vars(&mut tape, false);
            let ev = enc.vars(&mut tape);
            let xv = tape.leaf(x);
            let pvv = tape.leaf(p_v);
            let l = logits(&mut tape, &cfg, &ev, &pv, xv, pvv, &[0, 1, 2, 3]).unwrap();
            for v in tape.value(l).data() {
                assert!(v.abs() <= cfg.logit_scale * (1.0 + 1e-12));
            }
        }
    }

    /// Raw-loop re-computation of the full forward pass, independent of the tape.
    fn oracle_embedding(w: &Tensor, b: &Tensor, u: &Tensor, input: &[f64]) -> Vec<f64> {
        let (dh, n) = (w.shape()[0], w.shape()[1]);
        assert_eq!(input.len(), n);
        let mut h = vec![0.0; dh];
        for i in 0..dh {
            let mut acc = 0.0;
            for j in 0..n {
                acc += w.data()[i * n + j] * input[j];
            }
            h[i] = (acc + b.data()[i]).tanh();
        }
        let de = u.shape()[0];
        let mut e = vec![0.0; de];
        for i in 0..de {
            let mut acc = 0.0;
            for j in 0..dh {
                acc += u.data()[i * dh + j] * h[j];
            }
            e[i] = acc;
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        e.iter().map(|v| v / norm).collect()
    }

    #[test]
    fn argmax_matches_independent_cosine_oracle() {
        let (cfg, ps, enc) = setup();
        let mut rng = rng_from_seed(14);
        for _ in 0..25 {
            let x = Tensor::randn(&[6], 1.5, &mut rng);
            let p_v = Tensor::randn(&[cfg.d_in()], 0.3, &mut rng);

            let mut tape = Tape::new();
            let pv = ps.vars(&mut tape, false);
            let ev = enc.vars(&mut tape);
            let xv = tape.leaf(x.clone());
            let pvv = tape.leaf(p_v.clone());
            let l = logits(&mut tape, &cfg, &ev, &pv, xv, pvv, &[0, 1, 2, 3]).unwrap();
            let got: Vec<f64> = tape.value(l).data().to_vec();

            // oracle: raw loops end to end
            let mut img_in = x.data().to_vec();
            img_in.extend_from_slice(p_v.data());
            let img = oracle_embedding(&enc.w_v, &enc.b_v, &enc.u_v, &img_in);
            let mut want = Vec::new();
            for c in 0..4 {
                let mut seq = Vec::new();
                for a in 0..cfg.n_att {
                    let blk = cfg.tl_att * cfg.d_tok;
                    seq.extend_from_slice(&ps.p_att.data()[a * blk..(a + 1) * blk]);
                    seq.extend_from_slice(&ps.anchors.data()[a * cfg.d_tok..(a + 1) * cfg.d_tok]);
                }
                seq.extend_from_slice(ps.p_cls.data());
                seq.extend_from_slice(&ps.class_tokens.data()[c * cfg.d_tok..(c + 1) * cfg.d_tok]);
                let txt = oracle_embedding(&enc.w_t, &enc.b_t, &enc.u_t, &seq);
                let cos: f64 = img.iter().zip(&txt).map(|(a, b)| a * b).sum();
                want.push(cfg.logit_scale * cos);
            }
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
                        if x > best.1 {
                            (i, x)
                        } else {
                            best
                        }
                    })
                    .0
            };
            assert_eq!(argmax(&got), argmax(&want));
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permuting_the_class_set_permutes_logits() {
        let (cfg, ps, enc) = setup();
        let mut rng = rng_from_seed(15);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let p_v = Tensor::randn(&[cfg.d_in()], 0.2, &mut rng);
        let mut tape = Tape::new();
        let pv = ps.vars(&mut tape, false);
        let ev = enc.vars(&mut tape);
        let xv = tape.leaf(x);
        let pvv = tape.leaf(p_v);
        let a = logits(&mut tape, &cfg, &ev, &pv, xv, pvv, &[0, 1, 2, 3]).unwrap();
        let b = logits(&mut tape, &cfg, &ev, &pv, xv, pvv, &[3, 0, 2, 1]).unwrap();
        let (av, bv) = (tape.value(a).data(), tape.value(b).data());
        assert_eq!(av[0].to_bits(), bv[1].to_bits());
        assert_eq!(av[1].to_bits(), bv[3].to_bits());
        assert_eq!(av[2].to_bits(), bv[2].to_bits());
        assert_eq!(av[3].to_bits(), bv[0].to_bits());
    }

    #[test]
    fn empty_class_set_is_rejected() {
        let (cfg, ps, enc) = setup();
        let mut tape = Tape::new();
        let pv = ps.vars(&mut tape, false);
        let ev = enc.vars(&mut tape);
        let xv = tape.leaf(Tensor::zeros(&[6]));
        let pvv = tape.leaf(Tensor::zeros(&[cfg.d_in()]));
        assert!(logits(&mut tape, &cfg, &ev, &pv, xv, pvv, &[]).is_err());
    }

    #[test]
    fn frozen_checksums_are_stable() {
        let (_, ps, enc) = setup();
        assert_eq!(ps.frozen_checksum(), ps.frozen_checksum());
        assert_eq!(enc.checksum(), enc.checksum());
    }
}

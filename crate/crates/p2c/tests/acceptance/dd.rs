//! Double-double (~31 significant digits) arithmetic and an independent
//! raw-loop re-computation of the training objective. Used to re-measure
//! finite differences at entries whose true gradient sits below what plain
//! f64 forward evaluation can resolve.

use p2c::diffcore::Tensor;
use p2c::model::ModelState;

/// hi + lo with |lo| <= ulp(hi)/2; standard error-free transformations.
#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: 0.6931471805599453,
        lo: 2.3190468138462996e-17,
    };

    pub fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let e = e + self.lo + o.lo;
        let (hi, lo) = quick_two_sum(s, e);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from_f64(q1)));
        let q2 = r.hi / o.hi;
        let r2 = r.sub(o.mul(Dd::from_f64(q2)));
        let q3 = r2.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }.add(Dd::from_f64(q3))
    }

    pub fn sqrt(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::ZERO;
        }
        let y = self.hi.sqrt();
        let ydd = Dd::from_f64(y);
        let r = self.sub(ydd.mul(ydd));
        ydd.add(r.div(Dd::from_f64(2.0 * y)))
    }

    pub fn exp(self) -> Dd {
        if self.hi < -700.0 {
            return Dd::ZERO;
        }
        assert!(self.hi < 700.0, "exp overflow in dd oracle");
        let m = (self.hi / Dd::LN2.hi).round();
        let r = self.sub(Dd::LN2.mul(Dd::from_f64(m)));
        // Taylor on |r| <= ln2/2
        let mut sum = Dd::ONE;
        let mut term = Dd::ONE;
        for k in 1..40 {
            term = term.mul(r).div(Dd::from_f64(k as f64));
            sum = sum.add(term);
            if term.hi.abs() < 1e-40 * sum.hi.abs() {
                break;
            }
        }
        let scale = (m as i32).into();
        Dd {
            hi: sum.hi * f64::exp2(scale),
            lo: sum.lo * f64::exp2(scale),
        }
    }

    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0, "ln of nonpositive in dd oracle");
        let mut y = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            let e = y.exp();
            y = y.add(self.sub(e).div(e));
        }
        y
    }

    pub fn tanh(self) -> Dd {
        if self.hi > 300.0 {
            return Dd::ONE;
        }
        if self.hi < -300.0 {
            return Dd::ONE.neg();
        }
        let e2 = self.add(self).exp();
        e2.sub(Dd::ONE).div(e2.add(Dd::ONE))
    }

    pub fn relu(self) -> Dd {
        if self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0) {
            self
        } else {
            Dd::ZERO
        }
    }
}

fn lift(v: &[f64]) -> Vec<Dd> {
    v.iter().map(|&x| Dd::from_f64(x)).collect()
}

/// y = W x + b for W stored row-major [m, n].
fn affine_dd(w: &[f64], b: &[f64], x: &[Dd], m: usize, n: usize) -> Vec<Dd> {
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = Dd::ZERO;
        for j in 0..n {
            acc = acc.add(Dd::from_f64(w[i * n + j]).mul(x[j]));
        }
        out.push(acc.add(Dd::from_f64(b[i])));
    }
    out
}

fn l2_normalize_dd(x: &[Dd]) -> Vec<Dd> {
    let mut sum = Dd::ZERO;
    for v in x {
        sum = sum.add(v.mul(*v));
    }
    let norm = sum.sqrt();
    x.iter().map(|v| v.div(norm)).collect()
}

fn encoder_dd(w: &Tensor, b: &Tensor, u: &Tensor, input: &[Dd]) -> Vec<Dd> {
    let (dh, n) = (w.shape()[0], w.shape()[1]);
    let h: Vec<Dd> = affine_dd(w.data(), b.data(), input, dh, n)
        .into_iter()
        .map(|v| v.tanh())
        .collect();
    let de = u.shape()[0];
    let e = affine_dd(u.data(), &vec![0.0; de], &h, de, dh);
    l2_normalize_dd(&e)
}

fn mapper_dd(m: &p2c::mapper::VlMapper, input: &[Dd]) -> Vec<Dd> {
    let hidden: Vec<Dd> = affine_dd(
        m.w1.data(),
        m.b1.data(),
        input,
        m.hidden(),
        m.d_in(),
    )
    .into_iter()
    .map(|v| v.relu())
    .collect();
    affine_dd(m.w2.data(), m.b2.data(), &hidden, m.d_out(), m.hidden())
}

fn cross_entropy_dd(logits: &[Dd], label: usize) -> Dd {
    let max = logits
        .iter()
        .map(|l| l.hi)
        .fold(f64::NEG_INFINITY, f64::max);
    let maxd = Dd::from_f64(max);
    let mut z = Dd::ZERO;
    for l in logits {
        z = z.add(l.sub(maxd).exp());
    }
    z.ln().sub(logits[label].sub(maxd))
}

/// Inputs of one objective evaluation, mirroring `model::StepInputs` with
/// parameter values supplied explicitly (so entries can be perturbed).
pub struct DdInputs<'a> {
    pub params: &'a [Tensor],
    pub batch: &'a [(&'a Tensor, usize)],
    pub class_set: &'a [usize],
    pub eps_cls: Option<&'a Tensor>,
    pub eps_att: Option<&'a Tensor>,
    pub eta: &'a Tensor,
    pub lambda: f64,
    pub frozen_target: &'a Tensor,
    pub vis_from_noisy: bool,
}

/// L_total re-computed end to end in double-double arithmetic with raw
/// loops; shares no code with the tape implementation.
pub fn total_loss_dd(model: &ModelState, inp: &DdInputs) -> Dd {
    let cfg = &model.prompt_cfg;
    let enc = &model.encoders;
    let d = cfg.d_tok;

    let p_cls = lift(inp.params[0].data());
    let p_att = lift(inp.params[1].data());
    let mapper = p2c::mapper::VlMapper {
        w1: inp.params[2].clone(),
        b1: inp.params[3].clone(),
        w2: inp.params[4].clone(),
        b2: inp.params[5].clone(),
        s_h: model.mapper.s_h,
    };

    // perturbed prompts for the classification pass
    let mut pt_cls = p_cls.clone();
    let mut pt_att = p_att.clone();
    if let (Some(ec), Some(ea)) = (inp.eps_cls, inp.eps_att) {
        for (v, e) in pt_cls.iter_mut().zip(ec.data()) {
            *v = v.add(Dd::from_f64(*e));
        }
        for (v, e) in pt_att.iter_mut().zip(ea.data()) {
            *v = v.add(Dd::from_f64(*e));
        }
    }

    // visual prompts
    let map_in: Vec<Dd> = if inp.vis_from_noisy {
        pt_cls.iter().chain(pt_att.iter()).cloned().collect()
    } else {
        p_cls.iter().chain(p_att.iter()).cloned().collect()
    };
    let p_v = mapper_dd(&mapper, &map_in);

    // per-class text embeddings over the perturbed prompts
    let att_block = cfg.tl_att * d;
    let mut txt = Vec::with_capacity(inp.class_set.len());
    for &c in inp.class_set {
        let mut seq: Vec<Dd> = Vec::with_capacity(cfg.l_text() * d);
        for a in 0..cfg.n_att {
            seq.extend_from_slice(&pt_att[a * att_block..(a + 1) * att_block]);
            seq.extend(lift(&model.prompts.anchors.data()[a * d..(a + 1) * d]));
        }
        seq.extend_from_slice(&pt_cls);
        seq.extend(lift(
            &model.prompts.class_tokens.data()[c * d..(c + 1) * d],
        ));
        txt.push(encoder_dd(&enc.w_t, &enc.b_t, &enc.u_t, &seq));
    }

    // classification loss
    let mut cls = Dd::ZERO;
    for (x, y) in inp.batch {
        let mut joint: Vec<Dd> = lift(x.data());
        joint.extend_from_slice(&p_v);
        let img = encoder_dd(&enc.w_v, &enc.b_v, &enc.u_v, &joint);
        let logits: Vec<Dd> = txt
            .iter()
            .map(|t| {
                let mut acc = Dd::ZERO;
                for (a, b) in img.iter().zip(t) {
                    acc = acc.add(a.mul(*b));
                }
                acc.mul(Dd::from_f64(cfg.logit_scale))
            })
            .collect();
        let label = inp
            .class_set
            .iter()
            .position(|c| c == y)
            .expect("label in class set");
        cls = cls.add(cross_entropy_dd(&logits, label));
    }
    cls = cls.div(Dd::from_f64(inp.batch.len() as f64));

    // auxiliary reconstruction loss against the frozen clean target
    let clean_flat: Vec<Dd> = p_cls.iter().chain(p_att.iter()).cloned().collect();
    let mut noisy: Vec<Dd> = clean_flat.clone();
    for (v, e) in noisy.iter_mut().zip(inp.eta.data()) {
        *v = v.add(Dd::from_f64(*e));
    }
    let recon = mapper_dd(&mapper, &noisy);
    let mut aux = Dd::ZERO;
    for (r, t) in recon.iter().zip(inp.frozen_target.data()) {
        let diff = r.sub(Dd::from_f64(*t));
        aux = aux.add(diff.mul(diff));
    }
    aux = aux.div(Dd::from_f64(recon.len() as f64));

    cls.add(aux.mul(Dd::from_f64(inp.lambda)))
}

#[cfg(test)]
mod dd_self_tests {
    use super::*;

    #[test]
    fn dd_arithmetic_matches_known_values() {
        let a = Dd::from_f64(1.0).div(Dd::from_f64(3.0));
        // 1/3 to ~30 digits: hi+lo reproduces beyond f64
        let err = (a.mul(Dd::from_f64(3.0)).sub(Dd::ONE)).to_f64().abs();
        assert!(err < 1e-30, "{err:e}");

        let e = Dd::ONE.exp();
        assert!((e.hi - std::f64::consts::E).abs() < 1e-15);
        let back = e.ln();
        assert!((back.sub(Dd::ONE)).to_f64().abs() < 1e-28);

        let t = Dd::from_f64(0.5).tanh();
        assert!((t.hi - 0.5f64.tanh()).abs() < 1e-15);

        let s = Dd::from_f64(2.0).sqrt();
        assert!((s.mul(s).sub(Dd::from_f64(2.0))).to_f64().abs() < 1e-30);
    }
}

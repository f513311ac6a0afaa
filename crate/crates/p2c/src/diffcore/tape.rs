//! Gradient tape over the fixed primitive set.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! record in exact reverse order, accumulating gradients into every node that
//! transitively depends on a parameter leaf. Constants (frozen weights, data,
//! noise draws) are leaves with `requires_grad == false` and are skipped
//! during the reverse sweep.

use super::{DiffError, Tensor, EPS_NORM};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = W x + b
    Affine { x: Var, w: Var, b: Var },
    Tanh { x: Var },
    Relu { x: Var },
    /// y = x / ||x||; stored norm reused in backward
    L2Normalize { x: Var, norm: f64 },
    /// loss = -log softmax(logits)[label]; stored softmax reused in backward
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        softmax: Vec<f64>,
    },
    /// mean of squared elementwise differences
    Mse { a: Var, b: Var },
    /// flat concatenation of the inputs' row-major data
    Concat { parts: Vec<Var> },
    /// contiguous range [start, start+len) of the input's flat data
    Slice { x: Var, start: usize },
    /// vector assembled from scalar nodes
    StackScalars { parts: Vec<Var> },
    /// arithmetic mean of scalar nodes
    MeanScalars { parts: Vec<Var> },
    /// inner product of equally-shaped tensors
    Dot { a: Var, b: Var },
    /// elementwise sum of equally-shaped tensors
    Add { a: Var, b: Var },
    /// y = c * x
    Scale { x: Var, c: f64 },
    /// y = x + k with k a constant tensor (identity Jacobian)
    AddConst { x: Var },
    /// same data, new shape
    Reshape { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications plus their values.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
///
/// Nodes the loss does not depend on have no entry; callers treat that as an
/// exactly-zero gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, materializing zeros when the loss is independent of it.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Tensor {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf: frozen weights, data, noise draws.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// y_i = sum_j W_ij x_j + b_i for x: [n], w: [m, n], b: [m].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 {
            return Err(DiffError::ShapeMismatch {
                expected: vec![0, 0],
                got: wv.shape().to_vec(),
            });
        }
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        if xv.numel() != n {
            return Err(DiffError::ShapeMismatch {
                expected: vec![n],
                got: xv.shape().to_vec(),
            });
        }
        if bv.numel() != m {
            return Err(DiffError::ShapeMismatch {
                expected: vec![m],
                got: bv.shape().to_vec(),
            });
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xd[j];
            }
            out[i] = acc + bd[i];
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::vector(out), Op::Affine { x, w, b }, rg))
    }

    pub fn tanh_elem(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a.tanh()).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Tanh { x }, rg)
    }

    pub fn relu_elem(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a.max(0.0)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// x / ||x||_2; errors when the norm is at or below [`EPS_NORM`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, DiffError> {
        let v = self.value(x);
        let norm = v.l2_norm();
        if !(norm > EPS_NORM) {
            return Err(DiffError::DegenerateEmbedding {
                norm,
                eps: EPS_NORM,
            });
        }
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a / norm).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, norm }, rg))
    }

    /// -log softmax(logits)[label], max-subtracted for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, DiffError> {
        let v = self.value(logits);
        let c = v.numel();
        if label >= c {
            return Err(DiffError::IndexOutOfRange {
                index: label,
                count: c,
            });
        }
        let d = v.data();
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = d.iter().map(|a| (a - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let softmax: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = z.ln() - (d[label] - max);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                softmax,
            },
            rg,
        ))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DiffError::ShapeMismatch {
                expected: av.shape().to_vec(),
                got: bv.shape().to_vec(),
            });
        }
        let n = av.numel() as f64;
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(sum / n), Op::Mse { a, b }, rg))
    }

    /// Flat concatenation; the result is 1-d regardless of input shapes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyInput);
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rg |= self.rg(p);
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous range of the input's flat data.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let v = self.value(x);
        if start + len > v.numel() {
            return Err(DiffError::SliceOutOfBounds {
                start,
                len,
                total: v.numel(),
            });
        }
        let data = v.data()[start..start + len].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::Slice { x, start }, rg))
    }

    /// Vector from scalar nodes.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyInput);
        }
        let mut data = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let v = self.value(p);
            if v.numel() != 1 {
                return Err(DiffError::NotScalar {
                    got: v.shape().to_vec(),
                });
            }
            data.push(v.data()[0]);
            rg |= self.rg(p);
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::StackScalars {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyInput);
        }
        let mut acc = 0.0;
        let mut rg = false;
        for &p in parts {
            let v = self.value(p);
            if v.numel() != 1 {
                return Err(DiffError::NotScalar {
                    got: v.shape().to_vec(),
                });
            }
            acc += v.data()[0];
            rg |= self.rg(p);
        }
        Ok(self.push(
            Tensor::scalar(acc / parts.len() as f64),
            Op::MeanScalars {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Inner product of equally-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DiffError::ShapeMismatch {
                expected: av.shape().to_vec(),
                got: bv.shape().to_vec(),
            });
        }
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }, rg))
    }

    /// Elementwise sum of equally-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DiffError::ShapeMismatch {
                expected: av.shape().to_vec(),
                got: bv.shape().to_vec(),
            });
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// c * x.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| c * a).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// x + k with k constant; gradients pass through unchanged.
    pub fn add_const(&mut self, x: Var, k: &Tensor) -> Result<Var, DiffError> {
        let v = self.value(x);
        if v.shape() != k.shape() {
            return Err(DiffError::ShapeMismatch {
                expected: v.shape().to_vec(),
                got: k.shape().to_vec(),
            });
        }
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(k.data()).map(|(a, b)| a + b).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst { x }, rg))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Description of the first node whose value contains a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Some(format!(
                    "node {} ({}) of shape {:?}",
                    i,
                    op_name(&node.op),
                    node.value.shape()
                ));
            }
        }
        None
    }

    /// Reverse sweep from a scalar loss. Visits nodes in exact reverse
    /// creation order, which is a reverse topological order since every op
    /// only references earlier nodes.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DiffError::NotScalar {
                got: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for i in (0..self.nodes.len()).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(gy);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (m, n) = {
                        let ws = self.value(*w).shape();
                        (ws[0], ws[1])
                    };
                    let gyd = gy.data();
                    if self.rg(*x) {
                        let wd = self.value(*w).data();
                        let mut gx = vec![0.0; n];
                        for i2 in 0..m {
                            let row = &wd[i2 * n..(i2 + 1) * n];
                            let g = gyd[i2];
                            for j in 0..n {
                                gx[j] += row[j] * g;
                            }
                        }
                        accumulate_raw(&mut grads, *x, self.value(*x).shape(), &gx);
                    }
                    if self.rg(*w) {
                        let xd = self.value(*x).data();
                        let mut gw = vec![0.0; m * n];
                        for i2 in 0..m {
                            let g = gyd[i2];
                            for j in 0..n {
                                gw[i2 * n + j] = g * xd[j];
                            }
                        }
                        accumulate_raw(&mut grads, *w, self.value(*w).shape(), &gw);
                    }
                    if self.rg(*b) {
                        accumulate_raw(&mut grads, *b, self.value(*b).shape(), gyd);
                    }
                }
                Op::Tanh { x } => {
                    if self.rg(*x) {
                        let y = node.value.data();
                        let gx: Vec<f64> = gy
                            .data()
                            .iter()
                            .zip(y)
                            .map(|(g, t)| g * (1.0 - t * t))
                            .collect();
                        accumulate_raw(&mut grads, *x, self.value(*x).shape(), &gx);
                    }
                }
                Op::Relu { x } => {
                    if self.rg(*x) {
                        // subgradient at 0 is 0
                        let xd = self.value(*x).data();
                        let gx: Vec<f64> = gy
                            .data()
                            .iter()
                            .zip(xd)
                            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                            .collect();
                        accumulate_raw(&mut grads, *x, self.value(*x).shape(), &gx);
                    }
                }
                Op::L2Normalize { x, norm } => {
                    if self.rg(*x) {
                        // y = x / r; dx = (g - y <y, g>) / r
                        let y = node.value.data();
                        let gyd = gy.data();
                        let yg: f64 = y.iter().zip(gyd).map(|(a, b)| a * b).sum();
                        let gx: Vec<f64> = gyd
                            .iter()
                            .zip(y)
                            .map(|(g, yi)| (g - yi * yg) / norm)
                            .collect();
                        accumulate_raw(&mut grads, *x, self.value(*x).shape(), &gx);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    softmax,
                } => {
                    if self.rg(*logits) {
                        let g = gy.item();
                        let mut gl: Vec<f64> = softmax.iter().map(|p| g * p).collect();
                        gl[*label] -= g;
                        accumulate_raw(&mut grads, *logits, self.value(*logits).shape(), &gl);
                    }
                }
                Op::Mse { a, b } => {
                    let g = gy.item();
                    let n = self.value(*a).numel() as f64;
                    if self.rg(*a) {
                        let ga: Vec<f64> = self
                            .value(*a)
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(x, y)| g * 2.0 * (x - y) / n)
                            .collect();
                        accumulate_raw(&mut grads, *a, self.value(*a).shape(), &ga);
                    }
                    if self.rg(*b) {
                        let gb: Vec<f64> = self
                            .value(*a)
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(x, y)| -g * 2.0 * (x - y) / n)
                            .collect();
                        accumulate_raw(&mut grads, *b, self.value(*b).shape(), &gb);
                    }
                }
                Op::Concat { parts } => {
                    let gyd = gy.data();
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if self.rg(p) {
                            accumulate_raw(
                                &mut grads,
                                p,
                                self.value(p).shape(),
                                &gyd[off..off + len],
                            );
                        }
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    if self.rg(*x) {
                        let mut gx = vec![0.0; self.value(*x).numel()];
                        gx[*start..*start + gy.numel()].copy_from_slice(gy.data());
                        accumulate_raw(&mut grads, *x, self.value(*x).shape(), &gx);
                    }
                }
                Op::StackScalars { parts } => {
                    for (j, &p) in parts.iter().enumerate() {
                        if self.rg(p) {
                            accumulate_raw(
                                &mut grads,
                                p,
                                self.value(p).shape(),
                                &[gy.data()[j]],
                            );
                        }
                    }
                }
                Op::MeanScalars { parts } => {
                    let g = gy.item() / parts.len() as f64;
                    for &p in parts {
                        if self.rg(p) {
                            accumulate_raw(&mut grads, p, self.value(p).shape(), &[g]);
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let g = gy.item();
                    if self.rg(*a) {
                        let ga: Vec<f64> = self.value(*b).data().iter().map(|v| g * v).collect();
                        accumulate_raw(&mut grads, *a, self.value(*a).shape(), &ga);
                    }
                    if self.rg(*b) {
                        let gb: Vec<f64> = self.value(*a).data().iter().map(|v| g * v).collect();
                        accumulate_raw(&mut grads, *b, self.value(*b).shape(), &gb);
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        accumulate_raw(&mut grads, *a, self.value(*a).shape(), gy.data());
                    }
                    if self.rg(*b) {
                        accumulate_raw(&mut grads, *b, self.value(*b).shape(), gy.data());
                    }
                }
                Op::Scale { x, c } => {
                    if self.rg(*x) {
                        let gx: Vec<f64> = gy.data().iter().map(|g| c * g).collect();
                        accumulate_raw(&mut grads, *x, self.value(*x).shape(), &gx);
                    }
                }
                Op::AddConst { x } => {
                    if self.rg(*x) {
                        accumulate_raw(&mut grads, *x, self.value(*x).shape(), gy.data());
                    }
                }
                Op::Reshape { x } => {
                    if self.rg(*x) {
                        accumulate_raw(&mut grads, *x, self.value(*x).shape(), gy.data());
                    }
                }
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Affine { .. } => "affine",
        Op::Tanh { .. } => "tanh",
        Op::Relu { .. } => "relu",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::Mse { .. } => "mse",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::StackScalars { .. } => "stack_scalars",
        Op::MeanScalars { .. } => "mean_scalars",
        Op::Dot { .. } => "dot",
        Op::Add { .. } => "add",
        Op::Scale { .. } => "scale",
        Op::AddConst { .. } => "add_const",
        Op::Reshape { .. } => "reshape",
    }
}

fn accumulate_raw(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], contrib: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => {
            grads[v.0] =
                Some(Tensor::new(shape.to_vec(), contrib.to_vec()).expect("gradient shape"));
        }
    }
}

use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this are clamped before the logarithm in
/// [`Tape::cross_entropy`], bounding a single example's loss by `-ln(1e-12)`.
pub const CE_CLAMP: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddBias,
    Sigmoid,
    Tanh,
    Softmax,
    CrossEntropy,
    Concat,
    SliceCols,
    FrobeniusSq,
    Sum,
    Scale,
    MulScalar,
    ReverseGrad,
    MaxPool,
    Blend,
    CrossGramSq,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::CrossEntropy,
        OpKind::Concat,
        OpKind::SliceCols,
        OpKind::FrobeniusSq,
        OpKind::Sum,
        OpKind::Scale,
        OpKind::MulScalar,
        OpKind::ReverseGrad,
        OpKind::MaxPool,
        OpKind::Blend,
        OpKind::CrossGramSq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Concat => "concat",
            OpKind::SliceCols => "slice_cols",
            OpKind::FrobeniusSq => "frobenius_sq",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
            OpKind::MulScalar => "mul_scalar",
            OpKind::ReverseGrad => "reverse_grad",
            OpKind::MaxPool => "max_pool",
            OpKind::Blend => "blend",
            OpKind::CrossGramSq => "cross_gram_sq",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    FrobeniusSq(Var),
    Sum(Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    ReverseGrad(Var, f64),
    MaxPool {
        steps: Vec<Var>,
        argmax: Vec<usize>,
    },
    Blend {
        new: Var,
        old: Var,
        keep_new: Vec<bool>,
    },
    CrossGramSq {
        shared: Vec<Var>,
        private: Vec<Var>,
        mask: Vec<Vec<bool>>,
        form: GramForm,
        grams: Vec<f64>,
        scale: f64,
    },
}

/// Which product of the stacked hidden-state matrices `H_s`, `H_p` (rows are
/// timesteps) [`Tape::cross_gram_sq`] penalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramForm {
    /// `‖H_s H_pᵀ‖_F²`: squared inner products between every shared and
    /// every private hidden row. Zero iff all those rows are orthogonal.
    #[default]
    Timestep,
    /// `‖H_sᵀ H_p‖_F²`: squared correlations between shared and private
    /// hidden units accumulated over timesteps.
    Feature,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Softmax(..) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::FrobeniusSq(..) => OpKind::FrobeniusSq,
            Op::Sum(..) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::ReverseGrad(..) => OpKind::ReverseGrad,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Blend { .. } => OpKind::Blend,
            Op::CrossGramSq { .. } => OpKind::CrossGramSq,
        }
    }
}

struct Node {
    value: Tensor,
    trainable: bool,
    needs_grad: bool,
    op: Op,
}

/// Define-by-run computation record. Build one per batch: register parameters
/// with [`Tape::param`], compose ops, then call [`Tape::backward`] on a scalar.
///
/// Records are appended in evaluation order, so every record's inputs precede
/// it and the reverse sweep is a single pass over the node list.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable leaf (zeros when the loss does not depend on it).
    /// `None` for nodes that are not trainable.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts the gradient rule of one op kind (scales its input gradients
    /// by 1.5). Only useful for checking that the gradient checker notices.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            trainable,
            needs_grad: trainable,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            trainable: false,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let x = ad[i * k + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[l * n..(l + 1) * n];
                for j in 0..n {
                    row[j] += x * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Transpose(x), needs))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = av.with_data(data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.ndim() != 1 || xv.cols() != bv.len() {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = bv.len();
        let bd = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect();
        let out = xv.with_data(data);
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let needs = self.needs(x);
        self.push(out, Op::Tanh(x), needs)
    }

    /// Row-wise softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = xv.with_data(data);
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Mean over rows of `-ln(max(p[label], CE_CLAMP))`. A 1-D `probs` is a
    /// single row.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        let (rows, c) = (pv.rows(), pv.cols());
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: pv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let total: f64 = labels.iter().enumerate().map(|(i, &l)| -pv.get(i, l).max(CE_CLAMP).ln()).sum();
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenation along the last axis. Inputs must agree on row count and
    /// dimensionality.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.value(v),
            None => return Err(Error::invalid("concat of an empty list")),
        };
        let (ndim, rows) = (first.ndim(), first.rows());
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = self.value(v);
            if t.ndim() != ndim || t.rows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in inputs {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let shape = if ndim == 1 { vec![total] } else { vec![rows, total] };
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(inputs.to_vec()), needs))
    }

    /// Columns `start..end` (last axis).
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: xv.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let out = xv.slice_cols(start, end);
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, needs))
    }

    pub fn frobenius_sq(&mut self, m: Var) -> Result<Var> {
        let mv = self.value(m);
        if mv.ndim() != 2 {
            return Err(Error::Shape {
                op: "frobenius_sq",
                left: mv.shape().to_vec(),
                right: vec![],
            });
        }
        let total = mv.data().iter().map(|v| v * v).sum();
        let needs = self.needs(m);
        Ok(self.push(Tensor::scalar(total), Op::FrobeniusSq(m), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, c), needs)
    }

    /// Multiplies every entry of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::Shape {
                op: "mul_scalar",
                left: self.value(x).shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let k = sv.item();
        let out = self.value(x).map(|v| v * k);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::MulScalar(x, s), needs))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-scale` on the way back.
    pub fn reverse_grad(&mut self, x: Var, scale: f64) -> Var {
        let out = self.value(x).clone();
        let needs = self.needs(x);
        self.push(out, Op::ReverseGrad(x, scale), needs)
    }

    /// Per-column maximum over timesteps. `steps[t]` is a `B×w` matrix and
    /// `mask[b][t]` marks valid positions. Ties resolve to the earliest step.
    pub fn max_pool(&mut self, steps: &[Var], mask: &[Vec<bool>]) -> Result<Var> {
        let first = match steps.first() {
            Some(&v) => self.value(v),
            None => return Err(Error::invalid("max_pool over zero timesteps")),
        };
        let (b, w) = (first.rows(), first.cols());
        if mask.len() != b || mask.iter().any(|m| m.len() != steps.len()) {
            return Err(Error::Shape {
                op: "max_pool",
                left: vec![b, steps.len()],
                right: vec![mask.len(), mask.first().map_or(0, |m| m.len())],
            });
        }
        for &s in steps {
            same_shape("max_pool", first, self.value(s))?;
        }
        let mut out = vec![0.0; b * w];
        let mut argmax = vec![0usize; b * w];
        for (i, row_mask) in mask.iter().enumerate() {
            let mut seen = false;
            for (t, &valid) in row_mask.iter().enumerate() {
                if !valid {
                    continue;
                }
                let row = self.value(steps[t]).row(i);
                for j in 0..w {
                    if !seen || row[j] > out[i * w + j] {
                        out[i * w + j] = row[j];
                        argmax[i * w + j] = t;
                    }
                }
                seen = true;
            }
            if !seen {
                return Err(Error::invalid(format!("max_pool: sentence {i} has no valid timestep")));
            }
        }
        let needs = steps.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(vec![b, w], out)?,
            Op::MaxPool {
                steps: steps.to_vec(),
                argmax,
            },
            needs,
        ))
    }

    /// Row-wise select: row `i` comes from `new` when `keep_new[i]`, else from `old`.
    pub fn blend(&mut self, new: Var, old: Var, keep_new: &[bool]) -> Result<Var> {
        let (nv, ov) = (self.value(new), self.value(old));
        same_shape("blend", nv, ov)?;
        if keep_new.len() != nv.rows() {
            return Err(Error::Shape {
                op: "blend",
                left: nv.shape().to_vec(),
                right: vec![keep_new.len()],
            });
        }
        let mut data = Vec::with_capacity(nv.len());
        for (i, &k) in keep_new.iter().enumerate() {
            data.extend_from_slice(if k { nv.row(i) } else { ov.row(i) });
        }
        let out = nv.with_data(data);
        let needs = self.needs(new) || self.needs(old);
        Ok(self.push(
            out,
            Op::Blend {
                new,
                old,
                keep_new: keep_new.to_vec(),
            },
            needs,
        ))
    }

    /// `scale * Σ_b ‖G_b‖_F²` where `G_b` is the [`GramForm`] product of
    /// `H_s(b)` and `H_p(b)`, the matrices stacking row `b` of `shared[t]` and
    /// `private[t]` over the valid timesteps of sentence `b`.
    pub fn cross_gram_sq(&mut self, shared: &[Var], private: &[Var], mask: &[Vec<bool>], form: GramForm, scale: f64) -> Result<Var> {
        if shared.is_empty() || shared.len() != private.len() {
            return Err(Error::Shape {
                op: "cross_gram_sq",
                left: vec![shared.len()],
                right: vec![private.len()],
            });
        }
        let s0 = self.value(shared[0]);
        let p0 = self.value(private[0]);
        let (b, ws, wp) = (s0.rows(), s0.cols(), p0.cols());
        let widths_ok = form == GramForm::Feature || ws == wp;
        if !widths_ok || p0.rows() != b || mask.len() != b || mask.iter().any(|m| m.len() != shared.len()) {
            return Err(Error::Shape {
                op: "cross_gram_sq",
                left: s0.shape().to_vec(),
                right: p0.shape().to_vec(),
            });
        }
        for t in 0..shared.len() {
            same_shape("cross_gram_sq", s0, self.value(shared[t]))?;
            same_shape("cross_gram_sq", p0, self.value(private[t]))?;
        }
        let steps = shared.len();
        let grams = match form {
            GramForm::Feature => {
                let mut grams = vec![0.0; b * ws * wp];
                for (i, row_mask) in mask.iter().enumerate() {
                    let g = &mut grams[i * ws * wp..(i + 1) * ws * wp];
                    for (t, &valid) in row_mask.iter().enumerate() {
                        if !valid {
                            continue;
                        }
                        let s = self.value(shared[t]).row(i);
                        let p = self.value(private[t]).row(i);
                        for (r, &sv) in s.iter().enumerate() {
                            if sv == 0.0 {
                                continue;
                            }
                            for (c, &pv) in p.iter().enumerate() {
                                g[r * wp + c] += sv * pv;
                            }
                        }
                    }
                }
                grams
            }
            GramForm::Timestep => {
                let mut grams = vec![0.0; b * steps * steps];
                for (i, row_mask) in mask.iter().enumerate() {
                    let g = &mut grams[i * steps * steps..(i + 1) * steps * steps];
                    for t in (0..steps).filter(|&t| row_mask[t]) {
                        let s = self.value(shared[t]).row(i);
                        for u in (0..steps).filter(|&u| row_mask[u]) {
                            let p = self.value(private[u]).row(i);
                            g[t * steps + u] = s.iter().zip(p).map(|(x, y)| x * y).sum();
                        }
                    }
                }
                grams
            }
        };
        let total = scale * grams.iter().map(|v| v * v).sum::<f64>();
        let needs = shared.iter().chain(private).any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossGramSq {
                shared: shared.to_vec(),
                private: private.to_vec(),
                mask: mask.to_vec(),
                form,
                grams,
                scale,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate over every
    /// use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![1],
            });
        }
        if !lv.item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let factor = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
            let g: Vec<f64> = if factor != 1.0 { g.iter().map(|v| v * factor).collect() } else { g };
            self.propagate(node, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let slot = if node.trainable {
                let data = grads
                    .get_mut(idx)
                    .and_then(|g| g.take())
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for leaf {idx}")));
                }
                Some(node.value.with_data(data))
            } else {
                None
            };
            out.push(slot);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        let mut send = |v: Var, contrib: &[f64]| {
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let brow = &bd[l * n..(l + 1) * n];
                            da[i * k + l] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let x = ad[i * k + l];
                            if x == 0.0 {
                                continue;
                            }
                            let drow = &mut db[l * n..(l + 1) * n];
                            for j in 0..n {
                                drow[j] += x * grow[j];
                            }
                        }
                    }
                    send(*b, &db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                send(*x, &dx);
            }
            Op::Add(a, b) => {
                send(*a, g);
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<f64> = g.iter().zip(bd).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                send(*a, &da);
                send(*b, &db);
            }
            Op::AddBias(x, bias) => {
                send(*x, g);
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                send(*bias, &db);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = g.iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                send(*x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<f64> = g.iter().zip(y.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                send(*x, &dx);
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dr, gr), pr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                send(*x, &dx);
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(*probs);
                let rows = labels.len() as f64;
                let mut dp = vec![0.0; pv.len()];
                let c = pv.cols();
                for (i, &l) in labels.iter().enumerate() {
                    let p = pv.get(i, l);
                    if p > CE_CLAMP {
                        dp[i * c + l] = -g[0] / (rows * p);
                    }
                }
                send(*probs, &dp);
            }
            Op::Concat(inputs) => {
                let total = y.cols();
                let rows = y.rows();
                let mut offset = 0;
                for &v in inputs {
                    let w = self.value(v).cols();
                    let mut dx = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    send(v, &dx);
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (cols, w) = (xv.cols(), y.cols());
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    dx[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, &dx);
            }
            Op::FrobeniusSq(m) => {
                let dx: Vec<f64> = self.value(*m).data().iter().map(|v| 2.0 * v * g[0]).collect();
                send(*m, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).len()];
                send(*x, &dx);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                send(*x, &dx);
            }
            Op::MulScalar(x, s) => {
                let k = self.value(*s).item();
                let dx: Vec<f64> = g.iter().map(|v| v * k).collect();
                send(*x, &dx);
                let ds: f64 = g.iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                send(*s, &[ds]);
            }
            Op::ReverseGrad(x, scale) => {
                let dx: Vec<f64> = g.iter().map(|v| -scale * v).collect();
                send(*x, &dx);
            }
            Op::MaxPool { steps, argmax } => {
                let mut per_step: Vec<Option<Vec<f64>>> = vec![None; steps.len()];
                for (flat, &t) in argmax.iter().enumerate() {
                    if g[flat] == 0.0 {
                        continue;
                    }
                    per_step[t].get_or_insert_with(|| vec![0.0; g.len()])[flat] += g[flat];
                }
                for (t, d) in per_step.into_iter().enumerate() {
                    if let Some(d) = d {
                        send(steps[t], &d);
                    }
                }
            }
            Op::Blend { new, old, keep_new } => {
                let c = y.cols();
                let mut dn = vec![0.0; g.len()];
                let mut dold = vec![0.0; g.len()];
                for (i, &k) in keep_new.iter().enumerate() {
                    let target = if k { &mut dn } else { &mut dold };
                    target[i * c..(i + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                send(*new, &dn);
                send(*old, &dold);
            }
            Op::CrossGramSq {
                shared,
                private,
                mask,
                form,
                grams,
                scale,
            } => {
                let k = 2.0 * scale * g[0];
                match form {
                    GramForm::Feature => self.feature_gram_backward(shared, private, mask, grams, k, &mut send),
                    GramForm::Timestep => self.timestep_gram_backward(shared, private, mask, grams, k, &mut send),
                }
            }
        }
    }

    fn feature_gram_backward(
        &self,
        shared: &[Var],
        private: &[Var],
        mask: &[Vec<bool>],
        grams: &[f64],
        k: f64,
        send: &mut impl FnMut(Var, &[f64]),
    ) {
        let ws = self.value(shared[0]).cols();
        let wp = self.value(private[0]).cols();
        let b = mask.len();
        for t in 0..shared.len() {
            if !self.needs(shared[t]) && !self.needs(private[t]) {
                continue;
            }
            let sv = self.value(shared[t]);
            let pv = self.value(private[t]);
            let mut ds = vec![0.0; b * ws];
            let mut dp = vec![0.0; b * wp];
            for (i, row_mask) in mask.iter().enumerate() {
                if !row_mask[t] {
                    continue;
                }
                let gm = &grams[i * ws * wp..(i + 1) * ws * wp];
                let (s, p) = (sv.row(i), pv.row(i));
                for r in 0..ws {
                    let grow = &gm[r * wp..(r + 1) * wp];
                    let mut acc = 0.0;
                    for c in 0..wp {
                        acc += grow[c] * p[c];
                        dp[i * wp + c] += k * grow[c] * s[r];
                    }
                    ds[i * ws + r] = k * acc;
                }
            }
            send(shared[t], &ds);
            send(private[t], &dp);
        }
    }

    fn timestep_gram_backward(
        &self,
        shared: &[Var],
        private: &[Var],
        mask: &[Vec<bool>],
        grams: &[f64],
        k: f64,
        send: &mut impl FnMut(Var, &[f64]),
    ) {
        let w = self.value(shared[0]).cols();
        let b = mask.len();
        let steps = shared.len();
        let mut ds: Vec<Vec<f64>> = vec![vec![0.0; b * w]; steps];
        let mut dp: Vec<Vec<f64>> = vec![vec![0.0; b * w]; steps];
        for (i, row_mask) in mask.iter().enumerate() {
            let gm = &grams[i * steps * steps..(i + 1) * steps * steps];
            for t in (0..steps).filter(|&t| row_mask[t]) {
                let s = self.value(shared[t]).row(i);
                for u in (0..steps).filter(|&u| row_mask[u]) {
                    let c = k * gm[t * steps + u];
                    if c == 0.0 {
                        continue;
                    }
                    let p = self.value(private[u]).row(i);
                    let dst = &mut ds[t][i * w..(i + 1) * w];
                    for (d, pv) in dst.iter_mut().zip(p) {
                        *d += c * pv;
                    }
                    let dpt = &mut dp[u][i * w..(i + 1) * w];
                    for (d, sv) in dpt.iter_mut().zip(s) {
                        *d += c * sv;
                    }
                }
            }
        }
        for t in 0..steps {
            send(shared[t], &ds[t]);
            send(private[t], &dp[t]);
        }
    }
}

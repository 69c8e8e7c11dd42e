//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] lives for one forward/backward pass. Operations record their
//! inputs and whatever they need for the backward pass; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients into the
//! [`ParamStore`] that supplied the parameter leaves.

use std::ops::Range;

use crate::error::{dim_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation defined outside this module (quantizers, distillation losses).
pub trait CustomOp<S: Scalar> {
    fn inputs(&self) -> Vec<Var>;

    /// Gradients w.r.t. each entry of [`CustomOp::inputs`], in order.
    fn backward(&self, tape: &Tape<S>, upstream: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>>;
}

enum Op<S: Scalar> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    Slice {
        src: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalMask(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        bias: Option<Var>,
        inv_rms: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<S>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Tensor<S>,
        temperature: S,
        probs: Tensor<S>,
    },
    Mse {
        x: Var,
        target: Tensor<S>,
    },
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Sum(Var),
    Mean(Var),
    Custom(Box<dyn CustomOp<S>>),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a parameter leaf; gradients flow back only if it is trainable.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Records the result of a [`CustomOp`] whose forward value was computed
    /// by the caller.
    pub fn custom(&mut self, value: Tensor<S>, op: Box<dyn CustomOp<S>>) -> Var {
        let rg = self.any_grad(&op.inputs());
        self.push(value, Op::Custom(op), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`, used for linear layers stored as `[out × in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(S::exp);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= S::zero()) {
            return Err(Error::Domain(format!("log of nonpositive value {x}")));
        }
        let v = self.value(a).map(S::ln);
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Log(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(S::zero()));
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::gelu);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = tensor::transpose(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let v = tensor::slice2d(self.value(a), rows.clone(), cols.clone())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::Slice { src: a, rows, cols }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_rows(&ts)?;
        let rg = self.any_grad(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&ts)?;
        let rg = self.any_grad(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = tensor::embedding(self.value(table), ids)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Fills the strict upper triangle of a square score matrix with -inf.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let v = tensor::causal_mask_fill(self.value(a), S::neg_infinity())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(v, Op::CausalMask(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, bias: Option<Var>, eps: S) -> Result<Var> {
        if eps <= S::zero() {
            return Err(Error::Contract("rmsnorm eps must be positive".into()));
        }
        let (v, inv_rms) = tensor::rmsnorm(
            self.value(x),
            self.value(gain),
            bias.map(|b| self.value(b)),
            eps,
        )?;
        let mut deps = vec![x, gain];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            v,
            Op::RmsNorm {
                x,
                gain,
                bias,
                inv_rms,
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy; returns a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), targets)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Soft cross-entropy against a fixed target distribution.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Tensor<S>, temperature: S) -> Result<Var> {
        let (loss, probs) = tensor::soft_cross_entropy(self.value(logits), &target, temperature)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                target,
                temperature,
                probs,
            },
            rg,
        ))
    }

    /// Mean squared difference against a fixed target.
    pub fn mse(&mut self, x: Var, target: Tensor<S>) -> Result<Var> {
        self.value(x).same_shape(&target, "mse")?;
        let n = S::of(target.numel() as f64);
        let loss = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
            / n;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { x, target }, rg))
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / S::of(t.numel() as f64));
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Back-propagates from a scalar `loss`, adding `∂loss/∂p` into the
    /// gradient of every trainable parameter reached.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.numel(), self.value(v).numel());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g.reshape(self.value(v).shape()).expect("same numel")),
        }
    }

    fn backward_node(
        &self,
        node: &Node<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        store: &mut ParamStore<S>,
    ) -> Result<()> {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let p = store.get_mut(*id);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = tensor::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = tensor::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    let ga = tensor::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = tensor::matmul_tn(g, self.value(*a))?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.zip_map(&node.value, "exp", |x, y| x * y)?);
            }
            Op::Log(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), "log", |x, y| x / y)?);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), "relu", |x, y| if y > S::zero() { x } else { S::zero() })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), "gelu", |x, y| x * tensor::gelu_grad(y))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, tensor::transpose(g)?);
            }
            Op::Slice { src, rows, cols } => {
                let sv = self.value(*src);
                let mut full = Tensor::zeros(sv.shape());
                let c = sv.cols();
                for (gi, i) in rows.clone().enumerate() {
                    full.data_mut()[i * c + cols.start..i * c + cols.end].copy_from_slice(g.row(gi));
                }
                self.accumulate(grads, *src, full);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let part = Tensor::new(self.value(p).shape(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    self.accumulate(grads, p, part);
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let part = tensor::slice2d(g, 0..g.rows(), col..col + w)?;
                    col += w;
                    self.accumulate(grads, p, part);
                }
            }
            Op::Embedding { table, ids } => {
                let mut gt = Tensor::zeros(self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    gt.row_mut(id).iter_mut().zip(g.row(r)).for_each(|(a, &b)| *a += b);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::CausalMask(a) => {
                let ga = tensor::causal_mask_fill(g, S::zero())?;
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut ga = g.clone();
                for i in 0..p.rows() {
                    let pr = p.row(i);
                    let dot: S = g.row(i).iter().zip(pr).map(|(&x, &y)| x * y).sum();
                    ga.row_mut(i)
                        .iter_mut()
                        .zip(pr)
                        .for_each(|(gv, &pv)| *gv = pv * (*gv - dot));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RmsNorm {
                x,
                gain,
                bias,
                inv_rms,
            } => self.rmsnorm_backward(*x, *gain, *bias, inv_rms, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / S::of(targets.len() as f64);
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl.row_mut(i)[t] -= S::one();
                }
                self.accumulate(grads, *logits, gl.map(|v| v * scale));
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                temperature,
                probs,
            } => {
                let scale = g.item() / (S::of(target.rows() as f64) * *temperature);
                let gl = probs.zip_map(target, "soft_cross_entropy", |p, t| (p - t) * scale)?;
                self.accumulate(grads, *logits, gl);
            }
            Op::Mse { x, target } => {
                let scale = g.item() * S::of(2.0) / S::of(target.numel() as f64);
                let gx = self.value(*x).zip_map(target, "mse", |a, b| (a - b) * scale)?;
                self.accumulate(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let gx = g.zip_map(self.value(*x), "clamp", |gv, xv| {
                    if xv >= lo && xv <= hi {
                        gv
                    } else {
                        S::zero()
                    }
                })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g.item()));
            }
            Op::Mean(a) => {
                let n = S::of(self.value(*a).numel() as f64);
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g.item() / n));
            }
            Op::Custom(op) => {
                let inputs = op.inputs();
                let gs = op.backward(self, g)?;
                if gs.len() != inputs.len() {
                    return Err(dim_err!("custom op returned {} grads for {} inputs", gs.len(), inputs.len()));
                }
                for (v, gv) in inputs.into_iter().zip(gs) {
                    if let Some(gv) = gv {
                        self.accumulate(grads, v, gv);
                    }
                }
            }
        }
        Ok(())
    }

    fn rmsnorm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Option<Var>,
        inv_rms: &[S],
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let xv = self.value(x);
        let a = self.value(gain).data();
        let d = xv.cols();
        let n = S::of(d as f64);
        let mut gx = Tensor::zeros(xv.shape());
        let mut ga = Tensor::zeros(&[d]);
        let mut gb = Tensor::zeros(&[d]);
        for i in 0..xv.rows() {
            let r = inv_rms[i];
            let xr = xv.row(i);
            let gr = g.row(i);
            let dot: S = (0..d).map(|j| a[j] * gr[j] * xr[j]).sum();
            let coef = r * r * dot / n;
            let out = gx.row_mut(i);
            for j in 0..d {
                out[j] = r * (a[j] * gr[j] - xr[j] * coef);
                ga.data_mut()[j] += gr[j] * xr[j] * r;
                gb.data_mut()[j] += gr[j];
            }
        }
        self.accumulate(grads, x, gx);
        self.accumulate(grads, gain, ga);
        if let Some(b) = bias {
            self.accumulate(grads, b, gb);
        }
    }
}

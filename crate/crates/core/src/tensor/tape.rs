use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, AttnDims};
use super::{check_finite, Result, Scalar, Tensor, TensorError};

/// Recorded primitive. Parents are node ids, always smaller than the node's own.
enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    Reshape(usize),
    TransposeLast2(usize),
    Concat {
        a: usize,
        b: usize,
        d1: usize,
    },
    Narrow {
        src: usize,
        axis: usize,
        start: usize,
    },
    Silu(usize),
    Softmax(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv: Vec<T>,
    },
    Rope {
        x: usize,
        cos: Arc<[T]>,
        sin: Arc<[T]>,
        offset: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        probs: Vec<T>,
        dims: AttnDims,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        ignore: Option<u32>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(usize),
    Mean(usize),
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of primitive applications.
///
/// A graph built with [`Graph::new`] records everything needed for
/// [`Graph::backward`]; one built with [`Graph::inference`] only evaluates.
/// A graph is confined to one thread.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded in a [`Graph`].
pub struct Var<'g, T: Scalar = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`; zeros if the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Tensor<T> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }

    /// Moves the gradient of `var` out, leaving `None` behind.
    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }

    pub fn reached(&self, var: Var<'_, T>) -> bool {
        self.grads[var.id].is_some()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shape"),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph that evaluates without recording backward information.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, self.recording)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var { graph: self, id }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        self.recording && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].needs_grad)
        }
    }

    fn record(&self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var<'_, T>> {
        check_finite(name, &value)?;
        let needs = self.needs(parents);
        Ok(self.push(value, op, needs))
    }

    /// Causal grouped-query attention over `q[b,tq,hq,dh]`, `k,v[b,tk,hkv,dh]`.
    pub fn attention<'g>(&'g self, q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>) -> Result<Var<'g, T>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let dims = attn_dims(qv.shape(), kv.shape(), vv.shape())?;
        let mut out = vec![T::zero(); qv.len()];
        let needs = self.needs(&[q.id, k.id, v.id]);
        let mut probs = if needs {
            vec![T::zero(); dims.probs_len()]
        } else {
            Vec::new()
        };
        kernels::attention_forward(
            qv.data(),
            kv.data(),
            vv.data(),
            dims,
            &mut out,
            needs.then_some(probs.as_mut_slice()),
        );
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        self.record(
            "attention",
            value,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                probs,
                dims,
            },
            &[q.id, k.id, v.id],
        )
    }

    /// Row lookup `table[ids]`, shaped `out_shape ++ [d]`.
    pub fn embedding<'g>(&'g self, table: Var<'g, T>, ids: &[u32], out_shape: &[usize]) -> Result<Var<'g, T>> {
        let tv = table.value();
        if tv.rank() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: out_shape.to_vec(),
            });
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        self.record(
            "embedding",
            value,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            &[table.id],
        )
    }

    /// Mean negative log-likelihood of `targets` under `logits[.., V]`.
    ///
    /// Positions whose target equals `ignore` are excluded from the mean.
    pub fn cross_entropy<'g>(&'g self, logits: Var<'g, T>, targets: &[u32], ignore: Option<u32>) -> Result<Var<'g, T>> {
        let lv = logits.value();
        let vocab = lv.last_dim();
        if lv.len() != targets.len() * vocab {
            return Err(TensorError::Shape {
                op: "cross_entropy_logits",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (loss, probs, count) = kernels::cross_entropy_forward(lv.data(), vocab, targets, ignore)?;
        let needs = self.needs(&[logits.id]);
        self.record(
            "cross_entropy_logits",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.id,
                targets: if needs { targets.to_vec() } else { Vec::new() },
                ignore,
                probs: if needs { probs } else { Vec::new() },
                count,
            },
            &[logits.id],
        )
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.recording {
            return Err(TensorError::Usage("backward on an inference graph".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(lv.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| &*nodes[i].value;
            let wants = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[*b], g.clone());
                    }
                    if wants(*a) {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[*b], g.scale(-T::one()));
                    }
                    if wants(*a) {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[*b], g.hadamard(val(*a))?);
                    }
                    if wants(*a) {
                        accumulate(&mut grads[*a], g.hadamard(val(*b))?);
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads[*a], g.scale(*f)),
                Op::MatMul(a, b) => {
                    let (da, db) = kernels::matmul_backward(val(*a), val(*b), &g);
                    if wants(*b) {
                        accumulate(&mut grads[*b], db);
                    }
                    if wants(*a) {
                        accumulate(&mut grads[*a], da);
                    }
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads[*a], g.reshape(val(*a).shape().to_vec())?);
                }
                Op::TransposeLast2(a) => {
                    accumulate(&mut grads[*a], kernels::transpose_last2(&g)?);
                }
                Op::Concat { a, b, d1 } => {
                    let (ga, gb) = kernels::split_lastdim(&g, *d1);
                    if wants(*b) {
                        accumulate(&mut grads[*b], gb);
                    }
                    if wants(*a) {
                        accumulate(&mut grads[*a], ga);
                    }
                }
                Op::Narrow { src, axis, start } => {
                    let dx = kernels::narrow_backward(val(*src).shape(), *axis, *start, &g);
                    accumulate(&mut grads[*src], dx);
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let mut dx = g;
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        *d *= kernels::silu_grad_scalar(xv);
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::Softmax(a) => {
                    accumulate(&mut grads[*a], kernels::softmax_backward(&node.value, &g));
                }
                Op::RmsNorm { x, gain, inv } => {
                    let (dx, dg) = kernels::rms_norm_backward(val(*x), val(*gain), inv, &g);
                    if wants(*gain) {
                        accumulate(&mut grads[*gain], dg);
                    }
                    if wants(*x) {
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::Rope { x, cos, sin, offset } => {
                    let s = g.shape();
                    let mut dx = vec![T::zero(); g.len()];
                    kernels::rope_rotate(g.data(), &mut dx, s[0], s[1], s[2], s[3], *offset, cos, sin, true);
                    accumulate(&mut grads[*x], Tensor::new(s.to_vec(), dx)?);
                }
                Op::Attention { q, k, v, probs, dims } => {
                    let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                    let mut dq = vec![T::zero(); qv.len()];
                    let mut dk = vec![T::zero(); kv.len()];
                    let mut dv = vec![T::zero(); vv.len()];
                    kernels::attention_backward(
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        probs,
                        g.data(),
                        *dims,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    if wants(*v) {
                        accumulate(&mut grads[*v], Tensor::new(vv.shape().to_vec(), dv)?);
                    }
                    if wants(*k) {
                        accumulate(&mut grads[*k], Tensor::new(kv.shape().to_vec(), dk)?);
                    }
                    if wants(*q) {
                        accumulate(&mut grads[*q], Tensor::new(qv.shape().to_vec(), dq)?);
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = val(*table);
                    let d = tv.shape()[1];
                    let mut dt = Tensor::zeros(tv.shape().to_vec());
                    for (r, &id) in ids.iter().enumerate() {
                        let row = &mut dt.data_mut()[id as usize * d..(id as usize + 1) * d];
                        for (acc, &gv) in row.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *acc += gv;
                        }
                    }
                    accumulate(&mut grads[*table], dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                    count,
                } => {
                    let lv = val(*logits);
                    let vocab = lv.last_dim();
                    let mut dl = probs.clone();
                    if *count > 0 {
                        let coef = g.data()[0] / T::from_usize(*count);
                        for (r, &tgt) in targets.iter().enumerate() {
                            let row = &mut dl[r * vocab..(r + 1) * vocab];
                            if Some(tgt) == *ignore {
                                continue;
                            }
                            row[tgt as usize] -= T::one();
                            for v in row.iter_mut() {
                                *v *= coef;
                            }
                        }
                    }
                    accumulate(&mut grads[*logits], Tensor::new(lv.shape().to_vec(), dl)?);
                }
                Op::Sum(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads[*a], Tensor::full(shape, g.data()[0]));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let v = g.data()[0] / T::from_usize(x.len());
                    accumulate(&mut grads[*a], Tensor::full(x.shape().to_vec(), v));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn attn_dims(q: &[usize], k: &[usize], v: &[usize]) -> Result<AttnDims> {
    let err = || TensorError::Shape {
        op: "attention",
        lhs: q.to_vec(),
        rhs: k.to_vec(),
    };
    if q.len() != 4 || k.len() != 4 || k != v {
        return Err(err());
    }
    let dims = AttnDims {
        batch: q[0],
        tq: q[1],
        hq: q[2],
        dh: q[3],
        tk: k[1],
        hkv: k[2],
    };
    if k[0] != q[0] || k[3] != q[3] || dims.hkv == 0 || !dims.hq.is_multiple_of(dims.hkv) || dims.tk < dims.tq {
        return Err(err());
    }
    Ok(dims)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn binary(
        self,
        other: Self,
        name: &'static str,
        f: impl Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Self> {
        let v = f(&self.value(), &other.value())?;
        self.graph.record(name, v, op, &[self.id, other.id])
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", Tensor::add, Op::Add(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", Tensor::sub, Op::Sub(self.id, other.id))
    }

    pub fn hadamard(self, other: Self) -> Result<Self> {
        self.binary(other, "hadamard", Tensor::hadamard, Op::Mul(self.id, other.id))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.binary(other, "matmul", kernels::matmul, Op::MatMul(self.id, other.id))
    }

    pub fn scale(self, factor: T) -> Result<Self> {
        let v = self.value().scale(factor);
        self.graph.record("scale", v, Op::Scale(self.id, factor), &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        self.graph.record("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    pub fn transpose_last2(self) -> Result<Self> {
        let v = kernels::transpose_last2(&self.value())?;
        self.graph
            .record("transpose_last2", v, Op::TransposeLast2(self.id), &[self.id])
    }

    pub fn concat_lastdim(self, other: Self) -> Result<Self> {
        let d1 = self.value().last_dim();
        self.binary(
            other,
            "concat_lastdim",
            kernels::concat_lastdim,
            Op::Concat {
                a: self.id,
                b: other.id,
                d1,
            },
        )
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let v = kernels::narrow(&self.value(), axis, start, len)?;
        self.graph.record(
            "narrow",
            v,
            Op::Narrow {
                src: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    pub fn silu(self) -> Result<Self> {
        let v = self.value().silu();
        self.graph.record("silu", v, Op::Silu(self.id), &[self.id])
    }

    pub fn softmax_lastdim(self) -> Result<Self> {
        let v = kernels::softmax_lastdim(&self.value())?;
        self.graph
            .record("softmax_lastdim", v, Op::Softmax(self.id), &[self.id])
    }

    pub fn rms_norm(self, gain: Self, eps: T) -> Result<Self> {
        let (v, inv) = kernels::rms_norm(&self.value(), &gain.value(), eps)?;
        let parents = [self.id, gain.id];
        let inv = if self.graph.needs(&parents) { inv } else { Vec::new() };
        self.graph.record(
            "rms_norm",
            v,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv,
            },
            &parents,
        )
    }

    /// Rotary rotation of `[b, t, h, dh]` with `[max_pos, dh/2]` tables;
    /// token `i` sits at position `offset + i`.
    pub fn rope(self, cos: &Arc<[T]>, sin: &Arc<[T]>, offset: usize) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || !s[3].is_multiple_of(2) {
            return Err(TensorError::Usage(format!("rope needs [b, t, h, even dh], got {s:?}")));
        }
        let half = s[3] / 2;
        if (offset + s[1]) * half > cos.len() {
            return Err(TensorError::Index {
                op: "rope",
                index: offset + s[1],
                size: cos.len() / half.max(1),
            });
        }
        let mut out = vec![T::zero(); x.len()];
        kernels::rope_rotate(x.data(), &mut out, s[0], s[1], s[2], s[3], offset, cos, sin, false);
        let v = Tensor::new(s.to_vec(), out)?;
        self.graph.record(
            "rope",
            v,
            Op::Rope {
                x: self.id,
                cos: Arc::clone(cos),
                sin: Arc::clone(sin),
                offset,
            },
            &[self.id],
        )
    }

    pub fn sum(self) -> Result<Self> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.record("sum", v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Self> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / T::from_usize(x.len().max(1)));
        self.graph.record("mean", v, Op::Mean(self.id), &[self.id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([3], &[1., 2., 3.]).unwrap());
        let y = g.param(Tensor::from_f64([3], &[4., -5., 6.]).unwrap());
        let loss = x.hadamard(y).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[4., -5., 6.]);
        assert_eq!(grads.get(y).data(), &[1., 2., 3.]);
    }

    #[test]
    fn silu_gradient_at_zero_is_half() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([4]));
        let loss = x.silu().unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[0.5; 4]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x + x) → dx = 3
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([2], &[0.3, -0.7]).unwrap());
        let y = x.add(x).unwrap().add(x).unwrap();
        let grads = g.backward(y.sum().unwrap()).unwrap();
        assert_eq!(grads.get(x).data(), &[3., 3.]);
    }

    #[test]
    fn unreached_leaves_get_zero() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([2]));
        let unused = g.param(Tensor::ones([5]));
        let grads = g.backward(x.sum().unwrap()).unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused), Tensor::zeros([5]));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([2]));
        assert!(matches!(g.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn constants_do_not_record() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones([2]));
        let x = g.param(Tensor::ones([2]));
        let loss = c.hadamard(x).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(!grads.reached(c));
        assert_eq!(grads.get(x).data(), &[1., 1.]);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::from_f64([1], &[f64::MAX]).unwrap());
        assert!(matches!(x.scale(2.0), Err(TensorError::NonFinite { op: "scale" })));
    }
}

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::kernels::{self, split_axis};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var },
    AddScalar(Var),
    MulScalar(Var, T),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, xhat: Vec<T>, rstd: Vec<T> },
    Silu(Var),
    ClampMin(Var, T),
    Exp(Var),
    Ln(Var),
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    ConvLayers { h: Var, kernel: Var, padding: usize },
    GatherRows { x: Var, index: Vec<Option<usize>> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Ordered trace of primitive applications. Nodes are appended in evaluation
/// order, so the node index is a topological order and the adjoint pass simply
/// walks it backwards.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(DiffError::Axis { op, axis, rank })
    } else {
        Ok(())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Trainable input: gradients are produced for it by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or(DiffError::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let stra = kernels::broadcast_strides(&sa, &out_shape);
            let strb = kernels::broadcast_strides(&sb, &out_shape);
            let mut out = vec![T::zero(); numel(&out_shape)];
            kernels::for_each_broadcast(&out_shape, &stra, &strb, |o, ia, ib| {
                out[o] = f(da[ia], db[ib]);
            });
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::raw(out_shape, data), Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, a)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    // ---------------------------------------------------------------- matmul

    /// Contraction over the last axis of `a` and the second-to-last of `b`.
    /// Leading batch axes must be equal, or one operand must be a plain matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || DiffError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (out_shape, data) = if bb.is_empty() {
            let rows = numel(ba) * m;
            let mut out = vec![T::zero(); rows * n];
            kernels::gemm(av, bv, &mut out, rows, k, n);
            let mut shape = ba.to_vec();
            shape.extend([m, n]);
            (shape, out)
        } else if ba.is_empty() || ba == bb {
            let batch = numel(bb);
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                let aoff = if ba.is_empty() { 0 } else { i * m * k };
                kernels::gemm(
                    &av[aoff..aoff + m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = bb.to_vec();
            shape.extend([m, n]);
            (shape, out)
        } else {
            return Err(err());
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::raw(out_shape, data), Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `w` shaped `[in, out]` and `b` shaped `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let (sy, sbias) = (self.shape(y).to_vec(), self.shape(b).to_vec());
                if sbias.len() != 1 || sbias[0] != *sy.last().unwrap() {
                    return Err(DiffError::Shape {
                        op: "linear",
                        lhs: sy,
                        rhs: sbias,
                    });
                }
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() {
            return Err(DiffError::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        for &a in axes {
            check_axis("permute", a, shape.len())?;
            if std::mem::replace(&mut seen[a], true) {
                return Err(DiffError::Usage(format!("permute: repeated axis {a}")));
            }
        }
        let (out_shape, data) = kernels::permute(self.value(x).data(), &shape, axes);
        let rg = self.rg(x);
        Ok(self.push(Tensor::raw(out_shape, data), Op::Permute(x, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(DiffError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(DiffError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::raw(out_shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(DiffError::Usage(format!(
                "slice [{start}, {}) out of range for extent {} on axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::raw(out_shape, data), Op::Slice { x, axis, start }, rg))
    }

    /// Rows of `x` (viewed as `[rows, last]`) selected by `index`; `None`
    /// yields a zero row. Output shape is `[index.len(), last]`.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| DiffError::Usage("gather_rows on scalar".into()))?;
        let rows = numel(&shape) / cols;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for idx in index {
            match *idx {
                Some(r) if r < rows => data.extend_from_slice(&src[r * cols..(r + 1) * cols]),
                Some(r) => {
                    return Err(DiffError::Usage(format!(
                        "gather_rows: row {r} out of range for {rows} rows"
                    )))
                }
                None => data.extend(std::iter::repeat(T::zero()).take(cols)),
            }
        }
        if index.is_empty() {
            return Err(DiffError::Usage("gather_rows: empty index".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::raw(vec![index.len(), cols], data),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- pointwise

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * kernels::sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    /// `max(x, lo)`; the gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, x: Var, lo: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo));
        let rg = self.rg(x);
        self.push(value, Op::ClampMin(x, lo), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.rg(x);
        self.push(value, Op::Ln(x), rg)
    }

    // ---------------------------------------------------------------- normalization

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let src = self.value(x);
        if !src.is_finite() {
            return Err(DiffError::Numeric { op: "softmax" });
        }
        let src = src.data();
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut max = src[at(0)];
                for j in 1..n {
                    max = max.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::raw(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Standardizes each slice along `axis` with population variance. Carries
    /// no affine parameters.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("layer_norm", axis, shape.len())?;
        let src = self.value(x).data();
        let (outer, n, inner) = split_axis(&shape, axis);
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mean = T::zero();
                for j in 0..n {
                    mean = mean + src[at(j)];
                }
                mean = mean / nf;
                let mut var = T::zero();
                for j in 0..n {
                    let d = src[at(j)] - mean;
                    var = var + d * d;
                }
                var = var / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    xhat[at(j)] = (src[at(j)] - mean) * r;
                }
            }
        }
        let value = Tensor::raw(shape, xhat.clone());
        let rg = self.rg(x);
        Ok(self.push(value, Op::LayerNorm { x, axis, xhat, rstd }, rg))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.mul_scalar(s, T::one() / T::of(n as f64))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", axis, shape.len())?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = o * n * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::raw(out_shape, out), Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean_axis", axis, shape.len())?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, T::one() / T::of(shape[axis] as f64)))
    }

    // ---------------------------------------------------------------- layer convolution

    /// Multi-channel 1-D convolution collapsing the layer axis of a hidden
    /// state stack. `h` is `[b, m, s, z]`, `kernel` is `[m, k]`; each layer is
    /// an input channel and the window of `k` taps slides along the sequence
    /// axis with zero padding `padding` on both ends. The result is
    /// `[b, 1, s + 2p - k + 1, z]`.
    pub fn conv_layers(&mut self, h: Var, kernel: Var, padding: usize) -> Result<Var> {
        let hs = self.shape(h).to_vec();
        let ks = self.shape(kernel).to_vec();
        if hs.len() != 4 || ks.len() != 2 || ks[0] != hs[1] {
            return Err(DiffError::Shape {
                op: "conv_layers",
                lhs: hs,
                rhs: ks,
            });
        }
        let (b, m, s, z) = (hs[0], hs[1], hs[2], hs[3]);
        let k = ks[1];
        if k > s + 2 * padding {
            return Err(DiffError::Config(format!(
                "conv_layers: kernel size {k} exceeds padded extent {}",
                s + 2 * padding
            )));
        }
        let s_out = s + 2 * padding - k + 1;
        let hv = self.value(h).data();
        let kv = self.value(kernel).data();
        let mut out = vec![T::zero(); b * s_out * z];
        for bi in 0..b {
            for i in 0..s_out {
                let orow = &mut out[(bi * s_out + i) * z..(bi * s_out + i + 1) * z];
                for l in 0..m {
                    for j in 0..k {
                        let pos = i + j;
                        if pos < padding || pos - padding >= s {
                            continue;
                        }
                        let src = ((bi * m + l) * s + pos - padding) * z;
                        let w = kv[l * k + j];
                        for (o, &v) in orow.iter_mut().zip(&hv[src..src + z]) {
                            *o = *o + w * v;
                        }
                    }
                }
            }
        }
        let rg = self.rg(h) || self.rg(kernel);
        Ok(self.push(
            Tensor::raw(vec![b, 1, s_out, z], out),
            Op::ConvLayers { h, kernel, padding },
            rg,
        ))
    }

    // ---------------------------------------------------------------- adjoint

    /// Reverse pass from a single-element `loss`. The returned map holds a
    /// gradient for every trainable leaf on the tape, zero when the leaf does
    /// not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(DiffError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            crate::backward::propagate(self, id, &g, &mut grads);
        }
        let mut out = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.insert(Var(id), Tensor::raw(node.value.shape().to_vec(), data));
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients for the trainable leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for constants and for vars that are not leaves.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

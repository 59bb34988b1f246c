//! Vector-Jacobian products for each primitive on the tape.

use crate::kernels::{self, split_axis};
use crate::scalar::Scalar;
use crate::tape::{BinKind, Op, Tape, Var};
use crate::tensor::numel;

fn slot<'a, T: Scalar>(
    tape: &Tape<T>,
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &tape.nodes[v.index()];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.index()].get_or_insert_with(|| vec![T::zero(); n]))
}

fn accumulate<T: Scalar>(tape: &Tape<T>, grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
    if let Some(dst) = slot(tape, grads, v) {
        for (d, &x) in dst.iter_mut().zip(delta) {
            *d = *d + x;
        }
    }
}

pub(crate) fn propagate<T: Scalar>(
    tape: &Tape<T>,
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = &tape.nodes[id];
    let out = node.value.data();
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (va, vb) = (tape.value(*a), tape.value(*b));
            let (da, db) = (va.data(), vb.data());
            let same = va.shape() == vb.shape();
            let sa = kernels::broadcast_strides(va.shape(), out_shape);
            let sb = kernels::broadcast_strides(vb.shape(), out_shape);
            let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                if same {
                    for i in 0..g.len() {
                        f(i, i, i);
                    }
                } else {
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| f(o, ia, ib));
                }
            };
            if tape.requires_grad(*a) {
                let mut ga = vec![T::zero(); da.len()];
                visit(&mut |o, ia, ib| {
                    let d = match kind {
                        BinKind::Add | BinKind::Sub => g[o],
                        BinKind::Mul => g[o] * db[ib],
                        BinKind::Div => g[o] / db[ib],
                    };
                    ga[ia] = ga[ia] + d;
                });
                accumulate(tape, grads, *a, &ga);
            }
            if tape.requires_grad(*b) {
                let mut gb = vec![T::zero(); db.len()];
                visit(&mut |o, ia, ib| {
                    let d = match kind {
                        BinKind::Add => g[o],
                        BinKind::Sub => -g[o],
                        BinKind::Mul => g[o] * da[ia],
                        BinKind::Div => -g[o] * da[ia] / (db[ib] * db[ib]),
                    };
                    gb[ib] = gb[ib] + d;
                });
                accumulate(tape, grads, *b, &gb);
            }
        }
        Op::AddScalar(a) => accumulate(tape, grads, *a, g),
        Op::MulScalar(a, s) => {
            let d: Vec<T> = g.iter().map(|&v| v * *s).collect();
            accumulate(tape, grads, *a, &d);
        }
        Op::MatMul(a, b) => matmul_backward(tape, *a, *b, g, grads),
        Op::Permute(x, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (_, d) = kernels::permute(g, out_shape, &inverse);
            accumulate(tape, grads, *x, &d);
        }
        Op::Reshape(x) => accumulate(tape, grads, *x, g),
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = split_axis(out_shape, *axis);
            let mut d = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot = dot + g[at(j)] * out[at(j)];
                    }
                    for j in 0..n {
                        d[at(j)] = out[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(tape, grads, *x, &d);
        }
        Op::LayerNorm { x, axis, xhat, rstd } => {
            let (outer, n, inner) = split_axis(out_shape, *axis);
            let nf = T::of(n as f64);
            let mut d = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let (mut mg, mut mgx) = (T::zero(), T::zero());
                    for j in 0..n {
                        mg = mg + g[at(j)];
                        mgx = mgx + g[at(j)] * xhat[at(j)];
                    }
                    mg = mg / nf;
                    mgx = mgx / nf;
                    let r = rstd[o * inner + i];
                    for j in 0..n {
                        d[at(j)] = r * (g[at(j)] - mg - xhat[at(j)] * mgx);
                    }
                }
            }
            accumulate(tape, grads, *x, &d);
        }
        Op::Silu(x) => {
            let xv = tape.value(*x).data();
            let d: Vec<T> = xv
                .iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let s = kernels::sigmoid(v);
                    gv * s * (T::one() + v * (T::one() - s))
                })
                .collect();
            accumulate(tape, grads, *x, &d);
        }
        Op::ClampMin(x, lo) => {
            let xv = tape.value(*x).data();
            let d: Vec<T> = xv
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > *lo { gv } else { T::zero() })
                .collect();
            accumulate(tape, grads, *x, &d);
        }
        Op::Exp(x) => {
            let d: Vec<T> = out.iter().zip(g).map(|(&y, &gv)| y * gv).collect();
            accumulate(tape, grads, *x, &d);
        }
        Op::Ln(x) => {
            let xv = tape.value(*x).data();
            let d: Vec<T> = xv.iter().zip(g).map(|(&v, &gv)| gv / v).collect();
            accumulate(tape, grads, *x, &d);
        }
        Op::SumAll(x) => {
            let n = tape.value(*x).numel();
            accumulate(tape, grads, *x, &vec![g[0]; n]);
        }
        Op::SumAxis { x, axis } => {
            let (outer, n, inner) = split_axis(tape.shape(*x), *axis);
            let mut d = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    let base = o * n * inner + j * inner;
                    d[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(tape, grads, *x, &d);
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(out_shape, *axis);
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let extent = tape.shape(p)[*axis] * inner;
                if tape.requires_grad(p) {
                    let mut d = Vec::with_capacity(outer * extent);
                    for o in 0..outer {
                        let base = o * total + offset;
                        d.extend_from_slice(&g[base..base + extent]);
                    }
                    accumulate(tape, grads, p, &d);
                }
                offset += extent;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = tape.shape(*x);
            let (outer, n, inner) = split_axis(in_shape, *axis);
            let len = out_shape[*axis];
            if let Some(dst) = slot(tape, grads, *x) {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = o * n * inner + start * inner;
                    for (d, &v) in dst[base..base + len * inner].iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
            }
        }
        Op::ConvLayers { h, kernel, padding } => {
            conv_layers_backward(tape, *h, *kernel, *padding, g, grads)
        }
        Op::GatherRows { x, index } => {
            let cols = out_shape[1];
            if let Some(dst) = slot(tape, grads, *x) {
                for (row, idx) in index.iter().enumerate() {
                    if let Some(r) = idx {
                        for c in 0..cols {
                            dst[r * cols + c] = dst[r * cols + c] + g[row * cols + c];
                        }
                    }
                }
            }
        }
    }
}

fn matmul_backward<T: Scalar>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (va, vb) = (tape.value(a), tape.value(b));
    let (sa, sb) = (va.shape(), vb.shape());
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let (av, bv) = (va.data(), vb.data());
    if bb.is_empty() {
        let rows = numel(ba) * m;
        if tape.requires_grad(a) {
            let mut da = vec![T::zero(); rows * k];
            kernels::gemm_nt(g, bv, &mut da, rows, n, k);
            accumulate(tape, grads, a, &da);
        }
        if tape.requires_grad(b) {
            let mut db = vec![T::zero(); k * n];
            kernels::gemm_tn(av, g, &mut db, k, rows, n);
            accumulate(tape, grads, b, &db);
        }
        return;
    }
    let batch = numel(bb);
    let shared_a = ba.is_empty();
    if tape.requires_grad(a) {
        let mut da = vec![T::zero(); av.len()];
        for i in 0..batch {
            let aoff = if shared_a { 0 } else { i * m * k };
            kernels::gemm_nt(
                &g[i * m * n..(i + 1) * m * n],
                &bv[i * k * n..(i + 1) * k * n],
                &mut da[aoff..aoff + m * k],
                m,
                n,
                k,
            );
        }
        accumulate(tape, grads, a, &da);
    }
    if tape.requires_grad(b) {
        let mut db = vec![T::zero(); bv.len()];
        for i in 0..batch {
            let aoff = if shared_a { 0 } else { i * m * k };
            kernels::gemm_tn(
                &av[aoff..aoff + m * k],
                &g[i * m * n..(i + 1) * m * n],
                &mut db[i * k * n..(i + 1) * k * n],
                k,
                m,
                n,
            );
        }
        accumulate(tape, grads, b, &db);
    }
}

fn conv_layers_backward<T: Scalar>(
    tape: &Tape<T>,
    h: Var,
    kernel: Var,
    padding: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let hs = tape.shape(h).to_vec();
    let (b, m, s, z) = (hs[0], hs[1], hs[2], hs[3]);
    let k = tape.shape(kernel)[1];
    let s_out = s + 2 * padding - k + 1;
    let hv = tape.value(h).data();
    let kv = tape.value(kernel).data();
    let taps = |f: &mut dyn FnMut(usize, usize, usize, usize, usize)| {
        for bi in 0..b {
            for i in 0..s_out {
                for l in 0..m {
                    for j in 0..k {
                        let pos = i + j;
                        if pos < padding || pos - padding >= s {
                            continue;
                        }
                        f(bi, i, l, j, pos - padding);
                    }
                }
            }
        }
    };
    if tape.requires_grad(h) {
        let mut dh = vec![T::zero(); hv.len()];
        taps(&mut |bi, i, l, j, src_pos| {
            let w = kv[l * k + j];
            let grow = &g[(bi * s_out + i) * z..(bi * s_out + i + 1) * z];
            let dst = ((bi * m + l) * s + src_pos) * z;
            for (d, &gv) in dh[dst..dst + z].iter_mut().zip(grow) {
                *d = *d + w * gv;
            }
        });
        accumulate(tape, grads, h, &dh);
    }
    if tape.requires_grad(kernel) {
        let mut dk = vec![T::zero(); kv.len()];
        taps(&mut |bi, i, l, j, src_pos| {
            let grow = &g[(bi * s_out + i) * z..(bi * s_out + i + 1) * z];
            let src = ((bi * m + l) * s + src_pos) * z;
            let mut acc = T::zero();
            for (&hv, &gv) in hv[src..src + z].iter().zip(grow) {
                acc = acc + hv * gv;
            }
            dk[l * k + j] = dk[l * k + j] + acc;
        });
        accumulate(tape, grads, kernel, &dk);
    }
}

//! Straight-line f64 reference math for the integration tests. Nothing here
//! touches the tape: rows are plain `Vec<f64>` token vectors.
#![allow(dead_code)]

use alignlab::params::ParamStore;
use diffcore::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub const LN_EPS: f64 = 1e-6;

pub fn rows_of(t: &Tensor<f64>) -> Rows {
    let w = *t.shape().last().unwrap();
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(r: &Rows) -> Vec<f64> {
    r.iter().flatten().copied().collect()
}

/// `x W + b` with `W` stored `[in, out]`.
pub fn affine(x: &Rows, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Rows {
    let (fi, fo) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), fi);
            (0..fo)
                .map(|j| {
                    let mut acc = b.map_or(0.0, |b| b.data()[j]);
                    for (i, v) in row.iter().enumerate() {
                        acc += v * w.data()[i * fo + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn lin(p: &ParamStore<f64>, name: &str, x: &Rows) -> Rows {
    let w = p.get(&format!("{name}.w")).unwrap();
    let b = p.get(&format!("{name}.b")).ok();
    affine(x, w, b)
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn map(x: &Rows, f: impl Fn(f64) -> f64) -> Rows {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn zip(a: &Rows, b: &Rows, f: impl Fn(f64, f64) -> f64) -> Rows {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(&x, &y)| f(x, y)).collect())
        .collect()
}

pub fn layer_norm(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn ff(p: &ParamStore<f64>, name: &str, x: &Rows) -> Rows {
    let h = map(&lin(p, &format!("{name}.fc1"), x), silu);
    lin(p, &format!("{name}.fc2"), &h)
}

/// Multi-head attention with shared q/k/v/o projections over `h`.
pub fn attention(p: &ParamStore<f64>, name: &str, h: &Rows, heads: usize) -> Rows {
    let q = lin(p, &format!("{name}.q"), h);
    let k = lin(p, &format!("{name}.k"), h);
    let v = lin(p, &format!("{name}.v"), h);
    let width = q[0].len();
    let dh = width / heads;
    let mut mixed = vec![vec![0.0; width]; h.len()];
    for hd in 0..heads {
        let r = hd * dh..(hd + 1) * dh;
        for i in 0..h.len() {
            let logits: Vec<f64> = (0..h.len())
                .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&logits);
            for (j, wj) in w.iter().enumerate() {
                for c in r.clone() {
                    mixed[i][c] += wj * v[j][c];
                }
            }
        }
    }
    lin(p, &format!("{name}.o"), &mixed)
}

/// Regressed modulation row for one batch entry, split into six parts
/// `[β1, γ1, α1, β2, γ2, α2]`.
pub fn modulation(p: &ParamStore<f64>, name: &str, cond: &[f64]) -> Vec<Vec<f64>> {
    let m = lin(p, name, &vec![cond.to_vec()]).remove(0);
    let w = m.len() / 6;
    m.chunks(w).map(<[f64]>::to_vec).collect()
}

pub fn modulate_rows(x: &Rows, shift: &[f64], scale: &[f64]) -> Rows {
    x.iter()
        .map(|r| r.iter().enumerate().map(|(i, v)| v * (1.0 + scale[i]) + shift[i]).collect())
        .collect()
}

pub struct BlockOracle {
    pub x_a: Rows,
    pub c_a: Rows,
    pub x_ln: Rows,
    pub c_ln: Rows,
    pub x_ff: Rows,
    pub c_ff: Rows,
    pub x_o: Rows,
    pub c_o: Rows,
}

/// One double-stream block for a single batch entry, written out term by
/// term from the block equations.
pub fn block(p: &ParamStore<f64>, name: &str, x: &Rows, c: &Rows, cond: &[f64], heads: usize) -> BlockOracle {
    let mx = modulation(p, &format!("{name}.x_mod"), cond);
    let mc = modulation(p, &format!("{name}.c_mod"), cond);
    let x_hat = modulate_rows(&x.iter().map(|r| layer_norm(r)).collect(), &mx[0], &mx[1]);
    let c_hat = modulate_rows(&c.iter().map(|r| layer_norm(r)).collect(), &mc[0], &mc[1]);
    let joint: Rows = x_hat.iter().chain(&c_hat).cloned().collect();
    let att = attention(p, &format!("{name}.attn"), &joint, heads);
    let (x_a, c_a) = (att[..x.len()].to_vec(), att[x.len()..].to_vec());
    let side = |h: &Rows, a: &Rows, m: &[Vec<f64>], ffn: &str| {
        let r: Rows = h
            .iter()
            .zip(a)
            .map(|(hr, ar)| hr.iter().zip(ar).enumerate().map(|(i, (u, v))| u + m[2][i] * v).collect())
            .collect();
        let ln: Rows = r.iter().map(|row| layer_norm(row)).collect();
        let f = ff(p, &format!("{name}.{ffn}"), &modulate_rows(&ln, &m[3], &m[4]));
        let o: Rows = r
            .iter()
            .zip(&f)
            .map(|(rr, fr)| rr.iter().zip(fr).enumerate().map(|(i, (u, v))| u + m[5][i] * v).collect())
            .collect();
        (ln, f, o)
    };
    let (x_ln, x_ff, x_o) = side(x, &x_a, &mx, "x_ff");
    let (c_ln, c_ff, c_o) = side(c, &c_a, &mc, "c_ff");
    BlockOracle {
        x_a,
        c_a,
        x_ln,
        c_ln,
        x_ff,
        c_ff,
        x_o,
        c_o,
    }
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| if *a == 0.0 { 0.0 } else { a * (a / b).ln() }).sum()
}

pub fn js(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// SSIM straight from the definition: for every valid 7×7 window position
/// and channel, Gaussian-weighted means, variances, covariance, then the
/// usual ratio, averaged.
pub fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize, c: usize, range: f64) -> f64 {
    let (k, sigma) = (7usize, 1.5f64);
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 3.0, j as f64 - 3.0);
            g[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= z);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let at = |img: &[f64], y: usize, x: usize, ch: usize| img[(y * w + x) * c + ch];
    let mut total = 0.0;
    let mut count = 0;
    for ch in 0..c {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        ma += g[i * k + j] * at(a, y0 + i, x0 + j, ch);
                        mb += g[i * k + j] * at(b, y0 + i, x0 + j, ch);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (da, db) = (at(a, y0 + i, x0 + j, ch) - ma, at(b, y0 + i, x0 + j, ch) - mb);
                        va += g[i * k + j] * da * da;
                        vb += g[i * k + j] * db * db;
                        cov += g[i * k + j] * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Default run shrunk to a handful of steps over a small corpus.
pub fn short_run(steps: usize) -> alignlab::trainer::RunConfig {
    let mut cfg = alignlab::trainer::RunConfig::default();
    cfg.steps = steps;
    cfg.data.train_prompts = 32;
    cfg.data.heldout_prompts = 8;
    cfg.stage2.steps = 3;
    cfg.stage2.train_pairs = 8;
    cfg.stage2.val_pairs = 4;
    cfg.lora.steps = 3;
    cfg.lora.train_pairs = 8;
    cfg.lora.val_pairs = 4;
    cfg
}

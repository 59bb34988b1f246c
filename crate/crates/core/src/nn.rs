//! Layer helpers shared by the encoders, the generator, and the control path.

use diffcore::{Scalar, Tape, Tensor, Var};

use crate::error::Result;
use crate::params::{apply_linear, Bound};

pub const LN_EPS: f64 = 1e-6;

/// Layer norm over the last axis.
pub fn norm<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    Ok(tape.layer_norm(x, axis, T::of(LN_EPS))?)
}

/// Output of [`attention`]: the mixed values and the attention weights
/// `[b, heads, n, n]`.
pub struct AttentionOut {
    pub out: Var,
    pub probs: Var,
}

/// Scaled dot-product attention over `[b, n, width]` projections split into
/// `heads` heads. `key_bias`, when given, is added to the logits and must
/// broadcast against `[b, heads, n, n]`.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_bias: Option<Var>,
) -> Result<AttentionOut> {
    let shape = tape.shape(q).to_vec();
    let (b, n, width) = (shape[0], shape[1], shape[2]);
    let dh = width / heads;
    let split = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let r = tape.reshape(x, &[b, n, heads, dh])?;
        Ok(tape.permute(r, &[0, 2, 1, 3])?)
    };
    let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    let kt = tape.transpose(kh)?;
    let logits = tape.matmul(qh, kt)?;
    let mut logits = tape.mul_scalar(logits, T::one() / T::of(dh as f64).sqrt());
    if let Some(bias) = key_bias {
        logits = tape.add(logits, bias)?;
    }
    let probs = tape.softmax(logits, 3)?;
    let mixed = tape.matmul(probs, vh)?;
    let merged = tape.permute(mixed, &[0, 2, 1, 3])?;
    let out = tape.reshape(merged, &[b, n, width])?;
    Ok(AttentionOut { out, probs })
}

/// `fc2(silu(fc1(x)))`.
pub fn feed_forward<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = apply_linear(tape, bound, &format!("{name}.fc1"), x)?;
    let h = tape.silu(h);
    apply_linear(tape, bound, &format!("{name}.fc2"), h)
}

/// `x * (1 + scale) + shift`, with `scale` and `shift` shaped `[b, width]`
/// and broadcast over the token axis of `x`.
pub fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let one_plus = tape.add_scalar(scale, T::one());
    let s = unsqueeze_tokens(tape, one_plus)?;
    let sh = unsqueeze_tokens(tape, shift)?;
    let y = tape.mul(x, s)?;
    Ok(tape.add(y, sh)?)
}

/// `[b, w] -> [b, 1, w]`
pub fn unsqueeze_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    Ok(tape.reshape(x, &[s[0], 1, s[1]])?)
}

/// Splits the last axis of `[b, parts * w]` into `parts` tensors `[b, w]`.
pub fn chunk_last<T: Scalar>(tape: &mut Tape<T>, x: Var, parts: usize) -> Result<Vec<Var>> {
    let s = tape.shape(x).to_vec();
    let w = s[1] / parts;
    (0..parts)
        .map(|i| Ok(tape.slice(x, 1, i * w, w)?))
        .collect()
}

/// Fixed sinusoidal table `[n, width]` (position or frequency features).
pub fn sinusoidal<T: Scalar>(n: usize, width: usize) -> Tensor<T> {
    let half = width / 2;
    let mut data = vec![0.0; n * width];
    for p in 0..n {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            let a = p as f64 * freq;
            data[p * width + i] = a.sin();
            data[p * width + half + i] = a.cos();
        }
    }
    Tensor::from_f64(&[n, width], &data).expect("sinusoidal table shape")
}

/// Masked mean over the token axis: `x` is `[b, s, w]`, `mask` `[b, s]` of
/// 0/1. Rows with no valid token pool to zero.
pub fn masked_mean<T: Scalar>(tape: &mut Tape<T>, x: Var, mask: &Tensor<T>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n) = (s[0], s[1]);
    let m = tape.constant(mask.reshaped(&[b, n, 1])?);
    let kept = tape.mul(x, m)?;
    let summed = tape.sum_axis(kept, 1)?;
    let inv: Vec<T> = (0..b)
        .map(|i| {
            let count = mask.data()[i * n..(i + 1) * n]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v);
            if count > T::zero() {
                T::one() / count
            } else {
                T::zero()
            }
        })
        .collect();
    let inv = tape.constant(Tensor::new(vec![b, 1], inv)?);
    Ok(tape.mul(summed, inv)?)
}

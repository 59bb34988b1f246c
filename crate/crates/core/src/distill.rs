//! Per-block divergence between student and teacher captures.
//!
//! Real-valued features become per-token distributions over channels via a
//! tempered softmax; `MSE` compares the raw features instead.

use std::fmt;
use std::str::FromStr;

use diffcore::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::{DistillTapSet, TapEntry};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Mse,
    /// `KL(teacher ‖ student)`
    Kl,
    /// `KL(student ‖ teacher)`
    Rkl,
    Js,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 4] = [DivergenceKind::Mse, DivergenceKind::Kl, DivergenceKind::Js, DivergenceKind::Rkl];

    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Mse => "mse",
            DivergenceKind::Kl => "kl",
            DivergenceKind::Rkl => "rkl",
            DivergenceKind::Js => "js",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DivergenceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub kind: DivergenceKind,
    pub temperature: f64,
    /// Also distill the single-stream blocks' joint attention outputs.
    pub include_single: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            kind: DivergenceKind::Rkl,
            temperature: 1.0,
            include_single: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("distill.temperature must be finite and positive".into()));
        }
        Ok(())
    }
}

/// `softmax(a / τ)` over the last (channel) axis.
pub fn normalize_attn<T: Scalar>(tape: &mut Tape<T>, a: Var, tau: f64) -> Result<Var> {
    let axis = tape.shape(a).len() - 1;
    let scaled = tape.mul_scalar(a, T::of(1.0 / tau));
    Ok(tape.softmax(scaled, axis)?)
}

fn tokens<T: Scalar>(tape: &Tape<T>, x: Var) -> f64 {
    let s = tape.shape(x);
    s[..s.len() - 1].iter().product::<usize>() as f64
}

/// Per-token `Σ p (ln p − ln q)`, averaged over tokens.
fn kl<T: Scalar>(tape: &mut Tape<T>, p: Var, q: Var) -> Result<Var> {
    let lp = tape.clamp_min(p, T::of(PROB_FLOOR));
    let lp = tape.ln(lp);
    let lq = tape.clamp_min(q, T::of(PROB_FLOOR));
    let lq = tape.ln(lq);
    let d = tape.sub(lp, lq)?;
    let terms = tape.mul(p, d)?;
    let total = tape.sum_all(terms);
    Ok(tape.mul_scalar(total, T::of(1.0 / tokens(tape, p))))
}

/// Divergence of distributions `p` (teacher) and `q` (student) along the
/// last axis; for `Mse` the inputs are compared as raw values.
pub fn divergence<T: Scalar>(tape: &mut Tape<T>, p: Var, q: Var, kind: DivergenceKind) -> Result<Var> {
    if tape.shape(p) != tape.shape(q) {
        return Err(Error::Usage(format!(
            "divergence inputs differ in shape: {:?} vs {:?}",
            tape.shape(p),
            tape.shape(q)
        )));
    }
    match kind {
        DivergenceKind::Mse => {
            let d = tape.sub(q, p)?;
            let sq = tape.square(d)?;
            Ok(tape.mean_all(sq))
        }
        DivergenceKind::Kl => kl(tape, p, q),
        DivergenceKind::Rkl => kl(tape, q, p),
        DivergenceKind::Js => {
            let sum = tape.add(p, q)?;
            let m = tape.mul_scalar(sum, T::of(0.5));
            let a = kl(tape, p, m)?;
            let b = kl(tape, q, m)?;
            let s = tape.add(a, b)?;
            Ok(tape.mul_scalar(s, T::of(0.5)))
        }
    }
}

/// Divergence between raw captured features.
pub fn feature_divergence<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var, cfg: &DistillConfig) -> Result<Var> {
    if cfg.kind == DivergenceKind::Mse {
        return divergence(tape, teacher, student, cfg.kind);
    }
    let p = normalize_attn(tape, teacher, cfg.temperature)?;
    let q = normalize_attn(tape, student, cfg.temperature)?;
    divergence(tape, p, q, cfg.kind)
}

fn entry_loss<T: Scalar>(tape: &mut Tape<T>, s: &TapEntry, t: &TapEntry, cfg: &DistillConfig) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    for (sv, tv) in [(s.x, t.x), (s.c, t.c)] {
        match (sv, tv) {
            (Some(a), Some(b)) => parts.push(feature_divergence(tape, a, b, cfg)?),
            (None, None) => {}
            _ => return Err(Error::Usage("student and teacher taps capture different sides".into())),
        }
    }
    match parts[..] {
        [] => Err(Error::Usage("tap entry captures nothing".into())),
        [one] => Ok(one),
        [a, b] => {
            let s = tape.add(a, b)?;
            Ok(tape.mul_scalar(s, T::of(0.5)))
        }
        _ => unreachable!("at most two sides"),
    }
}

/// Total loss (unweighted mean over blocks) and each block's loss.
pub fn layer_distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student: &DistillTapSet,
    teacher: &DistillTapSet,
    cfg: &DistillConfig,
) -> Result<(Var, Vec<Var>)> {
    if student.position != teacher.position {
        return Err(Error::Usage(format!(
            "tap positions differ: student {} vs teacher {}",
            student.position, teacher.position
        )));
    }
    if student.blocks.len() != teacher.blocks.len() || student.single.len() != teacher.single.len() {
        return Err(Error::Usage("student and teacher tap sets differ in block count".into()));
    }
    let mut per_block = Vec::new();
    for (s, t) in student.blocks.iter().zip(&teacher.blocks) {
        per_block.push(entry_loss(tape, s, t, cfg)?);
    }
    if cfg.include_single {
        for (s, t) in student.single.iter().zip(&teacher.single) {
            per_block.push(entry_loss(tape, s, t, cfg)?);
        }
    }
    if per_block.is_empty() {
        return Err(Error::Usage("no blocks to distill".into()));
    }
    let mut total = per_block[0];
    for &b in &per_block[1..] {
        total = tape.add(total, b)?;
    }
    let total = tape.mul_scalar(total, T::of(1.0 / per_block.len() as f64));
    Ok((total, per_block))
}

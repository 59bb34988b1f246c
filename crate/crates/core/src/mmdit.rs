//! The frozen generator: double-stream MM-DiT blocks with adaptive layer-norm
//! modulation, optional single-stream blocks, a rectified-flow Euler
//! sampler, and LoRA attachment points on any linear map.
//!
//! Weights are seeded random draws. The teacher need not be a good image
//! model; distillation only has to reproduce its function.

use std::fmt;
use std::str::FromStr;

use diffcore::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::TeacherCondition;
use crate::error::{Error, Result};
use crate::nn::{self, attention, chunk_last, modulate, norm, unsqueeze_tokens};
use crate::params::{init_linear, Bound, ParamStore};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmditConfig {
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
    pub latent_size: usize,
    pub latent_channels: usize,
    pub patch: usize,
    pub freq_dim: usize,
    /// Zero every modulation regressor, making each block the identity.
    pub zero_modulation: bool,
    pub modulation_gain: f64,
}

impl Default for MmditConfig {
    fn default() -> Self {
        MmditConfig {
            width: 32,
            heads: 2,
            ff_mult: 2,
            double_blocks: 4,
            single_blocks: 0,
            latent_size: 8,
            latent_channels: 4,
            patch: 2,
            freq_dim: 32,
            zero_modulation: false,
            modulation_gain: 1.0,
        }
    }
}

impl MmditConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        check(self.width >= 2, "mmdit.width must be >= 2")?;
        check(self.heads > 0 && self.width.is_multiple_of(self.heads), "mmdit.width must divide by heads")?;
        check(self.ff_mult > 0, "mmdit.ff_mult must be positive")?;
        check(self.double_blocks > 0, "mmdit.double_blocks must be positive")?;
        check(self.patch > 0 && self.latent_size.is_multiple_of(self.patch), "mmdit.latent_size must divide by patch")?;
        check(self.latent_channels > 0, "mmdit.latent_channels must be positive")?;
        check(self.freq_dim >= 2 && self.freq_dim.is_multiple_of(2), "mmdit.freq_dim must be even")?;
        check(self.modulation_gain.is_finite(), "mmdit.modulation_gain must be finite")
    }

    pub fn tokens(&self) -> usize {
        let g = self.latent_size / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.latent_size, self.latent_size, self.latent_channels]
    }
}

// ------------------------------------------------------------------ taps

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapPosition {
    Attn,
    Ln,
    Ff,
    Block,
    Oneside,
}

impl TapPosition {
    pub const ALL: [TapPosition; 5] = [
        TapPosition::Attn,
        TapPosition::Ln,
        TapPosition::Ff,
        TapPosition::Block,
        TapPosition::Oneside,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TapPosition::Attn => "attn",
            TapPosition::Ln => "ln",
            TapPosition::Ff => "ff",
            TapPosition::Block => "block",
            TapPosition::Oneside => "oneside",
        }
    }
}

impl fmt::Display for TapPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TapPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TapPosition::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tap position {s:?}")))
    }
}

/// Every intermediate of one double-stream block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTaps {
    pub x_a: Var,
    pub c_a: Var,
    pub x_ln: Var,
    pub c_ln: Var,
    pub x_ff: Var,
    pub c_ff: Var,
    pub x_o: Var,
    pub c_o: Var,
}

/// One block's captured pair; `x` is absent for one-sided capture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapEntry {
    pub x: Option<Var>,
    pub c: Option<Var>,
}

impl BlockTaps {
    pub fn select(&self, position: TapPosition) -> TapEntry {
        let (x, c) = match position {
            TapPosition::Attn => (Some(self.x_a), self.c_a),
            TapPosition::Ln => (Some(self.x_ln), self.c_ln),
            TapPosition::Ff => (Some(self.x_ff), self.c_ff),
            TapPosition::Block => (Some(self.x_o), self.c_o),
            TapPosition::Oneside => (None, self.c_a),
        };
        TapEntry { x, c: Some(c) }
    }
}

/// Per-block captures at one position. Single-stream entries hold the joint
/// attention output in `x` (the whole sequence, before any split).
#[derive(Clone, Debug)]
pub struct DistillTapSet {
    pub position: TapPosition,
    pub blocks: Vec<TapEntry>,
    pub single: Vec<TapEntry>,
}

/// Tap values lifted off a tape, e.g. to ship teacher captures between
/// threads.
#[derive(Clone, Debug, PartialEq)]
pub struct TapValues<T> {
    pub position: TapPosition,
    pub blocks: Vec<(Option<Tensor<T>>, Option<Tensor<T>>)>,
    pub single: Vec<(Option<Tensor<T>>, Option<Tensor<T>>)>,
}

impl DistillTapSet {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> TapValues<T> {
        let lift = |e: &TapEntry| (e.x.map(|v| tape.value(v).clone()), e.c.map(|v| tape.value(v).clone()));
        TapValues {
            position: self.position,
            blocks: self.blocks.iter().map(lift).collect(),
            single: self.single.iter().map(lift).collect(),
        }
    }
}

impl<T: Scalar> TapValues<T> {
    /// Records the values as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> DistillTapSet {
        let mut put = |(x, c): &(Option<Tensor<T>>, Option<Tensor<T>>)| TapEntry {
            x: x.as_ref().map(|t| tape.constant(t.clone())),
            c: c.as_ref().map(|t| tape.constant(t.clone())),
        };
        let blocks = self.blocks.iter().map(&mut put).collect();
        let single = self.single.iter().map(&mut put).collect();
        DistillTapSet {
            position: self.position,
            blocks,
            single,
        }
    }
}

// ------------------------------------------------------------------ weights

/// Frozen base weights plus optional low-rank adapters, bound on one tape.
#[derive(Clone, Copy)]
pub struct Weights<'a, T> {
    pub base: &'a Bound,
    pub lora: Option<(&'a Bound, T)>,
}

impl<'a, T: Scalar> Weights<'a, T> {
    pub fn frozen(base: &'a Bound) -> Self {
        Weights { base, lora: None }
    }

    /// `x W + b`, plus `scale · (x B) A` when an adapter targets `name`.
    pub fn linear(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.base.var(&format!("{name}.w"))?;
        let b = self.base.try_var(&format!("{name}.b"));
        let y = tape.linear(x, w, b)?;
        if let Some((lora, scale)) = self.lora {
            if let (Some(lb), Some(la)) = (lora.try_var(&format!("{name}.lora_b")), lora.try_var(&format!("{name}.lora_a"))) {
                let low = tape.linear(x, lb, None)?;
                let up = tape.linear(low, la, None)?;
                let up = tape.mul_scalar(up, scale);
                return Ok(tape.add(y, up)?);
            }
        }
        Ok(y)
    }

    pub fn feed_forward(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, &format!("{name}.fc1"), x)?;
        let h = tape.silu(h);
        self.linear(tape, &format!("{name}.fc2"), h)
    }
}

// ------------------------------------------------------------------ pieces

/// Sinusoidal features of `t · 1000`, `[b, dim]`, before the learned MLP.
pub fn timestep_features<T: Scalar>(t: &[f64], dim: usize) -> Result<Tensor<T>> {
    let half = dim / 2;
    let mut data = vec![0.0; t.len() * dim];
    for (i, &ti) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10_000f64).ln() * j as f64 / half as f64).exp();
            let a = ti * 1000.0 * freq;
            data[i * dim + j] = a.cos();
            data[i * dim + half + j] = a.sin();
        }
    }
    Ok(Tensor::from_f64(&[t.len(), dim], &data)?)
}

/// Timestep embedding `[b, width]`.
pub fn timestep_embed<T: Scalar>(tape: &mut Tape<T>, w: &Weights<T>, t: &[f64], freq_dim: usize) -> Result<Var> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("timestep must be finite".into()));
    }
    let f = tape.constant(timestep_features(t, freq_dim)?);
    w.feed_forward(tape, "t_in", f)
}

/// The six per-side regressed parameters, each `[b, width]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub beta1: Var,
    pub gamma1: Var,
    pub alpha1: Var,
    pub beta2: Var,
    pub gamma2: Var,
    pub alpha2: Var,
}

/// Pre-attention modulated stream plus the parameters the block still needs.
#[derive(Clone, Copy, Debug)]
pub struct ModulationOutput {
    pub x_hat: Var,
    pub alpha1: Var,
    pub beta2: Var,
    pub gamma2: Var,
    pub alpha2: Var,
}

/// Regresses the six parameters of `name` from the activated conditioning
/// vector `cond` (= SiLU(embed(t) + proj(c_p))), `[b, width]`.
pub fn regress_modulation<T: Scalar>(tape: &mut Tape<T>, w: &Weights<T>, name: &str, cond: Var) -> Result<Modulation> {
    let m = w.linear(tape, name, cond)?;
    let p = chunk_last(tape, m, 6)?;
    Ok(Modulation {
        beta1: p[0],
        gamma1: p[1],
        alpha1: p[2],
        beta2: p[3],
        gamma2: p[4],
        alpha2: p[5],
    })
}

/// `x̂ = LN(x)(1 + γ₁) + β₁`, with the remaining parameters passed through.
pub fn adaln_modulate<T: Scalar>(tape: &mut Tape<T>, w: &Weights<T>, name: &str, x: Var, cond: Var) -> Result<ModulationOutput> {
    let m = regress_modulation(tape, w, name, cond)?;
    let ln = norm(tape, x)?;
    let x_hat = modulate(tape, ln, m.beta1, m.gamma1)?;
    Ok(ModulationOutput {
        x_hat,
        alpha1: m.alpha1,
        beta2: m.beta2,
        gamma2: m.gamma2,
        alpha2: m.alpha2,
    })
}

/// Shared-projection attention over `concat(x̂, ĉ)` along the sequence, split
/// back at the boundary. Returns `(x_A, c_A, attention weights)`.
pub fn joint_attention<T: Scalar>(
    tape: &mut Tape<T>,
    w: &Weights<T>,
    name: &str,
    x_hat: Var,
    c_hat: Var,
    heads: usize,
) -> Result<(Var, Var, Var)> {
    let n = tape.shape(x_hat)[1];
    let s = tape.shape(c_hat)[1];
    let joint = tape.concat(&[x_hat, c_hat], 1)?;
    let (out, probs) = self_attention(tape, w, name, joint, heads)?;
    let x_a = tape.slice(out, 1, 0, n)?;
    let c_a = tape.slice(out, 1, n, s)?;
    Ok((x_a, c_a, probs))
}

fn self_attention<T: Scalar>(tape: &mut Tape<T>, w: &Weights<T>, name: &str, h: Var, heads: usize) -> Result<(Var, Var)> {
    let q = w.linear(tape, &format!("{name}.q"), h)?;
    let k = w.linear(tape, &format!("{name}.k"), h)?;
    let v = w.linear(tape, &format!("{name}.v"), h)?;
    let att = attention(tape, q, k, v, heads, None)?;
    let out = w.linear(tape, &format!("{name}.o"), att.out)?;
    Ok((out, att.probs))
}

fn gate<T: Scalar>(tape: &mut Tape<T>, x: Var, alpha: Var) -> Result<Var> {
    let a = unsqueeze_tokens(tape, alpha)?;
    Ok(tape.mul(x, a)?)
}

/// One double-stream block on `x` `[b, n, D]` and `c` `[b, s, D]` given the
/// activated conditioning vector. `(x_O, c_O)` are `taps.x_o`, `taps.c_o`.
pub fn block_forward<T: Scalar>(tape: &mut Tape<T>, w: &Weights<T>, name: &str, x: Var, c: Var, cond: Var, heads: usize) -> Result<BlockTaps> {
    let mx = adaln_modulate(tape, w, &format!("{name}.x_mod"), x, cond)?;
    let mc = adaln_modulate(tape, w, &format!("{name}.c_mod"), c, cond)?;
    let (x_a, c_a, _) = joint_attention(tape, w, &format!("{name}.attn"), mx.x_hat, mc.x_hat, heads)?;
    let side = |tape: &mut Tape<T>, h: Var, a: Var, m: &ModulationOutput, ff: &str| -> Result<(Var, Var, Var)> {
        let ga = gate(tape, a, m.alpha1)?;
        let r = tape.add(h, ga)?;
        let ln = norm(tape, r)?;
        let inner = modulate(tape, ln, m.beta2, m.gamma2)?;
        let f = w.feed_forward(tape, &format!("{name}.{ff}"), inner)?;
        let gf = gate(tape, f, m.alpha2)?;
        let o = tape.add(r, gf)?;
        Ok((ln, f, o))
    };
    let (x_ln, x_ff, x_o) = side(tape, x, x_a, &mx, "x_ff")?;
    let (c_ln, c_ff, c_o) = side(tape, c, c_a, &mc, "c_ff")?;
    Ok(BlockTaps {
        x_a,
        c_a,
        x_ln,
        c_ln,
        x_ff,
        c_ff,
        x_o,
        c_o,
    })
}

/// Single-stream block on the joint sequence `h`: `h + α(attn + ff)` over
/// one modulated LN. Returns `(output, joint attention output)`.
pub fn single_block_forward<T: Scalar>(tape: &mut Tape<T>, w: &Weights<T>, name: &str, h: Var, cond: Var, heads: usize) -> Result<(Var, Var)> {
    let m = w.linear(tape, &format!("{name}.mod"), cond)?;
    let p = chunk_last(tape, m, 3)?;
    let ln = norm(tape, h)?;
    let hn = modulate(tape, ln, p[0], p[1])?;
    let (att, _) = self_attention(tape, w, &format!("{name}.attn"), hn, heads)?;
    let f = w.feed_forward(tape, &format!("{name}.ff"), hn)?;
    let sum = tape.add(att, f)?;
    let g = gate(tape, sum, p[2])?;
    Ok((tape.add(h, g)?, att))
}

/// `[b, H, W, C]` → `[b, (H/p)(W/p), p·p·C]`, row-major over patches.
pub fn patchify<T: Scalar>(tape: &mut Tape<T>, latent: Var, patch: usize) -> Result<Var> {
    let s = tape.shape(latent).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let r = tape.reshape(latent, &[b, h / patch, patch, w / patch, patch, c])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    Ok(tape.reshape(r, &[b, (h / patch) * (w / patch), patch * patch * c])?)
}

pub fn unpatchify<T: Scalar>(tape: &mut Tape<T>, tokens: Var, patch: usize, size: usize, channels: usize) -> Result<Var> {
    let b = tape.shape(tokens)[0];
    let g = size / patch;
    let r = tape.reshape(tokens, &[b, g, g, patch, patch, channels])?;
    let r = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    Ok(tape.reshape(r, &[b, size, size, channels])?)
}

// ------------------------------------------------------------------ model

/// Everything one forward pass captured.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub velocity: Var,
    pub blocks: Vec<BlockTaps>,
    /// Joint attention output of each single-stream block.
    pub single: Vec<Var>,
}

impl ModelOutput {
    pub fn taps(&self, position: TapPosition) -> DistillTapSet {
        DistillTapSet {
            position,
            blocks: self.blocks.iter().map(|b| b.select(position)).collect(),
            single: self.single.iter().map(|&a| TapEntry { x: Some(a), c: None }).collect(),
        }
    }
}

/// Additive per-block features for the image stream.
#[derive(Clone, Copy, Debug, Default)]
pub struct Control<'a> {
    pub double: &'a [Var],
    pub single: &'a [Var],
}

/// Low-rank adapters keyed by target linear name.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams {
    pub targets: Vec<String>,
    pub rank: usize,
    pub scale: f64,
    pub store: ParamStore<f64>,
}

#[derive(Clone, Debug)]
pub struct Mmdit {
    cfg: MmditConfig,
    d_c: usize,
    d_p: usize,
    params: ParamStore<f64>,
}

impl Mmdit {
    pub fn new(cfg: &MmditConfig, d_c: usize, d_p: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed, "mmdit", 0);
        let d = cfg.width;
        let mut p = ParamStore::new();
        init_linear(&mut p, "x_in", cfg.patch_dim(), d, 1.0, true, &mut rng);
        init_linear(&mut p, "ctx_in", d_c, d, 1.0, true, &mut rng);
        init_linear(&mut p, "vec_in", d_p, d, 1.0, true, &mut rng);
        init_linear(&mut p, "t_in.fc1", cfg.freq_dim, d, 1.0, true, &mut rng);
        init_linear(&mut p, "t_in.fc2", d, d, 1.0, true, &mut rng);
        let mod_gain = if cfg.zero_modulation { 0.0 } else { cfg.modulation_gain };
        let attn = |p: &mut ParamStore<f64>, name: &str, rng: &mut rand_chacha::ChaCha8Rng| {
            for proj in ["q", "k", "v"] {
                init_linear(p, &format!("{name}.{proj}"), d, d, 1.0, false, rng);
            }
            init_linear(p, &format!("{name}.o"), d, d, 1.0, true, rng);
        };
        for l in 0..cfg.double_blocks {
            let name = format!("double{l}");
            init_linear(&mut p, &format!("{name}.x_mod"), d, 6 * d, mod_gain, true, &mut rng);
            init_linear(&mut p, &format!("{name}.c_mod"), d, 6 * d, mod_gain, true, &mut rng);
            attn(&mut p, &format!("{name}.attn"), &mut rng);
            for ff in ["x_ff", "c_ff"] {
                init_linear(&mut p, &format!("{name}.{ff}.fc1"), d, cfg.ff_mult * d, 1.0, true, &mut rng);
                init_linear(&mut p, &format!("{name}.{ff}.fc2"), cfg.ff_mult * d, d, 1.0, true, &mut rng);
            }
        }
        for l in 0..cfg.single_blocks {
            let name = format!("single{l}");
            init_linear(&mut p, &format!("{name}.mod"), d, 3 * d, mod_gain, true, &mut rng);
            attn(&mut p, &format!("{name}.attn"), &mut rng);
            init_linear(&mut p, &format!("{name}.ff.fc1"), d, cfg.ff_mult * d, 1.0, true, &mut rng);
            init_linear(&mut p, &format!("{name}.ff.fc2"), cfg.ff_mult * d, d, 1.0, true, &mut rng);
        }
        init_linear(&mut p, "final.mod", d, 2 * d, 1.0, true, &mut rng);
        init_linear(&mut p, "final.lin", d, cfg.patch_dim(), 1.0, true, &mut rng);
        Ok(Mmdit {
            cfg: cfg.clone(),
            d_c,
            d_p,
            params: p,
        })
    }

    pub fn config(&self) -> &MmditConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    pub fn cond_dims(&self) -> (usize, usize) {
        (self.d_c, self.d_p)
    }

    /// Binds the frozen weights as constants.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Bound {
        self.params.cast::<T>().bind(tape, false)
    }

    /// Activated conditioning vector `SiLU(embed(t) + proj(c_p))`, `[b, D]`.
    pub fn conditioning<T: Scalar>(&self, tape: &mut Tape<T>, w: &Weights<T>, t: &[f64], c_p: Var) -> Result<Var> {
        let te = timestep_embed(tape, w, t, self.cfg.freq_dim)?;
        let pe = w.linear(tape, "vec_in", c_p)?;
        let e = tape.add(te, pe)?;
        Ok(tape.silu(e))
    }

    /// Velocity prediction for `latent` `[b, H, W, C]` under `(c, c_p)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        w: &Weights<T>,
        latent: Var,
        c: Var,
        c_p: Var,
        t: &[f64],
        control: Control,
    ) -> Result<ModelOutput> {
        let cfg = &self.cfg;
        let b = tape.shape(latent)[0];
        if tape.shape(latent) != cfg.latent_shape(b) {
            return Err(Error::Usage(format!("latent shape {:?} does not match the model", tape.shape(latent))));
        }
        let cs = tape.shape(c).to_vec();
        if cs.len() != 3 || cs[0] != b || cs[2] != self.d_c || tape.shape(c_p) != [b, self.d_p] {
            return Err(Error::Usage(format!(
                "condition shapes {:?} / {:?} do not match the model",
                cs,
                tape.shape(c_p)
            )));
        }
        if t.len() != b {
            return Err(Error::Usage("one timestep per batch entry is required".into()));
        }
        if !control.double.is_empty() && control.double.len() != cfg.double_blocks {
            return Err(Error::Config("control features must cover every double-stream block".into()));
        }
        if !control.single.is_empty() && control.single.len() != cfg.single_blocks {
            return Err(Error::Config("control features must cover every single-stream block".into()));
        }
        let cond = self.conditioning(tape, w, t, c_p)?;
        let tokens = patchify(tape, latent, cfg.patch)?;
        let x = w.linear(tape, "x_in", tokens)?;
        let pos = tape.constant(nn::sinusoidal::<T>(cfg.tokens(), cfg.width));
        let mut x = tape.add(x, pos)?;
        let mut c = w.linear(tape, "ctx_in", c)?;
        let mut blocks = Vec::with_capacity(cfg.double_blocks);
        for l in 0..cfg.double_blocks {
            let taps = block_forward(tape, w, &format!("double{l}"), x, c, cond, cfg.heads)?;
            x = match control.double.get(l) {
                Some(&y) => inject(tape, taps.x_o, y)?,
                None => taps.x_o,
            };
            c = taps.c_o;
            blocks.push(taps);
        }
        let mut single = Vec::with_capacity(cfg.single_blocks);
        if cfg.single_blocks > 0 {
            let n = cfg.tokens();
            let s = tape.shape(c)[1];
            let mut h = tape.concat(&[x, c], 1)?;
            for l in 0..cfg.single_blocks {
                let (out, att) = single_block_forward(tape, w, &format!("single{l}"), h, cond, cfg.heads)?;
                h = out;
                if let Some(&y) = control.single.get(l) {
                    let pad = tape.constant(Tensor::zeros(&[b, s, cfg.width]));
                    let y = tape.concat(&[y, pad], 1)?;
                    h = inject(tape, h, y)?;
                }
                single.push(att);
            }
            x = tape.slice(h, 1, 0, n)?;
        }
        let fm = w.linear(tape, "final.mod", cond)?;
        let fp = chunk_last(tape, fm, 2)?;
        let ln = norm(tape, x)?;
        let x = modulate(tape, ln, fp[0], fp[1])?;
        let out = w.linear(tape, "final.lin", x)?;
        let velocity = unpatchify(tape, out, cfg.patch, cfg.latent_size, cfg.latent_channels)?;
        Ok(ModelOutput { velocity, blocks, single })
    }

    /// Frozen velocity evaluation on a private tape.
    pub fn velocity<T: Scalar>(
        &self,
        latent: &Tensor<T>,
        cond: &TeacherCondition<T>,
        t: &[f64],
        lora: Option<&LoraParams>,
        control: Option<&ControlValues<T>>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::<T>::new();
        let base = self.bind(&mut tape);
        let lora_bound = lora.map(|l| (l.store.cast::<T>().bind(&mut tape, false), T::of(l.scale)));
        let w = Weights {
            base: &base,
            lora: lora_bound.as_ref().map(|(b, s)| (b, *s)),
        };
        let x = tape.constant(latent.clone());
        let c = tape.constant(cond.c.clone());
        let c_p = tape.constant(cond.c_p.clone());
        let (double, single) = match control {
            Some(cv) => (
                cv.double.iter().map(|t| tape.constant(t.clone())).collect(),
                cv.single.iter().map(|t| tape.constant(t.clone())).collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        let out = self.forward_on(&mut tape, &w, x, c, c_p, t, Control { double: &double, single: &single })?;
        Ok(tape.value(out.velocity).clone())
    }

    /// Seeded unit-Gaussian noise of latent shape.
    pub fn noise<T: Scalar>(&self, batch: usize, seed: u64) -> Tensor<T> {
        let mut rng = seed::rng(seed, "sample-noise", 0);
        Tensor::<f64>::randn(&self.cfg.latent_shape(batch), 1.0, &mut rng).cast()
    }

    /// Euler integration of the velocity field from noise at `t = 1` to
    /// `t = 0` in `steps` equal steps.
    pub fn sample<T: Scalar>(
        &self,
        cond: &TeacherCondition<T>,
        steps: usize,
        seed: u64,
        lora: Option<&LoraParams>,
        control: Option<&ControlValues<T>>,
    ) -> Result<Tensor<T>> {
        if steps == 0 {
            return Err(Error::Usage("sample needs at least one step".into()));
        }
        let b = cond.batch();
        let mut x = self.noise::<T>(b, seed);
        for i in 0..steps {
            let t = 1.0 - i as f64 / steps as f64;
            let v = self.velocity(&x, cond, &vec![t; b], lora, control)?;
            let dt = T::of(1.0 / steps as f64);
            x = x.zip_map(&v, |a, vel| a - dt * vel)?;
        }
        Ok(x)
    }

    /// Names of the linear maps adapters may target (those with a weight
    /// matrix), in name order.
    pub fn linear_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter_map(|n| n.strip_suffix(".w").map(str::to_string))
            .collect()
    }

    /// Attention projections of every block, the default adapter targets.
    pub fn attention_targets(&self) -> Vec<String> {
        self.linear_names()
            .into_iter()
            .filter(|n| n.contains(".attn."))
            .collect()
    }
}

/// Injection values for [`Mmdit::velocity`].
#[derive(Clone, Debug, PartialEq)]
pub struct ControlValues<T> {
    pub double: Vec<Tensor<T>>,
    pub single: Vec<Tensor<T>>,
}

/// Feature-wise addition of a control output onto a block output.
pub fn inject<T: Scalar>(tape: &mut Tape<T>, x_o: Var, y_c: Var) -> Result<Var> {
    if tape.shape(x_o) != tape.shape(y_c) {
        return Err(Error::Config(format!(
            "control output {:?} does not match block output {:?}",
            tape.shape(y_c),
            tape.shape(x_o)
        )));
    }
    Ok(tape.add(x_o, y_c)?)
}

/// Low-rank adapters on `targets`: `B` `[in, r]` starts at zero so the
/// attachment is a no-op, `A` `[r, out]` is drawn with std `1/√r`.
pub fn attach_lora(model: &Mmdit, targets: &[String], rank: usize, scale: f64, seed: u64) -> Result<LoraParams> {
    if rank == 0 {
        return Err(Error::Config("lora.rank must be >= 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::Config("lora.targets is empty".into()));
    }
    let mut rng = seed::rng(seed, "lora", 0);
    let mut store = ParamStore::new();
    for t in targets {
        let w = model
            .params()
            .get(&format!("{t}.w"))
            .map_err(|_| Error::Config(format!("unknown lora target {t:?}")))?;
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        if rank > fan_in.min(fan_out) {
            return Err(Error::Config(format!("lora rank {rank} exceeds target {t} extents {fan_in}x{fan_out}")));
        }
        store.insert(format!("{t}.lora_b"), Tensor::zeros(&[fan_in, rank]));
        store.insert(format!("{t}.lora_a"), Tensor::randn(&[rank, fan_out], 1.0 / (rank as f64).sqrt(), &mut rng));
    }
    Ok(LoraParams {
        targets: targets.to_vec(),
        rank,
        scale,
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_names_roundtrip() {
        for p in TapPosition::ALL {
            assert_eq!(p.name().parse::<TapPosition>().unwrap(), p);
        }
        assert!("mid".parse::<TapPosition>().unwrap_err().is_config());
    }

    #[test]
    fn patchify_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 8 * 8 * 4).map(|i| i as f64).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 8, 8, 4], &data).unwrap());
        let p = patchify(&mut tape, x, 2).unwrap();
        assert_eq!(tape.shape(p), [2, 16, 16]);
        // First patch is the top-left 2x2 block.
        let v = tape.value(p).data();
        assert_eq!(&v[..8], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(v[8], 32.0);
        let back = unpatchify(&mut tape, p, 2, 8, 4).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }
}

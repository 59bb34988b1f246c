//! Frozen stand-ins for the teacher's text encoders and for the student's
//! multimodal encoder, plus the tokenizer and input template they consume.
//!
//! All weights are drawn from seeded generators and never trained. The
//! student's text-token embeddings are, by default, a fixed projection of the
//! teacher's sequence-encoder embedding table; that shared origin is what
//! makes the alignment learnable at this scale.

use diffcore::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, attention, feed_forward, masked_mean, norm};
use crate::params::{apply_linear, init_linear, Bound, ParamStore};
use crate::seed;

pub const PAD: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab: usize,
    /// Token length of the teacher condition and of stage-1 student streams.
    pub cond_len: usize,
    /// Longest stream the student encoder accepts.
    pub max_seq: usize,
    pub d_c: usize,
    pub d_p: usize,
    pub seq_layers: usize,
    pub seq_heads: usize,
    pub pooled_width: usize,
    pub pooled_layers: usize,
    pub pooled_heads: usize,
    /// Student hidden width `z`.
    pub z: usize,
    /// Student transformer depth; the hidden-state stack has `depth + 1` layers.
    pub student_depth: usize,
    pub student_heads: usize,
    /// Width of continuous modality tokens before projection.
    pub patch_dim: usize,
    pub share_embedding: bool,
    pub residual_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab: 512,
            cond_len: 32,
            max_seq: 96,
            d_c: 64,
            d_p: 32,
            seq_layers: 2,
            seq_heads: 4,
            pooled_width: 32,
            pooled_layers: 2,
            pooled_heads: 2,
            z: 48,
            student_depth: 5,
            student_heads: 4,
            patch_dim: 48,
            share_embedding: true,
            residual_scale: 0.5,
        }
    }
}

impl EncoderConfig {
    /// Number of retained student layers, embedding layer included.
    pub fn stack_depth(&self) -> usize {
        self.student_depth + 1
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        check(self.vocab >= 16, "encoders.vocab must be at least 16")?;
        check(self.cond_len >= 1, "encoders.cond_len must be positive")?;
        check(self.max_seq >= self.cond_len, "encoders.max_seq must be >= cond_len")?;
        check(self.d_c >= 2 && self.d_p >= 1, "encoders.d_c/d_p too small")?;
        check(self.seq_heads > 0 && self.d_c.is_multiple_of(self.seq_heads), "encoders.d_c must divide by seq_heads")?;
        check(
            self.pooled_heads > 0 && self.pooled_width.is_multiple_of(self.pooled_heads),
            "encoders.pooled_width must divide by pooled_heads",
        )?;
        check(
            self.student_heads > 0 && self.z.is_multiple_of(self.student_heads),
            "encoders.z must divide by student_heads",
        )?;
        check(self.z >= 2 && self.pooled_width >= 2, "encoder widths must be >= 2")?;
        check(self.patch_dim == 48, "encoders.patch_dim must be 48 (4x4x3 patches)")?;
        check(
            self.residual_scale.is_finite() && self.residual_scale > 0.0,
            "encoders.residual_scale must be positive",
        )
    }
}

// ------------------------------------------------------------------ tokens

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Video,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Text, Modality::Image, Modality::Video, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Token {
    Text(u32),
    Patch { modality: Modality, features: Vec<f64> },
}

impl Token {
    pub fn modality(&self) -> Modality {
        match self {
            Token::Text(_) => Modality::Text,
            Token::Patch { modality, .. } => *modality,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_text_only(&self) -> bool {
        self.tokens.iter().all(|t| matches!(t, Token::Text(_)))
    }

    pub fn text(tokenizer: &Tokenizer, text: &str) -> Self {
        TokenStream {
            tokens: tokenizer.encode(text).into_iter().map(Token::Text).collect(),
        }
    }

    /// First `n` tokens.
    pub fn truncated(&self, n: usize) -> Self {
        TokenStream {
            tokens: self.tokens.iter().take(n).cloned().collect(),
        }
    }
}

/// Hash-bucketed tokenizer: each run of alphanumerics (lowercased) and each
/// other non-space character becomes one piece, hashed with FNV-1a into
/// `[1, vocab)`. Id 0 is padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: usize,
}

impl Tokenizer {
    pub fn new(vocab: usize) -> Self {
        Tokenizer { vocab }
    }

    pub fn pieces(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    pub fn id(&self, piece: &str) -> u32 {
        1 + (seed::fnv1a(piece.as_bytes()) % (self.vocab as u64 - 1)) as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        Self::pieces(text).iter().map(|p| self.id(p)).collect()
    }
}

// ------------------------------------------------------------------ template

/// Inputs to the student template. Continuous payloads are given as tokens
/// already produced by [`synth_modality_tokens`].
#[derive(Clone, Debug, Default)]
pub struct TemplateParts {
    pub text_prompt: String,
    pub editing_prompt: String,
    pub image: Option<Vec<Token>>,
    pub video: Option<Vec<Token>>,
    pub audio: Option<Vec<Token>>,
}

/// The field map carried by a serialized template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateFields {
    #[serde(rename = "text prompt")]
    pub text_prompt: String,
    #[serde(rename = "editing prompt")]
    pub editing_prompt: String,
    #[serde(rename = "image prompt")]
    pub image_prompt: String,
    #[serde(rename = "video prompt")]
    pub video_prompt: String,
    #[serde(rename = "audio prompt")]
    pub audio_prompt: String,
}

impl TemplateParts {
    pub fn fields(&self) -> TemplateFields {
        let flag = |p: &Option<Vec<Token>>| if p.is_some() { "yes" } else { "no" }.to_string();
        TemplateFields {
            text_prompt: self.text_prompt.clone(),
            editing_prompt: self.editing_prompt.clone(),
            image_prompt: flag(&self.image),
            video_prompt: flag(&self.video),
            audio_prompt: flag(&self.audio),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TemplatedInput {
    pub text: String,
    pub stream: TokenStream,
}

/// Serializes `parts` into the fixed five-field template and tokenizes it;
/// continuous tokens are spliced right after their "yes" slot.
pub fn build_template(parts: &TemplateParts, tokenizer: &Tokenizer) -> Result<TemplatedInput> {
    if parts.text_prompt.is_empty()
        && parts.editing_prompt.is_empty()
        && parts.image.is_none()
        && parts.video.is_none()
        && parts.audio.is_none()
    {
        return Err(Error::Usage("template needs at least one non-empty field".into()));
    }
    let fields = parts.fields();
    let quoted = |s: &str| serde_json::to_string(s).expect("string serialization");
    let segments: [(String, Option<&Vec<Token>>); 5] = [
        (format!("{{\"text prompt\":{}", quoted(&fields.text_prompt)), None),
        (format!(",\"editing prompt\":{}", quoted(&fields.editing_prompt)), None),
        (format!(",\"image prompt\":{}", quoted(&fields.image_prompt)), parts.image.as_ref()),
        (format!(",\"video prompt\":{}", quoted(&fields.video_prompt)), parts.video.as_ref()),
        (format!(",\"audio prompt\":{}}}", quoted(&fields.audio_prompt)), parts.audio.as_ref()),
    ];
    let mut text = String::new();
    let mut tokens = Vec::new();
    for (segment, payload) in segments.iter() {
        text.push_str(segment);
        tokens.extend(tokenizer.encode(segment).into_iter().map(Token::Text));
        if let Some(p) = payload {
            tokens.extend(p.iter().cloned());
        }
    }
    Ok(TemplatedInput {
        text,
        stream: TokenStream { tokens },
    })
}

pub fn parse_template(text: &str) -> Result<TemplateFields> {
    Ok(serde_json::from_str(text)?)
}

// ------------------------------------------------------------------ modality payloads

/// A small dense array standing in for a decoded image, clip, or waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct Payload {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

const IMAGE_PATCH: usize = 4;
const CHANNELS: usize = 3;
const AUDIO_WINDOW: usize = 96;

/// Deterministically cuts a payload into fixed-width (48) vectors:
/// images `[h, w, 3]` into 4×4 patches, video `[t, 8, 8, 3]` into one
/// 2×-pooled frame per token, audio `[n]` into magnitude spectra of
/// 96-sample windows.
pub fn synth_modality_tokens(kind: Modality, payload: &Payload) -> Result<Vec<Token>> {
    if payload.data.len() != payload.shape.iter().product::<usize>() {
        return Err(Error::Usage("payload data does not match its shape".into()));
    }
    let bad = |what: &str| Error::Usage(format!("{} payload: {what}, got shape {:?}", kind.name(), payload.shape));
    let d = &payload.data;
    let vectors: Vec<Vec<f64>> = match kind {
        Modality::Text => return Err(Error::Usage("text is not a continuous modality".into())),
        Modality::Image => {
            let [h, w, c] = payload.shape[..] else { return Err(bad("expected [h, w, 3]")) };
            if c != CHANNELS || h % IMAGE_PATCH != 0 || w % IMAGE_PATCH != 0 || h == 0 || w == 0 {
                return Err(bad("extents must be multiples of 4 with 3 channels"));
            }
            let mut out = Vec::new();
            for py in 0..h / IMAGE_PATCH {
                for px in 0..w / IMAGE_PATCH {
                    let mut v = Vec::with_capacity(IMAGE_PATCH * IMAGE_PATCH * c);
                    for dy in 0..IMAGE_PATCH {
                        for dx in 0..IMAGE_PATCH {
                            let (y, x) = (py * IMAGE_PATCH + dy, px * IMAGE_PATCH + dx);
                            v.extend_from_slice(&d[(y * w + x) * c..(y * w + x + 1) * c]);
                        }
                    }
                    out.push(v);
                }
            }
            out
        }
        Modality::Video => {
            let [t, h, w, c] = payload.shape[..] else { return Err(bad("expected [t, 8, 8, 3]")) };
            if h != 8 || w != 8 || c != CHANNELS || t == 0 {
                return Err(bad("frames must be 8x8x3"));
            }
            (0..t)
                .map(|f| {
                    let frame = &d[f * h * w * c..(f + 1) * h * w * c];
                    let mut v = Vec::with_capacity(48);
                    for y in 0..h / 2 {
                        for x in 0..w / 2 {
                            for ch in 0..c {
                                let at = |yy: usize, xx: usize| frame[(yy * w + xx) * c + ch];
                                let s = at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1);
                                v.push(s * 0.25);
                            }
                        }
                    }
                    v
                })
                .collect()
        }
        Modality::Audio => {
            let [n] = payload.shape[..] else { return Err(bad("expected [n]")) };
            if n < AUDIO_WINDOW {
                return Err(bad("needs at least 96 samples"));
            }
            (0..n / AUDIO_WINDOW)
                .map(|wi| {
                    let win = &d[wi * AUDIO_WINDOW..(wi + 1) * AUDIO_WINDOW];
                    (0..AUDIO_WINDOW / 2)
                        .map(|k| {
                            let (mut re, mut im) = (0.0, 0.0);
                            for (i, &s) in win.iter().enumerate() {
                                let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / AUDIO_WINDOW as f64;
                                re += s * a.cos();
                                im += s * a.sin();
                            }
                            (re * re + im * im).sqrt() / AUDIO_WINDOW as f64
                        })
                        .collect()
                })
                .collect()
        }
    };
    Ok(vectors
        .into_iter()
        .map(|features| Token::Patch { modality: kind, features })
        .collect())
}

/// Seeded synthetic payload for `kind`: an 8×8 image of a colored
/// rectangle, three 8×8 frames of a moving square, or 384 audio samples.
pub fn synth_payload(kind: Modality, seed: u64) -> Result<Payload> {
    use rand::Rng;
    let mut rng = seed::rng(seed, kind.name(), 0);
    match kind {
        Modality::Text => Err(Error::Usage("text has no continuous payload".into())),
        Modality::Image => {
            let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let (y0, x0) = (rng.random_range(0..5usize), rng.random_range(0..5usize));
            let (hh, ww) = (rng.random_range(2..5usize), rng.random_range(2..5usize));
            let mut data = vec![0.0; 8 * 8 * 3];
            for y in y0..(y0 + hh).min(8) {
                for x in x0..(x0 + ww).min(8) {
                    data[(y * 8 + x) * 3..(y * 8 + x) * 3 + 3].copy_from_slice(&color);
                }
            }
            Ok(Payload { shape: vec![8, 8, 3], data })
        }
        Modality::Video => {
            let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let (mut y, mut x) = (rng.random_range(0..5usize), rng.random_range(0..5usize));
            let mut data = vec![0.0; 3 * 8 * 8 * 3];
            for f in 0..3 {
                for yy in y..y + 3 {
                    for xx in x..x + 3 {
                        let at = ((f * 8 + yy) * 8 + xx) * 3;
                        data[at..at + 3].copy_from_slice(&color);
                    }
                }
                y = (y + 1).min(5);
                x = (x + 1).min(5);
            }
            Ok(Payload { shape: vec![3, 8, 8, 3], data })
        }
        Modality::Audio => {
            let f1 = rng.random_range(2.0..20.0);
            let f2 = rng.random_range(20.0..45.0);
            let data = (0..384)
                .map(|i| {
                    let t = i as f64 / 96.0;
                    (2.0 * std::f64::consts::PI * f1 * t).sin() + 0.5 * (2.0 * std::f64::consts::PI * f2 * t).cos()
                })
                .collect();
            Ok(Payload { shape: vec![384], data })
        }
    }
}

// ------------------------------------------------------------------ shared transformer

fn init_transformer<R: rand::Rng>(store: &mut ParamStore<f64>, prefix: &str, width: usize, layers: usize, rng: &mut R) {
    for l in 0..layers {
        let p = format!("{prefix}.layer{l}");
        for proj in ["q", "k", "v"] {
            init_linear(store, &format!("{p}.{proj}"), width, width, 1.0, false, rng);
        }
        init_linear(store, &format!("{p}.o"), width, width, 1.0, true, rng);
        init_linear(store, &format!("{p}.ff.fc1"), width, 2 * width, 1.0, true, rng);
        init_linear(store, &format!("{p}.ff.fc2"), 2 * width, width, 1.0, true, rng);
    }
}

/// Pre-norm residual transformer layers; returns the output of every layer.
#[allow(clippy::too_many_arguments)]
fn run_transformer<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    mut h: Var,
    layers: usize,
    heads: usize,
    residual: f64,
    key_bias: Var,
) -> Result<Vec<Var>> {
    let mut outs = Vec::with_capacity(layers);
    for l in 0..layers {
        let p = format!("{prefix}.layer{l}");
        let a = norm(tape, h)?;
        let q = apply_linear(tape, bound, &format!("{p}.q"), a)?;
        let k = apply_linear(tape, bound, &format!("{p}.k"), a)?;
        let v = apply_linear(tape, bound, &format!("{p}.v"), a)?;
        let att = attention(tape, q, k, v, heads, Some(key_bias))?;
        let o = apply_linear(tape, bound, &format!("{p}.o"), att.out)?;
        let o = tape.mul_scalar(o, T::of(residual));
        h = tape.add(h, o)?;
        let f = norm(tape, h)?;
        let f = feed_forward(tape, bound, &format!("{p}.ff"), f)?;
        let f = tape.mul_scalar(f, T::of(residual));
        h = tape.add(h, f)?;
        outs.push(h);
    }
    Ok(outs)
}

/// `[b, 1, 1, s]` additive logit bias: 0 for real tokens, -1e9 for padding.
fn key_bias<T: Scalar>(tape: &mut Tape<T>, mask: &Tensor<T>) -> Result<Var> {
    let s = mask.shape().to_vec();
    let bias = mask.map(|m| if m > T::zero() { T::zero() } else { T::of(-1e9) });
    Ok(tape.constant(bias.reshaped(&[s[0], 1, 1, s[1]])?))
}

fn add_positions<T: Scalar>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    let pos = tape.constant(nn::sinusoidal::<T>(s[1], s[2]));
    Ok(tape.add(h, pos)?)
}

/// Pads (with [`PAD`]) or rejects token-id rows so all have length `len`.
fn text_ids(streams: &[TokenStream], len: usize) -> Result<(Vec<Option<usize>>, Vec<f64>)> {
    let mut ids = Vec::with_capacity(streams.len() * len);
    let mut mask = Vec::with_capacity(streams.len() * len);
    for s in streams {
        for i in 0..len {
            match s.tokens.get(i) {
                Some(Token::Text(id)) => {
                    ids.push(Some(*id as usize));
                    mask.push(1.0);
                }
                Some(Token::Patch { .. }) => return Err(Error::Usage("teacher encoders accept text tokens only".into())),
                None => {
                    ids.push(Some(PAD as usize));
                    mask.push(0.0);
                }
            }
        }
    }
    Ok((ids, mask))
}

// ------------------------------------------------------------------ teacher

/// Teacher generation condition: sequence features `c` `[b, s, d_c]` and the
/// pooled vector `c_p` `[b, d_p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCondition<T> {
    pub c: Tensor<T>,
    pub c_p: Tensor<T>,
}

impl<T: Scalar> TeacherCondition<T> {
    pub fn batch(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> TeacherCondition<U> {
        TeacherCondition {
            c: self.c.cast(),
            c_p: self.c_p.cast(),
        }
    }

    /// Joins single-prompt conditions along the batch axis.
    pub fn stack(parts: &[&TeacherCondition<T>]) -> Result<Self> {
        let c: Vec<Tensor<T>> = parts.iter().map(|p| p.c.index0(0)).collect();
        let cp: Vec<Tensor<T>> = parts.iter().map(|p| p.c_p.index0(0)).collect();
        Ok(TeacherCondition {
            c: Tensor::stack(&c)?,
            c_p: Tensor::stack(&cp)?,
        })
    }
}

/// Teacher encodings plus the pooled encoder's token-level hidden states,
/// which the pooled vector is an affine function of (after masked mean).
#[derive(Clone, Debug)]
pub struct TeacherEncoding<T> {
    pub condition: TeacherCondition<T>,
    pub pooled_hidden: Tensor<T>,
    pub mask: Tensor<T>,
}

/// The teacher's two frozen text encoders: a sequence encoder producing `c`
/// and a pooled encoder producing `c_p`.
#[derive(Clone, Debug)]
pub struct TeacherEncoders {
    cfg: EncoderConfig,
    params: ParamStore<f64>,
    tokenizer: Tokenizer,
}

impl TeacherEncoders {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "teacher-encoders", 0);
        let mut params = ParamStore::new();
        params.insert("seq.embed", Tensor::randn(&[cfg.vocab, cfg.d_c], 1.0, &mut rng));
        init_transformer(&mut params, "seq", cfg.d_c, cfg.seq_layers, &mut rng);
        params.insert("pool.embed", Tensor::randn(&[cfg.vocab, cfg.pooled_width], 1.0, &mut rng));
        init_transformer(&mut params, "pool", cfg.pooled_width, cfg.pooled_layers, &mut rng);
        init_linear(&mut params, "pool.proj", cfg.pooled_width, cfg.d_p, 1.0, true, &mut rng);
        TeacherEncoders {
            cfg: cfg.clone(),
            params,
            tokenizer: Tokenizer::new(cfg.vocab),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    pub fn sequence_embedding(&self) -> &Tensor<f64> {
        self.params.get("seq.embed").expect("sequence embedding present")
    }

    /// Records the frozen forward on `tape`. Weights are bound as constants,
    /// so no gradient can ever be produced for them. Streams longer than
    /// `cond_len` are truncated.
    pub fn forward_on<T: Scalar>(&self, tape: &mut Tape<T>, prompts: &[TokenStream]) -> Result<(Bound, Var, Var, Var)> {
        if prompts.is_empty() {
            return Err(Error::Usage("teacher_encode needs at least one prompt".into()));
        }
        if prompts.iter().any(|p| !p.is_text_only()) {
            return Err(Error::Usage("teacher encoders accept text tokens only".into()));
        }
        let (b, s) = (prompts.len(), self.cfg.cond_len);
        let trimmed: Vec<TokenStream> = prompts.iter().map(|p| p.truncated(s)).collect();
        let (ids, mask) = text_ids(&trimmed, s)?;
        let mask = Tensor::<T>::from_f64(&[b, s], &mask)?;
        let bound = self.params.cast::<T>().bind(tape, false);
        let bias = key_bias(tape, &mask)?;

        let table = bound.var("seq.embed")?;
        let e = tape.gather_rows(table, &ids)?;
        let e = tape.reshape(e, &[b, s, self.cfg.d_c])?;
        let h = add_positions(tape, e)?;
        let outs = run_transformer(tape, &bound, "seq", h, self.cfg.seq_layers, self.cfg.seq_heads, self.cfg.residual_scale, bias)?;
        let c = norm(tape, *outs.last().unwrap_or(&h))?;

        let ptable = bound.var("pool.embed")?;
        let pe = tape.gather_rows(ptable, &ids)?;
        let pe = tape.reshape(pe, &[b, s, self.cfg.pooled_width])?;
        let ph = add_positions(tape, pe)?;
        let pouts = run_transformer(tape, &bound, "pool", ph, self.cfg.pooled_layers, self.cfg.pooled_heads, self.cfg.residual_scale, bias)?;
        let hidden = norm(tape, *pouts.last().unwrap_or(&ph))?;
        let pooled = masked_mean(tape, hidden, &mask)?;
        let c_p = apply_linear(tape, &bound, "pool.proj", pooled)?;
        Ok((bound, c, c_p, hidden))
    }

    pub fn encode_full<T: Scalar>(&self, prompts: &[TokenStream]) -> Result<TeacherEncoding<T>> {
        let mut tape = Tape::<T>::new();
        let (_, c, c_p, hidden) = self.forward_on(&mut tape, prompts)?;
        let (b, s) = (prompts.len(), self.cfg.cond_len);
        let trimmed: Vec<TokenStream> = prompts.iter().map(|p| p.truncated(s)).collect();
        let (_, mask) = text_ids(&trimmed, s)?;
        Ok(TeacherEncoding {
            condition: TeacherCondition {
                c: tape.value(c).clone(),
                c_p: tape.value(c_p).clone(),
            },
            pooled_hidden: tape.value(hidden).clone(),
            mask: Tensor::from_f64(&[b, s], &mask)?,
        })
    }

    pub fn encode<T: Scalar>(&self, prompts: &[TokenStream]) -> Result<TeacherCondition<T>> {
        Ok(self.encode_full(prompts)?.condition)
    }

    pub fn encode_text<T: Scalar>(&self, prompts: &[&str]) -> Result<TeacherCondition<T>> {
        let streams: Vec<TokenStream> = prompts.iter().map(|p| TokenStream::text(&self.tokenizer, p)).collect();
        self.encode(&streams)
    }
}

// ------------------------------------------------------------------ student

/// Per-layer student features `h` `[b, m, s, z]` (layer 0 is the embedding
/// layer) and the token validity mask `[b, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateStack<T> {
    pub h: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> HiddenStateStack<T> {
    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.h.shape()[1]
    }

    pub fn seq_len(&self) -> usize {
        self.h.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.h.shape()[3]
    }

    pub fn cast<U: Scalar>(&self) -> HiddenStateStack<U> {
        HiddenStateStack {
            h: self.h.cast(),
            mask: self.mask.cast(),
        }
    }

    pub fn stack(parts: &[&HiddenStateStack<T>]) -> Result<Self> {
        let h: Vec<Tensor<T>> = parts.iter().map(|p| p.h.index0(0)).collect();
        let m: Vec<Tensor<T>> = parts.iter().map(|p| p.mask.index0(0)).collect();
        Ok(HiddenStateStack {
            h: Tensor::stack(&h)?,
            mask: Tensor::stack(&m)?,
        })
    }
}

/// Frozen stand-in for a multimodal LLM that exposes every layer's hidden
/// states.
#[derive(Clone, Debug)]
pub struct StudentEncoder {
    cfg: EncoderConfig,
    params: ParamStore<f64>,
    tokenizer: Tokenizer,
}

impl StudentEncoder {
    /// `teacher` supplies the shared embedding table when
    /// `cfg.share_embedding` is set.
    pub fn new(cfg: &EncoderConfig, seed: u64, teacher: &TeacherEncoders) -> Self {
        let mut rng = seed::rng(seed, "student-encoder", 0);
        let mut params = ParamStore::new();
        if cfg.share_embedding {
            params.insert("embed.table", teacher.sequence_embedding().clone());
            init_linear(&mut params, "embed.share", cfg.d_c, cfg.z, 1.0, false, &mut rng);
        } else {
            params.insert("embed.table", Tensor::randn(&[cfg.vocab, cfg.z], 1.0, &mut rng));
        }
        for m in [Modality::Image, Modality::Video, Modality::Audio] {
            let name = format!("embed.{}", m.name());
            init_linear(&mut params, &name, cfg.patch_dim, cfg.z, 1.0, true, &mut rng);
            params.insert(format!("{name}.b"), Tensor::randn(&[cfg.z], 0.1, &mut rng));
        }
        init_transformer(&mut params, "body", cfg.z, cfg.student_depth, &mut rng);
        StudentEncoder {
            cfg: cfg.clone(),
            params,
            tokenizer: Tokenizer::new(cfg.vocab),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    /// Encodes each stream padded to `pad_to` tokens (at least the longest
    /// stream) and returns every layer's output.
    pub fn encode<T: Scalar>(&self, streams: &[TokenStream], pad_to: usize) -> Result<HiddenStateStack<T>> {
        if streams.is_empty() {
            return Err(Error::Usage("mllm_encode needs at least one stream".into()));
        }
        let longest = streams.iter().map(TokenStream::len).max().unwrap_or(0);
        if longest > self.cfg.max_seq {
            return Err(Error::Usage(format!(
                "stream of {longest} tokens exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let (b, s, z) = (streams.len(), pad_to.max(longest).max(1), self.cfg.z);
        let mut tape = Tape::<T>::new();
        let bound = self.params.cast::<T>().bind(&mut tape, false);

        // Rows [0, b*s) come from the text embedding (padding where a patch
        // sits); patch rows are appended after them and picked by index.
        let mut ids = Vec::with_capacity(b * s);
        let mut mask = Vec::with_capacity(b * s);
        let mut patches: Vec<(Modality, &[f64])> = Vec::new();
        let mut pick = Vec::with_capacity(b * s);
        for stream in streams {
            for i in 0..s {
                match stream.tokens.get(i) {
                    Some(Token::Text(id)) => {
                        ids.push(Some(*id as usize));
                        mask.push(1.0);
                        pick.push(Some(pick.len()));
                    }
                    Some(Token::Patch { modality, features }) => {
                        if *modality == Modality::Text || features.len() != self.cfg.patch_dim {
                            return Err(Error::Usage("malformed continuous token".into()));
                        }
                        ids.push(Some(PAD as usize));
                        mask.push(1.0);
                        pick.push(None);
                        patches.push((*modality, features));
                    }
                    None => {
                        ids.push(Some(PAD as usize));
                        mask.push(0.0);
                        pick.push(Some(pick.len()));
                    }
                }
            }
        }
        let table = bound.var("embed.table")?;
        let rows = tape.gather_rows(table, &ids)?;
        let text_rows = if self.cfg.share_embedding {
            apply_linear(&mut tape, &bound, "embed.share", rows)?
        } else {
            rows
        };
        let mut all_rows = vec![text_rows];
        let mut next = b * s;
        for idx in pick.iter_mut() {
            if idx.is_none() {
                *idx = Some(next);
                next += 1;
            }
        }
        for (modality, features) in &patches {
            let v = tape.constant(Tensor::<T>::from_f64(&[1, self.cfg.patch_dim], features)?);
            let e = apply_linear(&mut tape, &bound, &format!("embed.{}", modality.name()), v)?;
            all_rows.push(e);
        }
        let joined = if all_rows.len() == 1 { all_rows[0] } else { tape.concat(&all_rows, 0)? };
        let layer0 = tape.gather_rows(joined, &pick)?;
        let layer0 = tape.reshape(layer0, &[b, s, z])?;

        let mask = Tensor::<T>::from_f64(&[b, s], &mask)?;
        let bias = key_bias(&mut tape, &mask)?;
        let h = add_positions(&mut tape, layer0)?;
        let outs = run_transformer(&mut tape, &bound, "body", h, self.cfg.student_depth, self.cfg.student_heads, self.cfg.residual_scale, bias)?;
        let mut layers = vec![layer0];
        layers.extend(outs);
        let reshaped: Vec<Var> = layers
            .into_iter()
            .map(|l| tape.reshape(l, &[b, 1, s, z]))
            .collect::<diffcore::Result<_>>()?;
        let stack = tape.concat(&reshaped, 1)?;
        Ok(HiddenStateStack {
            h: tape.value(stack).clone(),
            mask,
        })
    }

    pub fn encode_text<T: Scalar>(&self, prompts: &[&str], pad_to: usize) -> Result<HiddenStateStack<T>> {
        let streams: Vec<TokenStream> = prompts
            .iter()
            .map(|p| TokenStream::text(&self.tokenizer, p).truncated(pad_to))
            .collect();
        self.encode(&streams, pad_to)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_pieces() {
        assert_eq!(Tokenizer::pieces("A red-cat!"), vec!["a", "red", "-", "cat", "!"]);
        let t = Tokenizer::new(512);
        let ids = t.encode("a red cat");
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| (1..512).contains(&i)));
        assert_eq!(ids, t.encode("A RED CAT"));
    }

    #[test]
    fn image_patch_count() {
        let p = Payload { shape: vec![8, 8, 3], data: vec![0.5; 192] };
        let toks = synth_modality_tokens(Modality::Image, &p).unwrap();
        assert_eq!(toks.len(), 4);
    }

    #[test]
    fn zero_payload_gives_zero_tokens() {
        for (kind, shape) in [
            (Modality::Image, vec![8, 8, 3]),
            (Modality::Video, vec![2, 8, 8, 3]),
            (Modality::Audio, vec![192]),
        ] {
            let n = shape.iter().product();
            let toks = synth_modality_tokens(kind, &Payload { shape, data: vec![0.0; n] }).unwrap();
            for t in toks {
                let Token::Patch { features, .. } = t else { panic!() };
                assert!(features.iter().all(|&v| v == 0.0));
                assert_eq!(features.len(), 48);
            }
        }
    }

    #[test]
    fn text_kind_is_rejected() {
        let p = Payload { shape: vec![1], data: vec![0.0] };
        assert!(synth_modality_tokens(Modality::Text, &p).is_err());
        assert!(synth_payload(Modality::Text, 0).is_err());
    }

    #[test]
    fn synthetic_payloads_are_deterministic() {
        for kind in [Modality::Image, Modality::Video, Modality::Audio] {
            let a = synth_modality_tokens(kind, &synth_payload(kind, 3).unwrap()).unwrap();
            let b = synth_modality_tokens(kind, &synth_payload(kind, 3).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }
}
